"""Batched per-token kernels over a tabular logit table.

Every kernel walks a batch of token sequences, each token looked up through a
state index into ``logits`` (shape ``(num_states, V)``), and returns one value
per sequence. When ``want_grad`` is true the weighted gradient with respect to
the logit table is accumulated in place into ``grad``: sequence ``n``
contributes ``seq_weight[n] * d(value_n)/d(logits)``.

Two implementations exist for each kernel: an explicit loop compiled with
numba, and a vectorized numpy version. ``BPCLAB_NO_NUMBA=1`` selects the numpy
one. Both are always importable so they can be compared against each other.

Conventions shared by both paths:

* confidence is the largest probability in the row; ties go to the lowest index
* the calibration target (margin surrogate) is held constant when
  differentiating
* sequences shorter than the padded width carry their length in ``lengths``;
  padded positions are ignored
"""

from __future__ import annotations

import math

import numpy as np

from ._backend import HAVE_NUMBA, njit

CAL_L1 = 0
CAL_BCE = 1
BCE_EPS = 1e-12


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_sigmoid(u):
    if u >= 0.0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


@njit(cache=True)
def _nb_softmax_row(row, out):
    V = row.shape[0]
    m = row[0]
    for j in range(1, V):
        if row[j] > m:
            m = row[j]
    tot = 0.0
    for j in range(V):
        out[j] = math.exp(row[j] - m)
        tot += out[j]
    for j in range(V):
        out[j] /= tot
    return m + math.log(tot)


@njit(cache=True)
def _nb_seq_logprob(logits, states, tokens, lengths, seq_weight, grad, want_grad):
    N = tokens.shape[0]
    V = logits.shape[1]
    out = np.zeros(N)
    p = np.empty(V)
    for n in range(N):
        acc = 0.0
        w = seq_weight[n]
        for t in range(lengths[n]):
            s = states[n, t]
            y = tokens[n, t]
            logz = _nb_softmax_row(logits[s], p)
            acc += logits[s, y] - logz
            if want_grad:
                for j in range(V):
                    grad[s, j] -= w * p[j]
                grad[s, y] += w
        out[n] = acc
    return out


@njit(cache=True)
def _nb_seq_calibration(logits, states, tokens, lengths, flip, kind, seq_weight, grad, want_grad):
    N = tokens.shape[0]
    V = logits.shape[1]
    out = np.zeros(N)
    p = np.empty(V)
    for n in range(N):
        L = lengths[n]
        acc = 0.0
        w = seq_weight[n] / L
        for t in range(L):
            s = states[n, t]
            y = tokens[n, t]
            _nb_softmax_row(logits[s], p)
            top = 0
            for j in range(1, V):
                if p[j] > p[top]:
                    top = j
            c = p[top]
            rival = -1.0
            for j in range(V):
                if j != y and p[j] > rival:
                    rival = p[j]
            zt = _nb_sigmoid(p[y] - rival)
            target = 1.0 - zt if flip[n] else zt
            if kind == 0:
                acc += target * (1.0 - c) + (1.0 - target) * c
                dl_dc = 1.0 - 2.0 * target
            else:
                cc = c
                clamped = False
                if cc < BCE_EPS:
                    cc = BCE_EPS
                    clamped = True
                elif cc > 1.0 - BCE_EPS:
                    cc = 1.0 - BCE_EPS
                    clamped = True
                acc += -(target * math.log(cc) + (1.0 - target) * math.log(1.0 - cc))
                dl_dc = 0.0 if clamped else -target / cc + (1.0 - target) / (1.0 - cc)
            if want_grad:
                g = w * dl_dc * c
                for j in range(V):
                    grad[s, j] -= g * p[j]
                grad[s, top] += g
        out[n] = acc / L
    return out


@njit(cache=True)
def _nb_seq_cross_entropy(logits, states, tokens, lengths, eps, seq_weight, grad, want_grad):
    N = tokens.shape[0]
    V = logits.shape[1]
    out = np.zeros(N)
    p = np.empty(V)
    off = eps / V
    for n in range(N):
        L = lengths[n]
        acc = 0.0
        w = seq_weight[n] / L
        for t in range(L):
            s = states[n, t]
            y = tokens[n, t]
            logz = _nb_softmax_row(logits[s], p)
            ce = 0.0
            for j in range(V):
                ce -= off * (logits[s, j] - logz)
            ce -= (1.0 - eps) * (logits[s, y] - logz)
            acc += ce
            if want_grad:
                for j in range(V):
                    grad[s, j] += w * (p[j] - off)
                grad[s, y] -= w * (1.0 - eps)
        out[n] = acc / L
    return out


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _np_rows(logits, states, lengths):
    T = states.shape[1]
    mask = np.arange(T)[None, :] < lengths[:, None]
    rows = logits[states]
    m = rows.max(axis=-1, keepdims=True)
    e = np.exp(rows - m)
    tot = e.sum(axis=-1, keepdims=True)
    probs = e / tot
    logz = (m + np.log(tot))[..., 0]
    return rows, probs, logz, mask


def _np_scatter(grad, states, mask, contrib):
    np.add.at(grad, states[mask], contrib[mask])


def _np_seq_logprob(logits, states, tokens, lengths, seq_weight, grad, want_grad):
    rows, probs, logz, mask = _np_rows(logits, states, lengths)
    lp = np.take_along_axis(rows, tokens[..., None], axis=-1)[..., 0] - logz
    out = np.where(mask, lp, 0.0).sum(axis=1)
    if want_grad:
        w = np.broadcast_to(seq_weight[:, None], tokens.shape)
        contrib = -w[..., None] * probs
        np.put_along_axis(
            contrib,
            tokens[..., None],
            np.take_along_axis(contrib, tokens[..., None], axis=-1) + w[..., None],
            axis=-1,
        )
        _np_scatter(grad, states, mask, contrib)
    return out


def _np_seq_calibration(logits, states, tokens, lengths, flip, kind, seq_weight, grad, want_grad):
    _, probs, _, mask = _np_rows(logits, states, lengths)
    top = probs.argmax(axis=-1)
    c = np.take_along_axis(probs, top[..., None], axis=-1)[..., 0]
    p_true = np.take_along_axis(probs, tokens[..., None], axis=-1)[..., 0]
    others = probs.copy()
    np.put_along_axis(others, tokens[..., None], -1.0, axis=-1)
    rival = others.max(axis=-1)
    zt = _np_sigmoid(p_true - rival)
    target = np.where(flip[:, None].astype(bool), 1.0 - zt, zt)
    if kind == CAL_L1:
        loss = target * (1.0 - c) + (1.0 - target) * c
        dl_dc = 1.0 - 2.0 * target
    else:
        cc = np.clip(c, BCE_EPS, 1.0 - BCE_EPS)
        loss = -(target * np.log(cc) + (1.0 - target) * np.log(1.0 - cc))
        dl_dc = np.where(cc == c, -target / cc + (1.0 - target) / (1.0 - cc), 0.0)
    L = lengths.astype(np.float64)
    out = np.where(mask, loss, 0.0).sum(axis=1) / L
    if want_grad:
        g = (seq_weight / L)[:, None] * dl_dc * c
        contrib = -g[..., None] * probs
        np.put_along_axis(
            contrib,
            top[..., None],
            np.take_along_axis(contrib, top[..., None], axis=-1) + g[..., None],
            axis=-1,
        )
        _np_scatter(grad, states, mask, contrib)
    return out


def _np_seq_cross_entropy(logits, states, tokens, lengths, eps, seq_weight, grad, want_grad):
    rows, probs, logz, mask = _np_rows(logits, states, lengths)
    V = logits.shape[1]
    logp = rows - logz[..., None]
    lp_true = np.take_along_axis(logp, tokens[..., None], axis=-1)[..., 0]
    ce = -(eps / V) * logp.sum(axis=-1) - (1.0 - eps) * lp_true
    L = lengths.astype(np.float64)
    out = np.where(mask, ce, 0.0).sum(axis=1) / L
    if want_grad:
        w = np.broadcast_to((seq_weight / L)[:, None], tokens.shape)
        contrib = w[..., None] * (probs - eps / V)
        np.put_along_axis(
            contrib,
            tokens[..., None],
            np.take_along_axis(contrib, tokens[..., None], axis=-1) - (1.0 - eps) * w[..., None],
            axis=-1,
        )
        _np_scatter(grad, states, mask, contrib)
    return out


def _np_sigmoid(u):
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

IMPLEMENTATIONS = {
    "numpy": (_np_seq_logprob, _np_seq_calibration, _np_seq_cross_entropy),
}
if HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = (_nb_seq_logprob, _nb_seq_calibration, _nb_seq_cross_entropy)

DEFAULT_BACKEND = "numba" if HAVE_NUMBA else "numpy"


def _prep(logits, states, tokens, lengths, seq_weight, grad):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    states = np.ascontiguousarray(states, dtype=np.int64)
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    if states.shape != tokens.shape or states.ndim != 2:
        raise ValueError("states and tokens must be 2-d arrays of identical shape")
    N, T = tokens.shape
    if lengths is None:
        lengths = np.full(N, T, dtype=np.int64)
    else:
        lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(lengths > T):
        raise ValueError("sequence lengths must lie in [1, padded width]")
    want_grad = grad is not None
    if seq_weight is None:
        seq_weight = np.ones(N)
    seq_weight = np.ascontiguousarray(seq_weight, dtype=np.float64)
    if want_grad:
        if grad.shape != logits.shape or grad.dtype != np.float64:
            raise ValueError("grad must be a float64 array shaped like the logit table")
    else:
        grad = np.zeros((1, 1))
    return logits, states, tokens, lengths, seq_weight, grad, want_grad


def seq_logprob(logits, states, tokens, lengths=None, seq_weight=None, grad=None, backend=None):
    """Sum of token log-probabilities per sequence."""
    fn = IMPLEMENTATIONS[backend or DEFAULT_BACKEND][0]
    lo, st, tk, ln, sw, gr, wg = _prep(logits, states, tokens, lengths, seq_weight, grad)
    return fn(lo, st, tk, ln, sw, gr, wg)


def seq_calibration(
    logits, states, tokens, flip, kind=CAL_L1, lengths=None, seq_weight=None, grad=None, backend=None
):
    """Token-averaged calibration loss per sequence.

    ``flip[n]`` selects the ``1 - surrogate`` target for sequence ``n``;
    ``kind`` is ``CAL_L1`` for the affine loss or ``CAL_BCE`` for binary
    cross-entropy against the same target.
    """
    fn = IMPLEMENTATIONS[backend or DEFAULT_BACKEND][1]
    lo, st, tk, ln, sw, gr, wg = _prep(logits, states, tokens, lengths, seq_weight, grad)
    flip = np.ascontiguousarray(np.broadcast_to(np.asarray(flip, dtype=np.bool_), (tk.shape[0],)))
    return fn(lo, st, tk, ln, flip, int(kind), sw, gr, wg)


def seq_cross_entropy(logits, states, tokens, eps=0.0, lengths=None, seq_weight=None, grad=None, backend=None):
    """Token-averaged cross-entropy against the label-smoothed target."""
    fn = IMPLEMENTATIONS[backend or DEFAULT_BACKEND][2]
    lo, st, tk, ln, sw, gr, wg = _prep(logits, states, tokens, lengths, seq_weight, grad)
    return fn(lo, st, tk, ln, float(eps), sw, gr, wg)
