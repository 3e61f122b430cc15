"""Prompt-conditioned bigram policy over a small vocabulary.

A state is ``(prompt_id, previous token)`` with a distinguished START slot for
the first position. The logit table has shape ``(P, V + 1, V)``; slot 0 along
the middle axis is START and slot ``v + 1`` follows token ``v``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InvalidInputError
from .numerics import softmax

START = "START"
OBJECTIVES = ("sft", "sft_label_smooth", "dpo", "dpo_bce", "dpo_bpc")
SCHEDULES = ("constant", "diminishing")


class TabularPolicy:
    def __init__(self, logits: np.ndarray):
        logits = np.array(logits, dtype=np.float64)
        if logits.ndim != 3 or logits.shape[1] != logits.shape[2] + 1 or logits.shape[2] < 2:
            raise InvalidInputError("logit table must have shape (P, V + 1, V) with V >= 2")
        if not np.all(np.isfinite(logits)):
            raise InvalidInputError("logits must be finite")
        self.logits = logits

    @classmethod
    def zeros(cls, num_prompts: int, vocab_size: int) -> "TabularPolicy":
        return cls(np.zeros((num_prompts, vocab_size + 1, vocab_size)))

    @property
    def num_prompts(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[2]

    @property
    def flat(self) -> np.ndarray:
        """View of the table as ``(num_states, V)`` rows."""
        return self.logits.reshape(-1, self.vocab_size)

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.logits.copy())

    def scaled(self, tau: float) -> "TabularPolicy":
        if not tau > 0:
            raise InvalidInputError("temperature must be positive")
        return TabularPolicy(self.logits / tau)

    def __eq__(self, other) -> bool:
        return isinstance(other, TabularPolicy) and np.array_equal(self.logits, other.logits)

    # states -----------------------------------------------------------------

    def _check_prompt(self, context_id) -> int:
        c = int(context_id)
        if not 0 <= c < self.num_prompts:
            raise InvalidInputError(f"unknown context {context_id}")
        return c

    def state_index(self, context_id: int, prev_token) -> int:
        c = self._check_prompt(context_id)
        if prev_token is None or prev_token == START:
            slot = 0
        else:
            t = int(prev_token)
            if not 0 <= t < self.vocab_size:
                raise InvalidInputError(f"unknown token {prev_token}")
            slot = t + 1
        return c * (self.vocab_size + 1) + slot

    def sequence_states(self, context_ids, tokens) -> np.ndarray:
        """State index of every position of a batch of equal-length sequences."""
        ctx = np.asarray(context_ids, dtype=np.int64).reshape(-1)
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.ndim == 1:
            tok = tok[None, :]
        if tok.shape[0] != ctx.shape[0]:
            raise InvalidInputError("one context per sequence is required")
        if np.any((ctx < 0) | (ctx >= self.num_prompts)):
            raise InvalidInputError("unknown context id")
        if np.any((tok < 0) | (tok >= self.vocab_size)):
            raise InvalidInputError("token outside the vocabulary")
        prev = np.zeros_like(tok)
        prev[:, 1:] = tok[:, :-1] + 1
        return ctx[:, None] * (self.vocab_size + 1) + prev

    def state_of(self, state) -> int:
        if isinstance(state, (int, np.integer)):
            s = int(state)
            if not 0 <= s < self.flat.shape[0]:
                raise InvalidInputError(f"unknown state {state}")
            return s
        context_id, prev = state
        return self.state_index(context_id, prev)


def next_token_dist(policy: TabularPolicy, state) -> np.ndarray:
    """Softmax of the state's logits; ``state`` is a flat index or (prompt, prev)."""
    return softmax(policy.flat[policy.state_of(state)])


def smoothed_target(true_index: int, vocab_size: int, eps: float) -> np.ndarray:
    """(1 - eps) one_hot + eps / K."""
    if not 0.0 <= eps < 1.0:
        raise InvalidInputError("smoothing must lie in [0, 1)")
    t = np.full(vocab_size, eps / vocab_size)
    t[true_index] += 1.0 - eps
    return t


def sft_loss(policy: TabularPolicy, context_id, target_sequence, epsilon_smooth: float = 0.0, grad=None) -> float:
    """Token-averaged cross-entropy against the smoothed one-hot target."""
    if not 0.0 <= epsilon_smooth < 1.0:
        raise InvalidInputError("smoothing must lie in [0, 1)")
    tok = np.asarray(target_sequence, dtype=np.int64)[None, :]
    if tok.shape[1] == 0:
        raise InvalidInputError("target sequence is empty")
    st = policy.sequence_states([context_id], tok)
    g = None if grad is None else grad.reshape(-1, policy.vocab_size)
    return float(kernels.seq_cross_entropy(policy.flat, st, tok, epsilon_smooth, grad=g)[0])


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "sft"
    beta: float = 0.1
    lam: float = 0.1
    epsilon_smooth: float = 0.0
    schedule: str = "constant"
    eta: float = 1.0
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise InvalidInputError(f"unknown objective {self.objective!r}")
        if self.schedule not in SCHEDULES:
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")
        if not self.eta > 0:
            raise InvalidInputError("step size must be positive")
        if not self.beta > 0:
            raise InvalidInputError("beta must be positive")
        if self.lam < 0:
            raise InvalidInputError("lambda must be nonnegative")
        if not 0.0 <= self.epsilon_smooth < 1.0:
            raise InvalidInputError("smoothing must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def step_size(schedule: str, eta: float, k: int) -> float:
    """eta for ``constant``; eta / sqrt(k) for ``diminishing`` (k counts from 1)."""
    if k < 1:
        raise InvalidInputError("step index counts from 1")
    if schedule == "constant":
        return eta
    if schedule == "diminishing":
        return eta / math.sqrt(k)
    raise InvalidInputError(f"unknown schedule {schedule!r}")


def apply_gradient_step(
    policy: TabularPolicy, gradient, k: int, schedule: str = "constant", eta: float = 1.0
) -> TabularPolicy:
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != policy.logits.shape:
        if g.shape == policy.flat.shape:
            g = g.reshape(policy.logits.shape)
        else:
            raise InvalidInputError(f"gradient shape {g.shape} does not match {policy.logits.shape}")
    return TabularPolicy(policy.logits - step_size(schedule, eta, k) * g)


# ---------------------------------------------------------------------------
# temperature scaling
# ---------------------------------------------------------------------------

DEFAULT_TAU_GRID = tuple(float(t) for t in np.geomspace(0.25, 8.0, 25))


def sequence_nll(policy: TabularPolicy, context_ids, sequences, final_token_only: bool = False) -> float:
    """Mean per-token negative log-likelihood over a batch of sequences."""
    tok = np.asarray(sequences, dtype=np.int64)
    st = policy.sequence_states(context_ids, tok)
    if final_token_only:
        st, tok = st[:, -1:], tok[:, -1:]
    return float(np.mean(kernels.seq_cross_entropy(policy.flat, st, tok, 0.0)))


def temperature_scale(
    policy: TabularPolicy, validation_records, tau_grid=DEFAULT_TAU_GRID, final_token_only: bool = True
) -> float:
    """Grid temperature minimizing validation NLL; exact ties go to the tau nearest 1.

    ``validation_records`` is a sequence of ``(context_id, token_sequence)``.
    By default only the final (label) token is scored, since that is the token
    whose probability is reported as confidence.
    """
    grid = [float(t) for t in tau_grid]
    if not grid:
        raise InvalidInputError("temperature grid is empty")
    if any(not t > 0 for t in grid):
        raise InvalidInputError("temperatures must be positive")
    if len(validation_records) == 0:
        raise InvalidInputError("validation set is empty")
    ctx = [r[0] for r in validation_records]
    seqs = np.array([r[1] for r in validation_records], dtype=np.int64)
    best_tau, best_nll = None, math.inf
    for tau in grid:
        nll = sequence_nll(policy.scaled(tau), ctx, seqs, final_token_only)
        if nll < best_nll or (nll == best_nll and abs(tau - 1.0) < abs(best_tau - 1.0)):
            best_tau, best_nll = tau, nll
    return best_tau


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_to_csv(policy: TabularPolicy) -> str:
    V = policy.vocab_size
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["prompt_id", "prev_token"] + [f"logit_{j}" for j in range(V)])
    for p in range(policy.num_prompts):
        for slot in range(V + 1):
            prev = START if slot == 0 else str(slot - 1)
            w.writerow([p, prev] + ["%.17g" % x for x in policy.logits[p, slot]])
    return buf.getvalue()


def checkpoint_from_csv(text: str) -> TabularPolicy:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if header[:2] != ["prompt_id", "prev_token"]:
        raise InvalidInputError("not a checkpoint file")
    V = len(header) - 2
    P = max(int(r[0]) for r in body) + 1
    table = np.full((P, V + 1, V), np.nan)
    for r in body:
        slot = 0 if r[1] == START else int(r[1]) + 1
        table[int(r[0]), slot] = [float(x) for x in r[2:]]
    if np.isnan(table).any():
        raise InvalidInputError("checkpoint is missing states")
    return TabularPolicy(table)


def save_checkpoint(policy: TabularPolicy, path: str | Path) -> None:
    from .runner.io import atomic_write_text

    atomic_write_text(Path(path), checkpoint_to_csv(policy))


def load_checkpoint(path: str | Path) -> TabularPolicy:
    return checkpoint_from_csv(Path(path).read_text())
