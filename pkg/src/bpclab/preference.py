"""DPO, the joint DPO + calibration objective, and the ordering-stability bound."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import InvalidInputError
from .numerics import sigmoid, softmax, softplus
from .policy import TabularPolicy

DEFAULT_BETA = 0.1
DEFAULT_LAMBDA = 0.1

CAL_KINDS = {"l1": kernels.CAL_L1, "bce": kernels.CAL_BCE}


@dataclass(frozen=True)
class PreferencePair:
    context_id: int
    preferred: tuple
    dispreferred: tuple

    def __post_init__(self):
        object.__setattr__(self, "preferred", tuple(int(t) for t in self.preferred))
        object.__setattr__(self, "dispreferred", tuple(int(t) for t in self.dispreferred))
        if not self.preferred or not self.dispreferred:
            raise InvalidInputError("preference sequences must be nonempty")
        if self.preferred == self.dispreferred:
            raise InvalidInputError("preferred and dispreferred sequences are identical")


@dataclass(frozen=True)
class PreferenceScore:
    r_plus: float
    r_minus: float
    beta: float

    @property
    def dpo_margin(self) -> float:
        return self.r_plus - self.r_minus


def _arrays(policy: TabularPolicy, context_id, sequence):
    tok = np.asarray(sequence, dtype=np.int64)[None, :]
    return policy.sequence_states([context_id], tok), tok


def seq_logprob(policy: TabularPolicy, context_id, sequence, grad=None, weight: float = 1.0) -> float:
    """sum_t log pi(y_t | state_t); optionally accumulates ``weight * d/dlogits``."""
    st, tok = _arrays(policy, context_id, sequence)
    g = None if grad is None else grad.reshape(-1, policy.vocab_size)
    return float(kernels.seq_logprob(policy.flat, st, tok, seq_weight=np.array([weight]), grad=g)[0])


def preference_score(policy, reference, pair: PreferencePair, beta: float = DEFAULT_BETA) -> PreferenceScore:
    if not beta > 0:
        raise InvalidInputError("beta must be positive")
    rp = beta * (seq_logprob(policy, pair.context_id, pair.preferred) - seq_logprob(reference, pair.context_id, pair.preferred))
    rm = beta * (
        seq_logprob(policy, pair.context_id, pair.dispreferred) - seq_logprob(reference, pair.context_id, pair.dispreferred)
    )
    return PreferenceScore(rp, rm, beta)


def dpo_loss(policy, reference, pair: PreferencePair, beta: float = DEFAULT_BETA, grad=None) -> float:
    """-log sigmoid(r+ - r-); gradient w.r.t. the policy table added into ``grad``."""
    score = preference_score(policy, reference, pair, beta)
    delta = score.dpo_margin
    if grad is not None:
        w = -sigmoid(-delta) * beta
        seq_logprob(policy, pair.context_id, pair.preferred, grad, w)
        seq_logprob(policy, pair.context_id, pair.dispreferred, grad, -w)
    return softplus(-delta)


def _cal_term(policy, context_id, sequence, flip: bool, kind: int, grad, weight: float) -> float:
    st, tok = _arrays(policy, context_id, sequence)
    g = None if grad is None else grad.reshape(-1, policy.vocab_size)
    return float(kernels.seq_calibration(policy.flat, st, tok, [flip], kind, seq_weight=np.array([weight]), grad=g)[0])


def calibration_terms(policy, pair: PreferencePair, kind: str = "l1", grad=None, weight: float = 1.0) -> float:
    """Calibration loss of y+ (surrogate target) plus y- (one-minus-surrogate target)."""
    k = CAL_KINDS[kind]
    return _cal_term(policy, pair.context_id, pair.preferred, False, k, grad, weight) + _cal_term(
        policy, pair.context_id, pair.dispreferred, True, k, grad, weight
    )


def joint_loss(
    policy, reference, pair: PreferencePair, beta: float = DEFAULT_BETA, lam: float = DEFAULT_LAMBDA, grad=None, kind: str = "l1"
) -> float:
    """DPO loss + lam * (calibration on y+ + calibration on y-).

    ``kind="bce"`` swaps the per-token loss for binary cross-entropy against the
    same targets.
    """
    if lam < 0:
        raise InvalidInputError("lambda must be nonnegative")
    loss = dpo_loss(policy, reference, pair, beta, grad)
    if lam == 0:
        return loss
    return loss + lam * calibration_terms(policy, pair, kind, grad, lam)


def lambda_bound(delta_min: float, seq_len: int) -> float:
    """2 * delta_min / |y|: the largest calibration weight that cannot flip a margin."""
    if not delta_min > 0:
        raise InvalidInputError("delta_min must be positive")
    if int(seq_len) < 1:
        raise InvalidInputError("sequence length must be positive")
    return 2.0 * delta_min / int(seq_len)


def sequence_cal_logprob_gradient(policy: TabularPolicy, context_id, sequence, flip: bool) -> float:
    """Summed per-token derivative of the calibration loss w.r.t. each token's log-probability.

    Token t contributes (1 - 2 target_t) * d c_t / d logit(y_t), where
    d c / d logit(y) = c (1[y = top] - p_y); each term is bounded by c (1 - c).
    """
    st, tok = _arrays(policy, context_id, sequence)
    p = softmax(policy.flat[st[0]])
    y = tok[0]
    rows = np.arange(y.shape[0])
    top = p.argmax(axis=1)
    c = p[rows, top]
    others = p.copy()
    others[rows, y] = -1.0
    zt = sigmoid(p[rows, y] - others.max(axis=1))
    target = 1.0 - zt if flip else zt
    dc = c * ((y == top).astype(np.float64) - p[rows, y])
    return float(np.sum((1.0 - 2.0 * target) * dc))


def cal_margin_perturbation(policy: TabularPolicy, pair: PreferencePair, lam: float = DEFAULT_LAMBDA) -> float:
    """lam * |dL/dlog pi(y+) - dL/dlog pi(y-)|, to be compared with 2 lam |y| / 4."""
    if lam < 0:
        raise InvalidInputError("lambda must be nonnegative")
    gp = sequence_cal_logprob_gradient(policy, pair.context_id, pair.preferred, False)
    gm = sequence_cal_logprob_gradient(policy, pair.context_id, pair.dispreferred, True)
    return lam * abs(gp - gm)


def perturbation_bound(lam: float, seq_len: int) -> float:
    return 2.0 * lam * (seq_len / 4.0)


def dpo_margins(policy, reference, pairs: Sequence[PreferencePair], beta: float = DEFAULT_BETA) -> np.ndarray:
    return np.array([preference_score(policy, reference, p, beta).dpo_margin for p in pairs])
