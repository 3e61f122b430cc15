"""Minibatch (sub)gradient training of a tabular policy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels, rng
from .errors import DivergenceError, InvalidInputError
from .numerics import sigmoid, softplus
from .policy import TabularPolicy, TrainConfig, apply_gradient_step

log = logging.getLogger(__name__)


@dataclass
class SequenceBatch:
    """Equal-length sequences with their precomputed state indices."""

    context: np.ndarray
    tokens: np.ndarray
    states: np.ndarray

    @classmethod
    def build(cls, policy: TabularPolicy, examples: Sequence) -> "SequenceBatch":
        if len(examples) == 0:
            raise InvalidInputError("no training examples")
        ctx = np.array([e[0] for e in examples], dtype=np.int64)
        tok = np.array([e[1] for e in examples], dtype=np.int64)
        return cls(ctx, tok, policy.sequence_states(ctx, tok))

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def take(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.context[idx], self.tokens[idx], self.states[idx])


@dataclass
class PairBatch:
    chosen: SequenceBatch
    rejected: SequenceBatch
    ref_chosen: np.ndarray
    ref_rejected: np.ndarray

    @classmethod
    def build(cls, policy: TabularPolicy, reference: TabularPolicy, pairs: Sequence) -> "PairBatch":
        ch = SequenceBatch.build(policy, [(p.context_id, p.preferred) for p in pairs])
        rj = SequenceBatch.build(policy, [(p.context_id, p.dispreferred) for p in pairs])
        ref_c = kernels.seq_logprob(reference.flat, ch.states, ch.tokens)
        ref_r = kernels.seq_logprob(reference.flat, rj.states, rj.tokens)
        return cls(ch, rj, ref_c, ref_r)

    def __len__(self) -> int:
        return len(self.chosen)

    def take(self, idx) -> "PairBatch":
        return PairBatch(self.chosen.take(idx), self.rejected.take(idx), self.ref_chosen[idx], self.ref_rejected[idx])


def sft_objective(table: np.ndarray, batch: SequenceBatch, eps: float, grad: np.ndarray | None = None) -> float:
    """Mean smoothed cross-entropy over the batch; gradient of the mean into ``grad``."""
    n = len(batch)
    w = np.full(n, 1.0 / n)
    losses = kernels.seq_cross_entropy(table, batch.states, batch.tokens, eps, seq_weight=w, grad=grad)
    return float(np.mean(losses))


def dpo_margins(table: np.ndarray, batch: PairBatch, beta: float) -> np.ndarray:
    lc = kernels.seq_logprob(table, batch.chosen.states, batch.chosen.tokens)
    lr = kernels.seq_logprob(table, batch.rejected.states, batch.rejected.tokens)
    return beta * ((lc - batch.ref_chosen) - (lr - batch.ref_rejected))


def pair_objective(
    table: np.ndarray,
    batch: PairBatch,
    beta: float,
    lam: float = 0.0,
    cal_kind: int = kernels.CAL_L1,
    grad: np.ndarray | None = None,
) -> float:
    """Mean of DPO + lam * (cal(y+, surrogate) + cal(y-, 1 - surrogate)) over the batch."""
    n = len(batch)
    with np.errstate(over="ignore", invalid="ignore"):
        delta = dpo_margins(table, batch, beta)
    if not np.all(np.isfinite(delta)):
        raise DivergenceError("non-finite DPO margin")
    loss = float(np.mean(softplus(-delta)))
    if grad is not None:
        w = -sigmoid(-delta) * beta / n
        kernels.seq_logprob(table, batch.chosen.states, batch.chosen.tokens, seq_weight=w, grad=grad)
        kernels.seq_logprob(table, batch.rejected.states, batch.rejected.tokens, seq_weight=-w, grad=grad)
    if lam > 0:
        wc = np.full(n, lam / n)
        cal_c = kernels.seq_calibration(
            table, batch.chosen.states, batch.chosen.tokens, False, cal_kind, seq_weight=wc, grad=grad
        )
        cal_r = kernels.seq_calibration(
            table, batch.rejected.states, batch.rejected.tokens, True, cal_kind, seq_weight=wc, grad=grad
        )
        loss += lam * float(np.mean(cal_c + cal_r))
    return loss


@dataclass
class TrainResult:
    policy: TabularPolicy
    losses: list = field(default_factory=list)  # mean training loss per epoch
    scores: list = field(default_factory=list)  # selection score per epoch (lower is better)
    delta_min: list = field(default_factory=list)  # min DPO margin over the training pairs, per epoch
    best_epoch: int = -1
    steps: int = 0


def train(
    policy: TabularPolicy,
    config: TrainConfig,
    sft_examples: Sequence | None = None,
    pairs: Sequence | None = None,
    reference: TabularPolicy | None = None,
    select: Callable[[TabularPolicy], float] | None = None,
    stream_tag: str = "train",
) -> TrainResult:
    """Run ``config.epochs`` epochs of shuffled minibatch descent.

    When ``select`` is given it scores the policy after every epoch and the
    lowest-scoring epoch's parameters are returned (first epoch wins ties).
    """
    obj = config.objective
    if obj in ("sft", "sft_label_smooth"):
        if not sft_examples:
            raise InvalidInputError("SFT objectives need examples")
        data = SequenceBatch.build(policy, sft_examples)
        eps = config.epsilon_smooth if obj == "sft_label_smooth" else 0.0

        def objective(table, idx, grad):
            return sft_objective(table, data.take(idx), eps, grad)

    else:
        if not pairs or reference is None:
            raise InvalidInputError("preference objectives need pairs and a reference policy")
        data = PairBatch.build(policy, reference, pairs)
        lam = 0.0 if obj == "dpo" else config.lam
        kind = kernels.CAL_BCE if obj == "dpo_bce" else kernels.CAL_L1

        def objective(table, idx, grad):
            return pair_objective(table, data.take(idx), config.beta, lam, kind, grad)

    gen = rng.stream(config.seed, stream_tag)
    n = len(data)
    current = policy.copy()
    result = TrainResult(current)
    best_score = np.inf
    k = 0
    for epoch in range(config.epochs):
        order = gen.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            grad = np.zeros_like(current.flat)
            loss = objective(current.flat, idx, grad)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}, step {k + 1}")
            k += 1
            try:
                current = apply_gradient_step(current, grad, k, config.schedule, config.eta)
            except InvalidInputError as exc:
                raise DivergenceError(f"parameters left the finite range at epoch {epoch}, step {k}") from exc
            epoch_loss += loss * len(idx)
        result.losses.append(epoch_loss / n)
        if isinstance(data, PairBatch):
            result.delta_min.append(float(np.min(dpo_margins(current.flat, data, config.beta))))
        if select is not None:
            score = float(select(current))
            result.scores.append(score)
            if score < best_score:
                best_score = score
                result.policy = current
                result.best_epoch = epoch
        log.debug("%s epoch %d loss %.6f", obj, epoch, result.losses[-1])
    result.steps = k
    if select is None:
        result.policy = current
        result.best_epoch = config.epochs - 1
    return result
