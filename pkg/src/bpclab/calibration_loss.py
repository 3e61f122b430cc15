"""Margin surrogate and the per-token calibration losses.

The surrogate target is treated as a constant when differentiating (stop
gradient): gradients flow only through the confidence, i.e. the largest
probability of the row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .numerics import sigmoid, softmax

SURROGATE = "surrogate"
ONE_MINUS_SURROGATE = "one_minus_surrogate"
TARGET_MODES = (SURROGATE, ONE_MINUS_SURROGATE)
BCE_EPS = 1e-12


@dataclass(frozen=True)
class TokenContext:
    probs: np.ndarray
    truth_index: int

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.shape[0] < 2:
            raise InvalidInputError("token distribution needs at least two entries")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise InvalidInputError("probs must be a probability vector")
        if not 0 <= self.truth_index < p.shape[0]:
            raise InvalidInputError("truth_index outside the vocabulary")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_logits(cls, logits, truth_index: int) -> "TokenContext":
        return cls(softmax(logits), truth_index)

    @property
    def confidence(self) -> float:
        return float(self.probs[self.top_index])

    @property
    def top_index(self) -> int:
        return int(np.argmax(self.probs))  # argmax returns the first maximizer

    @property
    def rival_index(self) -> int:
        p = self.probs.copy()
        p[self.truth_index] = -np.inf
        return int(np.argmax(p))


@dataclass(frozen=True)
class TokenCalGrad:
    d_loss_d_confidence: float
    d_loss_d_logits: np.ndarray


def margin(ctx: TokenContext) -> float:
    """p[truth] minus the strongest competing probability."""
    return float(ctx.probs[ctx.truth_index] - ctx.probs[ctx.rival_index])


def surrogate(ctx: TokenContext) -> float:
    return sigmoid(margin(ctx))


def _check_unit(name: str, v: float) -> float:
    v = float(v)
    if not 0.0 <= v <= 1.0:
        raise InvalidInputError(f"{name}={v} outside [0, 1]")
    return v


def token_cal_loss(z_tilde: float, confidence: float) -> float:
    """z (1 - c) + (1 - z) c."""
    z = _check_unit("z_tilde", z_tilde)
    c = _check_unit("confidence", confidence)
    return z * (1.0 - c) + (1.0 - z) * c


def bce_cal_loss(z_tilde: float, confidence: float, eps: float = BCE_EPS) -> float:
    z = _check_unit("z_tilde", z_tilde)
    c = min(max(float(confidence), eps), 1.0 - eps)
    return float(-(z * np.log(c) + (1.0 - z) * np.log1p(-c)))


def _target(ctx: TokenContext, mode: str) -> float:
    if mode not in TARGET_MODES:
        raise InvalidInputError(f"unknown target mode {mode!r}")
    zt = surrogate(ctx)
    return zt if mode == SURROGATE else 1.0 - zt


def seq_cal_loss(tokens: Sequence[TokenContext], target_mode: str = SURROGATE) -> float:
    """Token-averaged calibration loss of one sequence."""
    if len(tokens) == 0:
        raise InvalidInputError("sequence must contain at least one token")
    return float(np.mean([token_cal_loss(_target(t, target_mode), t.confidence) for t in tokens]))


def token_cal_gradient(ctx: TokenContext, target: float) -> TokenCalGrad:
    """Gradient of one token's loss with the target frozen.

    dL/dc = 1 - 2 target; dc/dlogit_j = c (1[j = top] - p_j).
    """
    p = ctx.probs
    c = ctx.confidence
    dl_dc = 1.0 - 2.0 * target
    dc = -c * p
    dc[ctx.top_index] += c
    return TokenCalGrad(dl_dc, dl_dc * dc)


def cal_loss_gradient(
    tokens: Sequence[TokenContext], target_mode: str, logits: Sequence
) -> list[TokenCalGrad]:
    """Per-token gradients of the calibration loss (not divided by the length).

    ``logits[t]`` must map to ``tokens[t].probs`` through softmax.
    """
    if len(tokens) != len(logits):
        raise InvalidInputError("one logit vector per token is required")
    out = []
    for ctx, lg in zip(tokens, logits):
        lg = np.asarray(lg, dtype=np.float64)
        if lg.shape != ctx.probs.shape:
            raise InvalidInputError("logit vector and distribution differ in size")
        if np.max(np.abs(softmax(lg) - ctx.probs)) > 1e-9:
            raise InvalidInputError("probs are not softmax(logits)")
        out.append(token_cal_gradient(ctx, _target(ctx, target_mode)))
    return out


def seq_cal_loss_from_logits(logits, truth, target_mode: str = SURROGATE, frozen_targets=None) -> float:
    """seq_cal_loss as a function of a (T, V) logit array.

    With ``frozen_targets`` the per-token targets are fixed instead of being
    recomputed; this is the function whose gradient ``cal_loss_gradient``
    returns (averaged over tokens).
    """
    lg = np.asarray(logits, dtype=np.float64)
    ctxs = [TokenContext.from_logits(lg[t], int(truth[t])) for t in range(lg.shape[0])]
    if frozen_targets is None:
        return seq_cal_loss(ctxs, target_mode)
    return float(np.mean([token_cal_loss(z, c.confidence) for z, c in zip(frozen_targets, ctxs)]))


def seq_targets(logits, truth, target_mode: str = SURROGATE) -> np.ndarray:
    lg = np.asarray(logits, dtype=np.float64)
    return np.array([_target(TokenContext.from_logits(lg[t], int(truth[t])), target_mode) for t in range(lg.shape[0])])


def batch_token_cal_grad(logits, truth, flip=False):
    """Vectorized per-token quantities for many independent tokens.

    Returns ``(confidence, surrogate, target, d_loss_d_confidence,
    d_loss_d_logits)`` with the logit gradient shaped like ``logits``.
    """
    lg = np.asarray(logits, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    p = softmax(lg)
    top = p.argmax(axis=-1)
    c = np.take_along_axis(p, top[:, None], axis=-1)[:, 0]
    others = p.copy()
    np.put_along_axis(others, truth[:, None], -1.0, axis=-1)
    m = np.take_along_axis(p, truth[:, None], axis=-1)[:, 0] - others.max(axis=-1)
    zt = sigmoid(m)
    target = np.where(np.broadcast_to(flip, zt.shape), 1.0 - zt, zt)
    dl_dc = 1.0 - 2.0 * target
    dc = -c[:, None] * p
    dc[np.arange(p.shape[0]), top] += c
    return c, zt, target, dl_dc, dl_dc[:, None] * dc
