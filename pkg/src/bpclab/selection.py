"""Confidence@k: sample k candidates, keep the one whose label token is most probable."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .errors import InvalidInputError
from .policy import TabularPolicy
from .synthdata import TaskSpec, marginal_final_token

REPORT_FIELDS = ("k", "temperature", "seed", "accuracy", "stderr")


@dataclass(frozen=True)
class Candidate:
    sequence: tuple
    label_confidence: float
    index: int = 0

    def __post_init__(self):
        c = float(self.label_confidence)
        if not 0.0 <= c <= 1.0:
            raise InvalidInputError("label_confidence must lie in [0, 1]")
        object.__setattr__(self, "sequence", tuple(int(t) for t in self.sequence))

    @property
    def label(self) -> int:
        return self.sequence[-1]


def confidence_at_k(candidates: Sequence[Candidate]) -> Candidate:
    """Most confident candidate; ties go to the lowest index."""
    if len(candidates) == 0:
        raise InvalidInputError("no candidates")
    return min(candidates, key=lambda c: (-c.label_confidence, c.index))


def select_index(confidences) -> int:
    """Array form of confidence_at_k (np.argmax keeps the first maximizer)."""
    c = np.asarray(confidences, dtype=np.float64)
    if c.size == 0:
        raise InvalidInputError("no candidates")
    return int(np.argmax(c))


# ---------------------------------------------------------------------------
# exact comparison against fixed rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RuleComparison:
    confidence_at_k: float
    fixed_index: np.ndarray  # expected correctness when always picking candidate i
    uniform_random: float

    @property
    def best_comparator(self) -> float:
        return float(max(self.fixed_index.max(), self.uniform_random))

    @property
    def optimal(self) -> bool:
        return self.confidence_at_k >= self.best_comparator


def bayes_optimality_check(correct_probs) -> RuleComparison:
    """Expected correctness of each rule by enumerating all 2^k correctness outcomes.

    Candidate i is correct with probability ``correct_probs[i]`` independently;
    Confidence@k uses that probability as its confidence.
    """
    p = np.asarray(correct_probs, dtype=np.float64)
    k = p.shape[0]
    if k < 1 or k > 16:
        raise InvalidInputError("need 1 <= k <= 16 candidates for enumeration")
    if np.any((p < 0) | (p > 1)):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    outcomes = np.array(list(itertools.product((0.0, 1.0), repeat=k)))  # (2^k, k)
    weight = np.prod(np.where(outcomes == 1.0, p, 1.0 - p), axis=1)
    fixed = weight @ outcomes
    conf = float(fixed[select_index(p)])  # same sum as the fixed rule it picks
    rand = float(weight @ outcomes.mean(axis=1))
    return RuleComparison(conf, fixed, rand)


# ---------------------------------------------------------------------------
# sampled evaluation on the synthetic task
# ---------------------------------------------------------------------------


def _state_probs(policy: TabularPolicy, tau: float) -> np.ndarray:
    lg = policy.logits / tau
    e = np.exp(lg - lg.max(axis=2, keepdims=True))
    return e / e.sum(axis=2, keepdims=True)


def sample_candidates(policy: TabularPolicy, spec: TaskSpec, k: int, tau: float, gen: np.random.Generator):
    """k ancestral samples per prompt at temperature tau.

    Returns ``(labels, confidences)`` of shape (P, k); confidence is the
    probability of the final token under the untempered policy, or 0 when that
    token is not an answer label (a malformed answer).
    """
    P = spec.num_prompts
    probs = _state_probs(policy, tau)
    base = _state_probs(policy, 1.0)
    prompts = np.repeat(np.arange(P), k)
    slot = np.zeros(P * k, dtype=np.int64)
    for _ in range(spec.seq_len):
        cdf = np.cumsum(probs[prompts, slot], axis=1)
        u = gen.random(P * k)[:, None] * cdf[:, -1:]
        tok = np.minimum((u >= cdf).sum(axis=1), cdf.shape[1] - 1)
        prev_slot = slot
        slot = tok + 1
    conf = np.where(tok < spec.num_options, base[prompts, prev_slot, tok], 0.0)
    return tok.reshape(P, k), conf.reshape(P, k)


@dataclass(frozen=True)
class SelectionResult:
    k: int
    temperature: float
    seed: int
    accuracy: float
    stderr: float

    def row(self) -> list:
        return [self.k, self.temperature, self.seed, self.accuracy, self.stderr]


def evaluate_selection(
    policy: TabularPolicy,
    spec: TaskSpec,
    k: int,
    temperature: float = 1.0,
    num_trials: int = 1,
    seed: int = 0,
    oracle_confidence: bool = False,
) -> SelectionResult:
    """Sampled accuracy of Confidence@k against fresh label draws.

    With ``oracle_confidence`` each candidate's confidence is replaced by
    q_x(label), the exact probability that its label is correct.
    """
    if int(k) < 1:
        raise InvalidInputError("k must be at least 1")
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    if int(num_trials) < 1:
        raise InvalidInputError("need at least one trial")
    if policy.num_prompts != spec.num_prompts or policy.vocab_size != spec.vocab_size:
        raise InvalidInputError("policy and task disagree on shape")
    q = spec.label_distributions
    P = spec.num_prompts
    hits = []
    for t in range(int(num_trials)):
        gen = rng.stream(seed, "confidence-at-k", t)
        labels, conf = sample_candidates(policy, spec, int(k), float(temperature), gen)
        if oracle_confidence:
            conf = _oracle_conf(q, labels, spec.num_options)
        pick = labels[np.arange(P), np.argmax(conf, axis=1)]
        cdf = np.cumsum(q, axis=1)
        truth = np.minimum((gen.random(P)[:, None] >= cdf).sum(axis=1), spec.num_options - 1)
        hits.append((pick == truth).astype(np.float64))
    h = np.concatenate(hits)
    stderr = float(np.std(h, ddof=1) / math.sqrt(h.size)) if h.size > 1 else 0.0
    return SelectionResult(int(k), float(temperature), int(seed), float(h.mean()), stderr)


def _oracle_conf(q: np.ndarray, labels: np.ndarray, K: int) -> np.ndarray:
    valid = labels < K
    rows = np.broadcast_to(np.arange(q.shape[0])[:, None], labels.shape)
    out = np.zeros(labels.shape)
    out[valid] = q[rows[valid], labels[valid]]
    return out


def expected_oracle_accuracy(policy: TabularPolicy, spec: TaskSpec, k: int, temperature: float = 1.0) -> float:
    """Exact expected accuracy of Confidence@k with oracle confidences.

    The selected label is correct with probability max_i q_x(label_i); its
    expectation follows from the law of the maximum of k iid draws under the
    exact last-token marginal.
    """
    if int(k) < 1:
        raise InvalidInputError("k must be at least 1")
    q = spec.label_distributions
    V = spec.vocab_size
    total = 0.0
    for p in range(spec.num_prompts):
        m = marginal_final_token(policy, p, spec.seq_len, temperature)
        val = np.zeros(V)
        val[: spec.num_options] = q[p]
        # distribution of max over k iid draws of val(token): P(max <= v) = F(v)^k
        order = np.argsort(val, kind="stable")
        v_sorted, m_sorted = val[order], m[order]
        levels, start = np.unique(v_sorted, return_index=True)
        mass = np.add.reduceat(m_sorted, start)
        cdf = np.cumsum(mass)
        prev = np.concatenate(([0.0], cdf[:-1]))
        total += float(np.sum(levels * (cdf ** int(k) - prev ** int(k))))
    return total / spec.num_prompts


def results_to_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in results:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])
    return buf.getvalue()
