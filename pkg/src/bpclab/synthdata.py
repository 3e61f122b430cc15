"""Synthetic multiple-choice tasks with a known correctness oracle.

Token layout: ids ``0 .. K-1`` are answer labels; after them each stub position
owns its own block of ``stub_pool_size`` semantically empty stub tokens. Every
sequence is ``stub_length`` stub tokens followed by one label token; only the
final label token carries correctness. Separate per-position pools keep the
bigram state after the last stub unique to the label position.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import rng
from .errors import InvalidInputError
from .policy import TabularPolicy
from .preference import PreferencePair

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class TaskSpec:
    num_prompts: int = 200
    num_options: int = 4
    stub_length: int = 3
    ambiguity: float = 0.35
    seed: int = 0
    stub_pool_size: int = 1
    sft_per_prompt: int = 10
    pairs_per_prompt: int = 4
    split_fractions: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.num_prompts < 1:
            raise InvalidInputError("num_prompts must be positive")
        if self.num_options < 2:
            raise InvalidInputError("need at least two options")
        if self.stub_length < 0:
            raise InvalidInputError("stub_length must be nonnegative")
        if self.stub_pool_size < 1:
            raise InvalidInputError("stub_pool_size must be positive")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise InvalidInputError("ambiguity must lie in [0, 1]")
        fr = tuple(float(f) for f in self.split_fractions)
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise InvalidInputError("split fractions must be three nonnegative numbers summing to 1")
        object.__setattr__(self, "split_fractions", fr)
        if self.sft_per_prompt < 1:
            raise InvalidInputError("need at least one SFT example per prompt")
        if self.pairs_per_prompt < 2:
            raise InvalidInputError("need at least two preference pairs per prompt")

    @property
    def vocab_size(self) -> int:
        return self.num_options + self.stub_length * self.stub_pool_size

    @property
    def seq_len(self) -> int:
        return self.stub_length + 1

    @property
    def stub_tokens(self) -> np.ndarray:
        return np.arange(self.num_options, self.vocab_size)

    @cached_property
    def answer_options(self) -> np.ndarray:
        """Index of the most likely option per prompt, randomized."""
        return rng.stream(self.seed, "answer-options").integers(0, self.num_options, size=self.num_prompts)

    @cached_property
    def label_distributions(self) -> np.ndarray:
        """q_x = (1 - a) one_hot(answer) + a / K, shape (P, K)."""
        q = np.full((self.num_prompts, self.num_options), self.ambiguity / self.num_options)
        q[np.arange(self.num_prompts), self.answer_options] += 1.0 - self.ambiguity
        return q

    def label_prob(self, context_id: int, token: int) -> float:
        """q_x(token); zero for anything that is not an answer label."""
        if not 0 <= int(context_id) < self.num_prompts:
            raise InvalidInputError(f"unknown prompt {context_id}")
        if 0 <= int(token) < self.num_options:
            return float(self.label_distributions[int(context_id), int(token)])
        return 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise InvalidInputError(f"unknown task_spec keys {sorted(unknown)}")
        d = dict(d)
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


@dataclass
class GeneratedDataset:
    spec: TaskSpec
    sft: list  # (context_id, tuple of tokens)
    pairs: list  # PreferencePair
    sft_splits: list
    pair_splits: list

    def sft_split(self, split: str) -> list:
        return [ex for ex, s in zip(self.sft, self.sft_splits) if s == split]

    def pair_split(self, split: str) -> list:
        return [pr for pr, s in zip(self.pairs, self.pair_splits) if s == split]

    def to_json(self) -> str:
        doc = {
            "spec": self.spec.to_dict(),
            "sft": [{"context_id": int(c), "tokens": [int(t) for t in seq]} for c, seq in self.sft],
            "pairs": [
                {"context_id": p.context_id, "preferred": list(p.preferred), "dispreferred": list(p.dispreferred)}
                for p in self.pairs
            ],
            "splits": {"sft": list(self.sft_splits), "pairs": list(self.pair_splits)},
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GeneratedDataset":
        doc = json.loads(text)
        spec = TaskSpec.from_dict(doc["spec"])
        sft = [(int(e["context_id"]), tuple(e["tokens"])) for e in doc["sft"]]
        pairs = [PreferencePair(e["context_id"], e["preferred"], e["dispreferred"]) for e in doc["pairs"]]
        return cls(spec, sft, pairs, list(doc["splits"]["sft"]), list(doc["splits"]["pairs"]))

    def save(self, path: str | Path) -> None:
        from .runner.io import atomic_write_text

        atomic_write_text(Path(path), self.to_json())


def _stubs(spec: TaskSpec, gen: np.random.Generator, n: int) -> np.ndarray:
    offsets = spec.num_options + spec.stub_pool_size * np.arange(spec.stub_length)
    return offsets + gen.integers(0, spec.stub_pool_size, size=(n, spec.stub_length))


def _split_tags(spec: TaskSpec, gen: np.random.Generator, n: int) -> list:
    """Per-prompt tag assignment; shuffled so tag order carries no signal."""
    counts = np.floor(np.array(spec.split_fractions) * n).astype(int)
    counts[0] += n - counts.sum()
    tags = np.repeat(np.arange(3), counts)
    gen.shuffle(tags)
    return [SPLITS[t] for t in tags]


def build_preference_pairs(spec: TaskSpec, samples_per_prompt: int | None = None) -> list:
    """Chosen ends in the prompt's most likely option, rejected in a uniform other option."""
    if spec.num_options < 2:
        raise InvalidInputError("need at least two options")
    n = spec.pairs_per_prompt if samples_per_prompt is None else int(samples_per_prompt)
    if n < 2:
        raise InvalidInputError("samples_per_prompt must be at least 2")
    gen = rng.stream(spec.seed, "preference-pairs")
    K = spec.num_options
    pairs = []
    for p in range(spec.num_prompts):
        answer = int(spec.answer_options[p])
        stub_c = _stubs(spec, gen, n)
        stub_r = _stubs(spec, gen, n)
        offsets = gen.integers(1, K, size=n)
        for i in range(n):
            rejected = (answer + int(offsets[i])) % K
            pairs.append(
                PreferencePair(p, tuple(stub_c[i].tolist()) + (answer,), tuple(stub_r[i].tolist()) + (rejected,))
            )
    return pairs


def generate_tasks(spec: TaskSpec) -> GeneratedDataset:
    gen = rng.stream(spec.seed, "sft-samples")
    split_gen = rng.stream(spec.seed, "splits")
    q = spec.label_distributions
    sft, sft_tags = [], []
    for p in range(spec.num_prompts):
        stubs = _stubs(spec, gen, spec.sft_per_prompt)
        labels = gen.choice(spec.num_options, size=spec.sft_per_prompt, p=q[p])
        for i in range(spec.sft_per_prompt):
            sft.append((p, tuple(stubs[i].tolist()) + (int(labels[i]),)))
        sft_tags.extend(_split_tags(spec, split_gen, spec.sft_per_prompt))
    pairs = build_preference_pairs(spec)
    per = spec.pairs_per_prompt
    pair_tags = []
    for _ in range(spec.num_prompts):
        pair_tags.extend(_split_tags(spec, split_gen, per))
    return GeneratedDataset(spec, sft, pairs, sft_tags, pair_tags)


# ---------------------------------------------------------------------------
# decoding and oracle quantities
# ---------------------------------------------------------------------------


def greedy_sequence(policy: TabularPolicy, context_id: int, seq_len: int) -> tuple:
    toks = []
    prev = None
    for _ in range(seq_len):
        row = policy.flat[policy.state_index(context_id, prev)]
        prev = int(np.argmax(row))
        toks.append(prev)
    return tuple(toks)


def greedy_predictions(policy: TabularPolicy, spec: TaskSpec):
    """Greedy label token and its probability (the confidence) per prompt."""
    P, V = policy.num_prompts, policy.vocab_size
    table = policy.logits
    prev_slot = np.zeros(P, dtype=np.int64)
    rows = np.arange(P)
    for _ in range(spec.seq_len):
        lg = table[rows, prev_slot]
        tok = lg.argmax(axis=1)
        prev_slot = tok + 1
    e = np.exp(lg - lg.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    conf = probs[rows, tok]
    return tok, conf


def oracle_z(policy: TabularPolicy, context_id: int, spec: TaskSpec) -> float:
    """Probability that the greedy label matches a fresh label draw."""
    if not 0 <= int(context_id) < spec.num_prompts or int(context_id) >= policy.num_prompts:
        raise InvalidInputError(f"unknown prompt {context_id}")
    seq = greedy_sequence(policy, int(context_id), spec.seq_len)
    return spec.label_prob(int(context_id), seq[-1])


def oracle_correctness(spec: TaskSpec, tokens: np.ndarray) -> np.ndarray:
    """q_x(token) per prompt for a vector of final tokens (zero for non-labels)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    valid = tokens < spec.num_options
    z = np.zeros(tokens.shape[0])
    idx = np.nonzero(valid)[0]
    z[idx] = spec.label_distributions[idx, tokens[idx]]
    return z


def marginal_final_token(policy: TabularPolicy, context_id: int, seq_len: int, tau: float = 1.0) -> np.ndarray:
    """Exact distribution of the last token under ancestral sampling at temperature tau."""
    V = policy.vocab_size
    table = policy.logits[int(context_id)] / tau
    e = np.exp(table - table.max(axis=1, keepdims=True))
    P = e / e.sum(axis=1, keepdims=True)  # (V + 1, V)
    dist = P[0]
    for _ in range(seq_len - 1):
        dist = dist @ P[1:]
    return dist
