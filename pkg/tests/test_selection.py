import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bpclab import selection as sel
from bpclab import synthdata
from bpclab.errors import InvalidInputError
from bpclab.policy import TabularPolicy
from bpclab.synthdata import TaskSpec

probs = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8)


def test_confidence_at_k_examples():
    cands = [sel.Candidate((0,), 0.4, 0), sel.Candidate((1,), 0.9, 1), sel.Candidate((2,), 0.7, 2)]
    assert sel.confidence_at_k(cands).label == 1
    tie = [sel.Candidate((0,), 0.5, 0), sel.Candidate((1,), 0.5, 1)]
    assert sel.confidence_at_k(tie).index == 0
    assert sel.confidence_at_k(tie[::-1]).index == 0
    assert sel.confidence_at_k([cands[2]]) is cands[2]
    assert sel.select_index([0.5, 0.5, 0.2]) == 0
    with pytest.raises(InvalidInputError):
        sel.confidence_at_k([])
    with pytest.raises(InvalidInputError):
        sel.select_index([])
    with pytest.raises(InvalidInputError):
        sel.Candidate((0,), 1.2)


@given(probs)
def test_selected_confidence_is_the_maximum(p):
    cands = [sel.Candidate((i,), c, i) for i, c in enumerate(p)]
    best = sel.confidence_at_k(cands)
    assert best.label_confidence == max(p)
    assert best.index == p.index(max(p))


def test_bayes_check_examples():
    r = sel.bayes_optimality_check([0.2, 0.9, 0.5])
    assert r.confidence_at_k == pytest.approx(0.9, abs=1e-15)
    assert r.best_comparator <= 0.9 + 1e-15 and r.optimal
    eq = sel.bayes_optimality_check([0.3] * 4)
    assert np.allclose(eq.fixed_index, 0.3) and eq.uniform_random == pytest.approx(0.3)
    assert eq.confidence_at_k == pytest.approx(0.3)
    with pytest.raises(InvalidInputError):
        sel.bayes_optimality_check([])
    with pytest.raises(InvalidInputError):
        sel.bayes_optimality_check([0.5, 1.5])


@given(probs)
def test_enumeration_matches_closed_form(p):
    r = sel.bayes_optimality_check(p)
    assert r.confidence_at_k == pytest.approx(max(p), abs=1e-12)
    assert np.allclose(r.fixed_index, p, atol=1e-12)
    assert r.uniform_random == pytest.approx(float(np.mean(p)), abs=1e-12)
    assert r.confidence_at_k >= r.best_comparator - 1e-12


@given(probs, probs)
def test_monotone_under_inclusion(a, extra):
    small = sel.bayes_optimality_check(a).confidence_at_k
    big = sel.bayes_optimality_check((a + extra)[:12]).confidence_at_k
    assert big >= small - 1e-12


def deterministic_spec_and_policy(ambiguity=0.0):
    spec = TaskSpec(num_prompts=5, num_options=3, stub_length=1, ambiguity=ambiguity, seed=2)
    V = spec.vocab_size
    lg = np.full((5, V + 1, V), -50.0)
    for p in range(5):
        lg[p, 0, 3] = 0.0  # START -> stub
        lg[p, 4, spec.answer_options[p]] = 0.0  # stub -> answer
    return spec, TabularPolicy(lg)


def test_deterministic_policy_accuracy_is_independent_of_k():
    spec, p = deterministic_spec_and_policy()
    for k in (1, 4, 8):
        r = sel.evaluate_selection(p, spec, k, 1.0, num_trials=3, seed=1)
        assert r.accuracy == 1.0 and r.stderr == 0.0


def test_evaluate_selection_validation():
    spec, p = deterministic_spec_and_policy()
    with pytest.raises(InvalidInputError):
        sel.evaluate_selection(p, spec, 0)
    with pytest.raises(InvalidInputError):
        sel.evaluate_selection(p, spec, 2, temperature=0.0)
    with pytest.raises(InvalidInputError):
        sel.evaluate_selection(TabularPolicy.zeros(5, 3), spec, 2)


def random_setup(seed=0, P=30):
    spec = TaskSpec(num_prompts=P, num_options=3, stub_length=1, ambiguity=0.6, seed=seed)
    V = spec.vocab_size
    return spec, TabularPolicy(np.random.default_rng(seed).normal(scale=1.5, size=(P, V + 1, V)))


def brute_force_oracle_accuracy(policy, spec, k, tau):
    V = spec.vocab_size
    total = 0.0
    for p in range(spec.num_prompts):
        m = synthdata.marginal_final_token(policy, p, spec.seq_len, tau)
        for labels in itertools.product(range(V), repeat=k):
            w = np.prod(m[list(labels)])
            total += w * max(spec.label_prob(p, t) for t in labels)
    return total / spec.num_prompts


@pytest.mark.parametrize("k,tau", [(1, 1.0), (2, 0.7), (3, 1.3)])
def test_exact_oracle_accuracy_matches_enumeration(k, tau):
    spec, p = random_setup(1, P=6)
    assert sel.expected_oracle_accuracy(p, spec, k, tau) == pytest.approx(
        brute_force_oracle_accuracy(p, spec, k, tau), abs=1e-13
    )


def test_oracle_sampled_accuracy_within_3_sigma():
    spec, p = random_setup(2)
    for k in (1, 4, 8):
        r = sel.evaluate_selection(p, spec, k, 1.0, num_trials=200, seed=5, oracle_confidence=True)
        exact = sel.expected_oracle_accuracy(p, spec, k, 1.0)
        assert abs(r.accuracy - exact) <= 3 * r.stderr


def test_k1_is_plain_sampled_accuracy():
    spec, p = random_setup(3)
    exact = np.mean(
        [synthdata.marginal_final_token(p, c, spec.seq_len) @ np.r_[spec.label_distributions[c], np.zeros(1)]
         for c in range(spec.num_prompts)]
    )
    assert sel.expected_oracle_accuracy(p, spec, 1) == pytest.approx(exact, abs=1e-14)
    r = sel.evaluate_selection(p, spec, 1, 1.0, num_trials=200, seed=6)
    assert abs(r.accuracy - exact) <= 3 * r.stderr


def test_sample_candidates_confidences():
    spec, p = random_setup(4)
    labels, conf = sel.sample_candidates(p, spec, 6, 1.0, np.random.default_rng(0))
    assert labels.shape == conf.shape == (spec.num_prompts, 6)
    assert np.all(conf[labels >= spec.num_options] == 0.0)
    assert np.all((conf >= 0) & (conf <= 1))
    # force START -> stub so every label follows the stub state; confidence is the untempered label probability
    lg = p.logits.copy()
    lg[:, 0, :] = -60.0
    lg[:, 0, spec.num_options] = 0.0
    p = TabularPolicy(lg)
    labels, conf = sel.sample_candidates(p, spec, 6, 0.5, np.random.default_rng(0))
    probs_ = np.exp(p.logits) / np.exp(p.logits).sum(axis=2, keepdims=True)
    valid = labels < spec.num_options
    rows = np.broadcast_to(np.arange(spec.num_prompts)[:, None], labels.shape)
    candidates = probs_[rows[valid], 1 + spec.num_options, labels[valid]]
    assert valid.any()
    assert np.allclose(conf[valid], candidates, atol=1e-15)


def test_sampling_frequencies_match_marginal():
    spec, p = random_setup(5, P=2)
    gen = np.random.default_rng(1)
    labels, _ = sel.sample_candidates(p, spec, 50_000, 0.8, gen)
    for c in range(2):
        m = synthdata.marginal_final_token(p, c, spec.seq_len, 0.8)
        freq = np.bincount(labels[c], minlength=spec.vocab_size) / 50_000
        assert np.all(np.abs(freq - m) <= 4 * np.sqrt(m * (1 - m) / 50_000) + 1e-12)


def test_results_csv_header():
    r = sel.SelectionResult(4, 1.0, 0, 0.5, 0.01)
    text = sel.results_to_csv([r])
    assert text.splitlines() == ["k,temperature,seed,accuracy,stderr", "4,1.0,0,0.5,0.01"]
    assert math.isfinite(r.stderr)
