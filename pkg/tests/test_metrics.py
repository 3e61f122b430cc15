import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bpclab import metrics as m
from bpclab.errors import InvalidInputError
from bpclab.runner.experiments import random_record_batch

import oracles

FOUR = [(0.9, 1), (0.9, 0), (0.2, 0), (0.2, 0)]


def four_records(with_z=False):
    z = {0.9: 0.5, 0.2: 0.0}
    return [m.PredictionRecord(c, y, None, c, z[c] if with_z else None) for c, y in FOUR]


def test_four_record_example():
    recs = four_records(with_z=True)
    assert m.ece_binned(recs, 10) == pytest.approx(0.3, abs=1e-15)
    assert m.l1_risk(recs) == pytest.approx(0.35, abs=1e-15)
    assert m.exact_conditional_ece(recs) == pytest.approx(0.3, abs=1e-15)
    assert m.decomposition_noise_term(recs) == pytest.approx(0.05, abs=1e-15)
    assert m.l1_risk(recs) == pytest.approx(m.exact_conditional_ece(recs) + m.decomposition_noise_term(recs), abs=1e-15)
    rel = m.reliability_diagram(recs, 10)
    occupied = rel.count > 0
    assert rel.count[occupied].tolist() == [2, 2]
    assert rel.gap[occupied] == pytest.approx([0.2, 0.4])


def test_noise_term_two_record_example():
    recs = [m.PredictionRecord(0.9, 1, oracle_z=0.5), m.PredictionRecord(0.2, 0, oracle_z=0.0)]
    assert m.decomposition_noise_term(recs) == pytest.approx(0.05, abs=1e-15)


def test_trivial_cases():
    assert m.ece_binned([m.PredictionRecord(1.0, 1)]) == 0.0
    assert m.l1_risk([m.PredictionRecord(0.5, 0), m.PredictionRecord(0.5, 1)]) == 0.5
    assert m.l1_risk([m.PredictionRecord(1.0, 1), m.PredictionRecord(0.0, 0)]) == 0.0
    perfect = [m.PredictionRecord(0.5, y, group_key="a") for y in (0, 1)] + [
        m.PredictionRecord(0.75, y, group_key="b") for y in (1, 1, 1, 0)
    ]
    assert m.ece_binned(perfect) == 0.0
    assert m.exact_conditional_ece(perfect) == 0.0
    recs = [m.PredictionRecord(c, y, None, i, float(y)) for i, (c, y) in enumerate(FOUR)]
    assert m.exact_conditional_ece(recs) == pytest.approx(m.l1_risk(recs), abs=1e-15)
    assert m.decomposition_noise_term(recs) == 0.0


def test_errors():
    with pytest.raises(InvalidInputError):
        m.ece_binned([])
    with pytest.raises(InvalidInputError):
        m.l1_risk([])
    with pytest.raises(InvalidInputError):
        m.exact_conditional_ece([m.PredictionRecord(0.3, 1)])
    with pytest.raises(InvalidInputError):
        m.decomposition_noise_term([m.PredictionRecord(0.3, 1)])
    with pytest.raises(InvalidInputError):
        m.classwise_ece([m.PredictionRecord(0.3, 1, group_key=0)])
    with pytest.raises(InvalidInputError):
        m.weighted_ece([m.PredictionRecord(0.3, 1, group_key=0)], [-1.0])
    with pytest.raises(InvalidInputError):
        m.PredictionRecord(1.5, 1)
    with pytest.raises(InvalidInputError):
        m.PredictionRecord(0.5, 2)
    with pytest.raises(InvalidInputError):
        m.bin_edges(0)


def test_bin_edges_and_closed_last_bin():
    assert m.bin_index([0.0, 0.05, 0.1, 0.95, 1.0], 10).tolist() == [0, 0, 1, 9, 9]
    for M in (3, 7, 10, 20, 30):
        edges = m.bin_edges(M)
        idx = m.bin_index(edges, M)
        assert idx.tolist() == list(range(M)) + [M - 1]


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=60), st.integers(1, 25))
def test_binned_ece_matches_oracle(rows, M):
    conf = [c for c, _ in rows]
    corr = [y for _, y in rows]
    b = m.RecordBatch.from_arrays(conf, corr)
    rel = m.reliability_diagram(b, M)
    assert rel.total == len(rows)
    assert 0.0 <= rel.ece() <= 1.0
    assert rel.ece() == pytest.approx(oracles.ece_binned(conf, corr, M), abs=1e-12)
    w = rel.count / rel.total
    assert np.sum(w * rel.gap) == pytest.approx(rel.ece(), abs=1e-12)


def test_reliability_csv_round_trip():
    gen = np.random.default_rng(0)
    b = m.RecordBatch.from_arrays(gen.random(50), gen.integers(0, 2, 50))
    rel = m.reliability_diagram(b, 20)
    text = m.reliability_to_csv(rel)
    assert text.splitlines()[0] == "bin_lower,bin_upper,count,mean_confidence,accuracy,gap"
    back = m.reliability_from_csv(text)
    assert np.array_equal(back.count, rel.count)
    assert np.array_equal(back.gap, rel.gap)
    assert np.array_equal(np.isnan(back.accuracy), rel.count == 0)
    assert m.reliability_to_csv(back) == text


def test_records_csv_round_trip():
    recs = four_records(with_z=True) + [m.PredictionRecord(0.4, 1)]
    text = m.write_records_csv(recs)
    assert text.splitlines()[0] == "confidence,correct,true_class,group_key,oracle_z"
    back = m.read_records_csv(text)
    assert [r.confidence for r in back] == [r.confidence for r in recs]
    assert [r.oracle_z for r in back] == [r.oracle_z for r in recs]
    assert back[-1].group_key is None


def test_classwise_special_cases():
    gen = np.random.default_rng(1)
    g = gen.integers(0, 5, size=40)
    b = m.RecordBatch.from_arrays(gen.random(5)[g], gen.integers(0, 2, 40), np.zeros(40, int), g)
    assert m.classwise_ece(b) == pytest.approx(m.exact_conditional_ece(b), abs=1e-15)
    calibrated = [m.PredictionRecord(0.5, y, k, "g") for k in (0, 1) for y in (0, 1)]
    assert m.classwise_ece(calibrated, num_classes=2) == 0.0


def test_weighted_special_cases():
    b = random_record_batch(np.random.default_rng(2))
    ones = np.ones(len(b))
    assert m.weighted_ece(b, ones) == pytest.approx(m.exact_conditional_ece(b), abs=1e-15)
    assert m.weighted_ece(b, 0 * ones) == 0.0
    with pytest.raises(InvalidInputError):
        m.weighted_ece(b, np.arange(len(b), dtype=float))  # not constant within groups


def test_exact_ece_matches_oracle():
    gen = np.random.default_rng(3)
    for _ in range(50):
        b = random_record_batch(gen)
        assert m.exact_conditional_ece(b) == pytest.approx(
            oracles.exact_ece(b.confidence.tolist(), b.correct.tolist(), b.group.tolist()), abs=1e-13
        )


def test_jensen_chain_random_datasets():
    gen = np.random.default_rng(4)
    for _ in range(1000):
        b = random_record_batch(gen)
        exact, cw, l1 = m.exact_conditional_ece(b), m.classwise_ece(b), m.l1_risk(b)
        assert exact <= cw + 1e-12
        assert cw <= l1 + 1e-12
        assert abs(l1 - exact - m.decomposition_noise_term(b)) <= 1e-12
        w = (gen.random(int(b.group.max()) + 1) * 2)[b.group]
        assert m.weighted_ece(b, w) <= w.max() * exact + 1e-12


def test_summary_fields():
    s = m.summarize(four_records(with_z=True), 10)
    assert s.ece_binned == pytest.approx(0.3)
    assert s.exact_ece == pytest.approx(0.3)
    assert s.noise_term == pytest.approx(0.05)
    assert s.cw_ece is None
