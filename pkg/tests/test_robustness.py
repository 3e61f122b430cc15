import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bpclab import robustness as rb
from bpclab.errors import InvalidInputError
from bpclab.robustness import ContaminationModel


def bisect(f, lo, hi, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def tri_cdf(t, B):
    return (t + B) ** 2 / (2 * B * B) if t <= 0 else 1 - (B - t) ** 2 / (2 * B * B)


def test_model_validation():
    for bad in [dict(alpha=0.5), dict(alpha=-0.1), dict(B=0.0), dict(clean_family="cauchy"), dict(M=math.inf)]:
        with pytest.raises(InvalidInputError):
            ContaminationModel(**bad)


@pytest.mark.parametrize("family", rb.FAMILIES)
def test_clean_family_closed_forms(family):
    B = 2.0
    u = np.linspace(0, 1, 101)
    t = rb.clean_ppf(family, B, u)
    assert np.allclose(rb.clean_cdf(family, B, t), u, atol=1e-14)
    assert rb.clean_ppf(family, B, 0.5) == 0.0
    # density integrates to one and matches the cdf slope
    grid = np.linspace(-B, B, 20001)
    assert np.sum(rb.clean_pdf(family, B, grid)[:-1]) * (grid[1] - grid[0]) == pytest.approx(1.0, abs=1e-3)
    h = 1e-6
    x = np.array([-1.3, -0.2, 0.4, 1.7])
    slope = (rb.clean_cdf(family, B, x + h) - rb.clean_cdf(family, B, x - h)) / (2 * h)
    assert np.allclose(slope, rb.clean_pdf(family, B, x), atol=1e-7)


def test_analytic_biases_examples():
    mean_bias, delta = rb.analytic_biases(ContaminationModel(alpha=0.1, M=10.0, B=1.0))
    assert mean_bias == pytest.approx(1.0, abs=1e-15)
    assert delta == pytest.approx(0.1111111111, abs=1e-10)
    assert rb.analytic_biases(ContaminationModel(alpha=0.0, M=10.0)) == (0.0, 0.0)
    tri = rb.median_offset("triangular", 1.0, 0.1)
    assert tri == pytest.approx(bisect(lambda t: 0.9 * tri_cdf(t, 1.0) - 0.5, -1, 1), abs=1e-13)
    assert tri == pytest.approx(1 - math.sqrt(2 * (1 - 1 / 1.8)), abs=1e-15)
    with pytest.raises(InvalidInputError):
        rb.median_offset("uniform", 1.0, 0.5)


def test_analytic_median_is_clipped():
    m = ContaminationModel(alpha=0.1, M=0.05)
    # the point mass sits inside the clean median offset and pins the median
    assert rb.analytic_median(m) == 0.05
    assert rb.analytic_median(m.with_(M=100.0)) == pytest.approx(1 / 9)
    assert rb.analytic_median(m.with_(M=-100.0)) == pytest.approx(-1 / 9)


def test_sampling_examples():
    m = ContaminationModel(z=0.3, alpha=0.0, M=50.0, B=1.0, seed=4)
    x, K = rb.sample_surrogate(m, 10_000)
    assert K == 0 and x.min() >= -0.7 and x.max() <= 1.3
    n = 100_000
    _, K = rb.sample_surrogate(m.with_(alpha=0.4999), n)
    assert abs(K / n - 0.4999) <= math.sqrt(math.log(2 / 1e-9) / (2 * n))
    a, Ka = rb.sample_surrogate(m.with_(alpha=0.2), 1000, index=3)
    b, Kb = rb.sample_surrogate(m.with_(alpha=0.2), 1000, index=3)
    assert np.array_equal(a, b) and Ka == Kb
    c, _ = rb.sample_surrogate(m.with_(alpha=0.2), 1000, index=4)
    assert not np.array_equal(a, c)
    assert np.sum(a == 0.3 + 50.0) == Ka
    with pytest.raises(InvalidInputError):
        rb.sample_surrogate(m, 0)


def test_theorem_small_grid():
    m = ContaminationModel(alpha=0.1, B=1.0, seed=1)
    reps = rb.verify_contamination_theorem(m, [10.0, 1000.0], n=100_000, num_seeds=4)
    assert len(reps) == 8
    med = {M: np.mean([r.empirical_median for r in reps if r.M == M]) for M in (10.0, 1000.0)}
    mean = {M: np.mean([r.empirical_mean for r in reps if r.M == M]) for M in (10.0, 1000.0)}
    assert abs(med[10.0] - med[1000.0]) <= 0.05
    assert mean[1000.0] - mean[10.0] == pytest.approx(99.0, rel=0.02)
    assert rb.mean_slope(reps) == pytest.approx(0.1, rel=0.05)
    zero = rb.verify_contamination_theorem(m.with_(M=0.0), [0.0], n=100_000, num_seeds=2)
    for r in zero:
        assert abs(r.empirical_mean) < 0.02 and abs(r.empirical_median) < 0.02
    with pytest.raises(InvalidInputError):
        rb.mean_slope(zero)


def test_median_stability_and_breakdown():
    m = ContaminationModel(z=0.0, alpha=0.0, M=1e6, B=1.0, seed=2)
    n = 100_000
    x = rb.inject_outliers(m, n, int(0.3 * n))
    assert np.sum(x == 1e6) == 30_000
    assert rb.median_stable(x, int(0.3 * n), 0.0, 1.0)
    assert rb.breakdown_median(m, 10_001, 5001) == 1e6
    with pytest.raises(InvalidInputError):
        rb.median_stable(x, n // 2, 0.0, 1.0)
    with pytest.raises(InvalidInputError):
        rb.breakdown_median(m, 100, 10)
    with pytest.raises(InvalidInputError):
        rb.inject_outliers(m, 10, 11)


@given(st.integers(1, 2000), st.floats(0.0, 0.4999), st.floats(-1e9, 1e9), st.integers(0, 1000))
def test_median_stability_property(n, frac, M, seed):
    K = min(int(frac * n), (n - 1) // 2)
    m = ContaminationModel(z=0.5, alpha=0.0, M=M, B=2.0, seed=seed, clean_family="triangular")
    assert rb.median_stable(rb.inject_outliers(m, n, K), K, 0.5, 2.0)


def test_dkw_examples():
    assert rb.dkw_bound(10_000, 0.05) == pytest.approx(2 * math.exp(-2 * 1e4 * 0.0499**2), rel=1e-12)
    assert rb.dkw_bound(10_000, 0.05) == pytest.approx(4.7e-22, rel=0.05)
    with pytest.raises(InvalidInputError):
        rb.dkw_bound(10, 0.1)
    with pytest.raises(InvalidInputError):
        rb.dkw_check(ContaminationModel(), 10, 5, 0.05)
    m = ContaminationModel(alpha=0.1, M=1000.0, seed=3)
    chk = rb.dkw_check(m, 10_000, 1000, 0.05)
    assert chk.violations == 0 and chk.passed
    assert rb.dkw_check(m, 1000, 50, 0.9).violations == 0
    tight = rb.dkw_check(m.with_(alpha=0.0), 10_000, 200, 0.01)
    assert tight.passed


def test_density_floor():
    assert rb.density_floor(ContaminationModel(B=2.0)) == 0.25
    tri = ContaminationModel(B=1.0, alpha=0.1, clean_family="triangular")
    d = rb.median_offset("triangular", 1.0, 0.1)
    assert rb.density_floor(tri) == pytest.approx(1 - d)


def test_mean_band():
    m = ContaminationModel(alpha=0.1, M=100.0, seed=5)
    chk = rb.mean_band_check(m, 10_000, 100)
    assert chk.passed and chk.violations == 0
    with pytest.raises(InvalidInputError):
        rb.mean_band_check(m, 100, 10, tau=0.0)


def test_risk_minimizer_examples():
    r = rb.pointwise_risk_minimizers(0.7, 1e-3, z_tilde=0.63)
    assert abs(r.argmin_l2 - 0.7) <= 1e-3
    assert r.argmin_l1.tolist() == [1.0]
    assert abs(r.argmin_surrogate - 0.63) <= 1e-3
    half = rb.pointwise_risk_minimizers(0.5)
    assert half.argmin_l1.shape[0] == half.grid.shape[0]
    with pytest.raises(InvalidInputError):
        rb.pointwise_risk_minimizers(0.5, grid=[])
    with pytest.raises(InvalidInputError):
        rb.pointwise_risk_minimizers(1.5)


@pytest.mark.parametrize("z", [0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9])
def test_l1_minimizer_collapses(z):
    r = rb.pointwise_risk_minimizers(z)
    assert r.argmin_l1.tolist() == [1.0 if z > 0.5 else 0.0]
    assert abs(r.argmin_l2 - z) <= 1e-3


def test_report_csv():
    m = ContaminationModel(alpha=0.1, M=10.0)
    reps = rb.verify_contamination_theorem(m, [10.0], n=1000, num_seeds=2)
    text = rb.reports_to_csv(reps)
    assert text.splitlines()[0] == "alpha,M,B,family,n,seed,empirical_mean,empirical_median,analytic_mean,analytic_median,K"
    assert len(text.splitlines()) == 3
    assert '"K"' in rb.reports_to_json(reps)
