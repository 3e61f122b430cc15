"""Mean versus median under point-mass contamination.

Draws follow ``(1 - alpha) F0(. - z) + alpha delta_{z + M}`` where the clean
noise F0 is uniform or triangular on [-B, B], both symmetric about zero.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import rng
from .errors import InvalidInputError

FAMILIES = ("uniform", "triangular")
REPORT_FIELDS = (
    "alpha",
    "M",
    "B",
    "family",
    "n",
    "seed",
    "empirical_mean",
    "empirical_median",
    "analytic_mean",
    "analytic_median",
    "K",
)


# ---------------------------------------------------------------------------
# clean noise families
# ---------------------------------------------------------------------------


def clean_cdf(family: str, B: float, t):
    t = np.clip(np.asarray(t, dtype=np.float64), -B, B)
    if family == "uniform":
        return (t + B) / (2 * B)
    if family == "triangular":
        return np.where(t <= 0, (t + B) ** 2 / (2 * B * B), 1 - (B - t) ** 2 / (2 * B * B))
    raise InvalidInputError(f"unknown clean family {family!r}")


def clean_ppf(family: str, B: float, u):
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u > 1)):
        raise InvalidInputError("quantile level outside [0, 1]")
    if family == "uniform":
        return B * (2 * u - 1)
    if family == "triangular":
        lo = B * (np.sqrt(2 * np.minimum(u, 0.5)) - 1)
        hi = B * (1 - np.sqrt(2 * (1 - np.maximum(u, 0.5))))
        return np.where(u <= 0.5, lo, hi)
    raise InvalidInputError(f"unknown clean family {family!r}")


def clean_pdf(family: str, B: float, t):
    t = np.asarray(t, dtype=np.float64)
    inside = np.abs(t) <= B
    if family == "uniform":
        return np.where(inside, 1 / (2 * B), 0.0)
    if family == "triangular":
        return np.where(inside, (B - np.abs(t)) / (B * B), 0.0)
    raise InvalidInputError(f"unknown clean family {family!r}")


# ---------------------------------------------------------------------------
# model and sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContaminationModel:
    z: float = 0.0
    alpha: float = 0.1
    M: float = 10.0
    clean_family: str = "uniform"
    B: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.clean_family not in FAMILIES:
            raise InvalidInputError(f"unknown clean family {self.clean_family!r}")
        if not 0.0 <= self.alpha < 0.5:
            raise InvalidInputError("alpha must lie in [0, 0.5)")
        if not self.B > 0:
            raise InvalidInputError("B must be positive")
        if not (math.isfinite(self.z) and math.isfinite(self.M)):
            raise InvalidInputError("z and M must be finite")

    def with_(self, **kw) -> "ContaminationModel":
        d = asdict(self)
        d.update(kw)
        return ContaminationModel(**d)


@dataclass(frozen=True)
class EstimatorReport:
    alpha: float
    M: float
    B: float
    family: str
    n: int
    seed: int
    empirical_mean: float
    empirical_median: float
    analytic_mean: float
    analytic_median: float
    K: int

    def row(self) -> list:
        return [getattr(self, f) for f in REPORT_FIELDS]


def _clean_draws(model: ContaminationModel, gen: np.random.Generator, n: int) -> np.ndarray:
    return model.z + clean_ppf(model.clean_family, model.B, gen.random(n))


def sample_surrogate(model: ContaminationModel, n: int, index: int = 0):
    """``n`` iid draws and the number K of them that are outliers."""
    if int(n) < 1:
        raise InvalidInputError("n must be positive")
    gen = rng.stream(model.seed, "contamination", index)
    outlier = gen.random(n) < model.alpha
    x = _clean_draws(model, gen, n)
    x[outlier] = model.z + model.M
    return x, int(outlier.sum())


def inject_outliers(model: ContaminationModel, n: int, K: int, index: int = 0) -> np.ndarray:
    """``n - K`` clean draws plus exactly ``K`` points at ``z + M`` (alpha is ignored)."""
    if int(n) < 1 or not 0 <= int(K) <= int(n):
        raise InvalidInputError("need n >= 1 and 0 <= K <= n")
    gen = rng.stream(model.seed, "injection", index)
    x = _clean_draws(model, gen, n)
    x[: int(K)] = model.z + model.M
    return x


# ---------------------------------------------------------------------------
# analytic quantities
# ---------------------------------------------------------------------------


def median_offset(family: str, B: float, alpha: float) -> float:
    """Delta solving (1 - alpha) F0(Delta) = 1/2."""
    if not 0.0 <= alpha < 0.5:
        raise InvalidInputError("alpha must lie in [0, 0.5)")
    return float(clean_ppf(family, B, 0.5 / (1.0 - alpha)))


def analytic_biases(model: ContaminationModel):
    """(alpha M, Delta_alpha) for a clean family with zero mean and median."""
    return model.alpha * model.M, median_offset(model.clean_family, model.B, model.alpha)


def analytic_median(model: ContaminationModel) -> float:
    """Population median; the point mass pins it when |M| <= Delta_alpha."""
    d = median_offset(model.clean_family, model.B, model.alpha)
    return model.z + float(np.clip(model.M, -d, d))


def estimator_report(model: ContaminationModel, samples, K: int, seed: int | None = None) -> EstimatorReport:
    x = np.asarray(samples, dtype=np.float64)
    mean_bias, _ = analytic_biases(model)
    mean, med = float(np.mean(x)), float(np.median(x))
    if not (math.isfinite(mean) and math.isfinite(med)):
        raise InvalidInputError("non-finite estimate")
    return EstimatorReport(
        alpha=model.alpha,
        M=model.M,
        B=model.B,
        family=model.clean_family,
        n=int(x.shape[0]),
        seed=model.seed if seed is None else int(seed),
        empirical_mean=mean,
        empirical_median=med,
        analytic_mean=model.z + mean_bias,
        analytic_median=analytic_median(model),
        K=int(K),
    )


def verify_contamination_theorem(model: ContaminationModel, M_grid, n: int = 100_000, num_seeds: int = 20) -> list:
    """One report per (M, seed); seed s draws from stream index s of ``model.seed``."""
    if int(n) < 1 or int(num_seeds) < 1:
        raise InvalidInputError("n and num_seeds must be positive")
    out = []
    for M in M_grid:
        m = model.with_(M=float(M))
        for s in range(int(num_seeds)):
            x, K = sample_surrogate(m, n, index=s)
            out.append(estimator_report(m, x, K, seed=s))
    return out


def mean_slope(reports) -> float:
    """Least-squares slope of the empirical mean against M."""
    Ms = np.array([r.M for r in reports])
    means = np.array([r.empirical_mean for r in reports])
    if np.ptp(Ms) == 0:
        raise InvalidInputError("need at least two distinct M values")
    return float(np.polyfit(Ms, means, 1)[0])


def median_stable(samples, K: int, z: float, B: float) -> bool:
    """With fewer than n/2 outliers the sample median stays within [z - B, z + B]."""
    x = np.asarray(samples)
    if not 2 * int(K) < x.shape[0]:
        raise InvalidInputError("the stability statement needs K < n/2")
    med = float(np.median(x))
    return z - B <= med <= z + B


def breakdown_median(model: ContaminationModel, n: int, K: int) -> float:
    """Sample median with K >= n/2 injected outliers (beyond the breakdown point)."""
    if not 2 * int(K) >= int(n):
        raise InvalidInputError("breakdown needs K >= n/2")
    return float(np.median(inject_outliers(model, n, K)))


# ---------------------------------------------------------------------------
# finite-sample checks
# ---------------------------------------------------------------------------


def density_floor(model: ContaminationModel) -> float:
    """Clean density lower bound used in the concentration bound."""
    if model.clean_family == "uniform":
        return 1.0 / (2.0 * model.B)
    d = median_offset(model.clean_family, model.B, model.alpha)
    return float(clean_pdf(model.clean_family, model.B, d))


def dkw_bound(n: int, rho: float) -> float:
    """2 exp(-2 n (rho - 1/n)^2), capped at 1."""
    if not rho > 1.0 / n:
        raise InvalidInputError("rho must exceed 1/n")
    return min(1.0, 2.0 * math.exp(-2.0 * n * (rho - 1.0 / n) ** 2))


@dataclass(frozen=True)
class FrequencyCheck:
    violations: int
    trials: int
    bound: float
    slack: float

    @property
    def frequency(self) -> float:
        return self.violations / self.trials

    @property
    def passed(self) -> bool:
        return self.frequency <= self.bound + self.slack


def _binomial_slack(p: float, trials: int) -> float:
    return 3.0 * math.sqrt(p * (1.0 - p) / trials)


def dkw_check(model: ContaminationModel, n: int, num_trials: int, rho: float) -> FrequencyCheck:
    """How often the sample median misses z + Delta_alpha by more than rho / ((1 - alpha) f_min)."""
    bound = dkw_bound(n, rho)
    if int(num_trials) < 1:
        raise InvalidInputError("need at least one trial")
    radius = rho / ((1.0 - model.alpha) * density_floor(model))
    center = analytic_median(model)
    bad = 0
    for t in range(int(num_trials)):
        x, _ = sample_surrogate(model, n, index=t)
        bad += abs(float(np.median(x)) - center) > radius
    return FrequencyCheck(bad, int(num_trials), bound, _binomial_slack(bound, int(num_trials)))


def mean_band_check(model: ContaminationModel, n: int, num_trials: int, tau: float | None = None) -> FrequencyCheck:
    """Fraction of trials whose mean falls outside z + [(alpha - tau) M - B, (alpha + tau) M + B].

    The failure probability is at most 2 exp(-2 tau^2 n); tau defaults to alpha / 2.
    """
    tau = model.alpha / 2.0 if tau is None else float(tau)
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    if int(num_trials) < 1:
        raise InvalidInputError("need at least one trial")
    bound = min(1.0, 2.0 * math.exp(-2.0 * tau * tau * n))
    lo = model.z + (model.alpha - tau) * model.M - model.B
    hi = model.z + (model.alpha + tau) * model.M + model.B
    lo, hi = min(lo, hi), max(lo, hi)
    bad = 0
    for t in range(int(num_trials)):
        x, _ = sample_surrogate(model, n, index=t)
        m = float(np.mean(x))
        bad += not lo <= m <= hi
    return FrequencyCheck(bad, int(num_trials), bound, _binomial_slack(bound, int(num_trials)))


# ---------------------------------------------------------------------------
# pointwise Bayes risk
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskMinimizers:
    grid: np.ndarray
    argmin_l2: float
    argmin_l1: np.ndarray  # every grid point attaining the minimum
    argmin_surrogate: float | None


def risk_grid(resolution: float = 1e-3) -> np.ndarray:
    if not 0 < resolution <= 1:
        raise InvalidInputError("grid resolution must lie in (0, 1]")
    n = int(round(1.0 / resolution))
    return np.linspace(0.0, 1.0, n + 1)


def pointwise_risk_minimizers(z: float, grid_resolution: float = 1e-3, z_tilde: float | None = None, grid=None):
    """Grid argmins of E(c - Z)^2 and E|c - Z| for Z ~ Bernoulli(z), and of |c - z_tilde|."""
    if not 0.0 <= z <= 1.0:
        raise InvalidInputError("z must lie in [0, 1]")
    c = risk_grid(grid_resolution) if grid is None else np.asarray(grid, dtype=np.float64)
    if c.size == 0:
        raise InvalidInputError("empty grid")
    l2 = z * (1 - c) ** 2 + (1 - z) * c**2
    l1 = z * (1 - c) + (1 - z) * c
    # exact expectations are affine/quadratic in c; compare with a relative tie tolerance
    ties = c[np.abs(l1 - l1.min()) <= 1e-12]
    sur = None
    if z_tilde is not None:
        sur = float(c[np.argmin(np.abs(c - float(z_tilde)))])
    return RiskMinimizers(c, float(c[np.argmin(l2)]), ties, sur)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])
    return buf.getvalue()


def reports_to_json(reports) -> str:
    return json.dumps([asdict(r) for r in reports], indent=1)
