"""Calibration metrics over prediction records.

All metrics return fractions in [0, 1]; multiply by 100 only when printing.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

DEFAULT_BINS = 20


@dataclass(frozen=True)
class PredictionRecord:
    confidence: float
    correct: int
    true_class: int | None = None
    group_key: object = None
    oracle_z: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(f"confidence {self.confidence} outside [0, 1]")
        if self.correct not in (0, 1):
            raise InvalidInputError(f"correct must be 0 or 1, got {self.correct}")
        if self.oracle_z is not None and not 0.0 <= self.oracle_z <= 1.0:
            raise InvalidInputError(f"oracle_z {self.oracle_z} outside [0, 1]")


@dataclass(frozen=True)
class RecordBatch:
    """Column view of a record list; what every metric actually consumes."""

    confidence: np.ndarray
    correct: np.ndarray
    true_class: np.ndarray | None = None
    group: np.ndarray | None = None  # integer group codes
    oracle_z: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.confidence.shape[0])

    @classmethod
    def from_arrays(cls, confidence, correct, true_class=None, group_key=None, oracle_z=None) -> "RecordBatch":
        conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
        corr = np.asarray(correct, dtype=np.float64).reshape(-1)
        n = conf.shape[0]
        if n == 0:
            raise InvalidInputError("at least one record is required")
        if corr.shape[0] != n:
            raise InvalidInputError("confidence and correct differ in length")
        if np.any((conf < 0) | (conf > 1)) or not np.all(np.isfinite(conf)):
            raise InvalidInputError("confidences must lie in [0, 1]")
        if np.any((corr != 0) & (corr != 1)):
            raise InvalidInputError("correctness must be 0 or 1")
        cls_arr = None
        if true_class is not None:
            cls_arr = np.asarray(true_class, dtype=np.int64).reshape(-1)
        grp = None
        if group_key is not None:
            keys = np.asarray(group_key)
            if keys.dtype == object:
                keys = keys.astype(str)
            _, grp = np.unique(keys.reshape(-1), return_inverse=True)
            grp = grp.astype(np.int64)
        oz = None
        if oracle_z is not None:
            oz = np.asarray(oracle_z, dtype=np.float64).reshape(-1)
            if np.any((oz < 0) | (oz > 1)):
                raise InvalidInputError("oracle_z must lie in [0, 1]")
        return cls(conf, corr, cls_arr, grp, oz)

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord]) -> "RecordBatch":
        if len(records) == 0:
            raise InvalidInputError("at least one record is required")
        conf = [r.confidence for r in records]
        corr = [r.correct for r in records]
        tc = [r.true_class for r in records]
        gk = [r.group_key for r in records]
        oz = [r.oracle_z for r in records]
        return cls.from_arrays(
            conf,
            corr,
            None if any(v is None for v in tc) else tc,
            None if any(v is None for v in gk) else np.array(gk, dtype=object),
            None if any(v is None for v in oz) else oz,
        )

    def subset(self, mask: np.ndarray) -> "RecordBatch":
        def pick(a):
            return None if a is None else a[mask]

        grp = pick(self.group)
        if grp is not None:
            _, grp = np.unique(grp, return_inverse=True)
        return RecordBatch(self.confidence[mask], self.correct[mask], pick(self.true_class), grp, pick(self.oracle_z))


def as_batch(records) -> RecordBatch:
    if isinstance(records, RecordBatch):
        return records
    return RecordBatch.from_records(list(records))


# ---------------------------------------------------------------------------
# binned ECE and reliability data
# ---------------------------------------------------------------------------


def bin_edges(num_bins: int) -> np.ndarray:
    if num_bins < 1:
        raise InvalidInputError("num_bins must be at least 1")
    return np.arange(num_bins + 1, dtype=np.float64) / num_bins


def bin_index(confidence, num_bins: int) -> np.ndarray:
    """Bin of each confidence: [i/M, (i+1)/M), the last bin closed at 1."""
    edges = bin_edges(num_bins)
    c = np.asarray(confidence, dtype=np.float64)
    idx = np.minimum(np.floor(c * num_bins).astype(np.int64), num_bins - 1)
    # floor(c*M) can land one bin off when c sits on an edge; settle against the edge table
    idx = np.where(c < edges[idx], idx - 1, idx)
    up = np.minimum(idx + 1, num_bins)
    idx = np.where((idx < num_bins - 1) & (c >= edges[up]), idx + 1, idx)
    return idx


@dataclass(frozen=True)
class BinnedReliability:
    lower: np.ndarray
    upper: np.ndarray
    count: np.ndarray
    mean_confidence: np.ndarray  # nan for empty bins
    accuracy: np.ndarray  # nan for empty bins
    gap: np.ndarray  # 0 for empty bins

    @property
    def num_bins(self) -> int:
        return int(self.count.shape[0])

    @property
    def total(self) -> int:
        return int(self.count.sum())

    def ece(self) -> float:
        occupied = self.count > 0
        w = self.count[occupied] / self.total
        return float(np.sum(w * self.gap[occupied]))

    def rows(self) -> list[dict]:
        out = []
        for i in range(self.num_bins):
            empty = self.count[i] == 0
            out.append(
                {
                    "bin_lower": float(self.lower[i]),
                    "bin_upper": float(self.upper[i]),
                    "count": int(self.count[i]),
                    "mean_confidence": None if empty else float(self.mean_confidence[i]),
                    "accuracy": None if empty else float(self.accuracy[i]),
                    "gap": float(self.gap[i]),
                }
            )
        return out


RELIABILITY_HEADER = ["bin_lower", "bin_upper", "count", "mean_confidence", "accuracy", "gap"]


def reliability_diagram(records, num_bins: int = DEFAULT_BINS) -> BinnedReliability:
    b = as_batch(records)
    idx = bin_index(b.confidence, num_bins)
    count = np.bincount(idx, minlength=num_bins)
    sum_c = np.bincount(idx, weights=b.confidence, minlength=num_bins)
    sum_z = np.bincount(idx, weights=b.correct, minlength=num_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_c = np.where(count > 0, sum_c / np.maximum(count, 1), np.nan)
        acc = np.where(count > 0, sum_z / np.maximum(count, 1), np.nan)
    gap = np.where(count > 0, np.abs(acc - mean_c), 0.0)
    edges = bin_edges(num_bins)
    return BinnedReliability(edges[:-1], edges[1:], count, mean_c, acc, gap)


def ece_binned(records, num_bins: int = DEFAULT_BINS) -> float:
    """Equal-width binned ECE; empty bins carry zero weight."""
    return reliability_diagram(records, num_bins).ece()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def reliability_to_csv(rel: BinnedReliability) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RELIABILITY_HEADER)
    for row in rel.rows():
        w.writerow([_fmt(row[k]) for k in RELIABILITY_HEADER])
    return buf.getvalue()


def reliability_from_csv(text: str) -> BinnedReliability:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != RELIABILITY_HEADER:
        raise InvalidInputError(f"unexpected reliability header {reader.fieldnames}")
    cols: dict[str, list] = {k: [] for k in RELIABILITY_HEADER}
    for row in reader:
        for k in RELIABILITY_HEADER:
            v = row[k]
            if k == "count":
                cols[k].append(int(v))
            else:
                cols[k].append(math.nan if v == "" else float(v))
    return BinnedReliability(
        np.array(cols["bin_lower"]),
        np.array(cols["bin_upper"]),
        np.array(cols["count"], dtype=np.int64),
        np.array(cols["mean_confidence"]),
        np.array(cols["accuracy"]),
        np.array(cols["gap"]),
    )


# ---------------------------------------------------------------------------
# unbinned metrics
# ---------------------------------------------------------------------------


def l1_risk(records) -> float:
    """Mean |confidence - correct|."""
    b = as_batch(records)
    return float(np.mean(np.abs(b.confidence - b.correct)))


def _require_groups(b: RecordBatch) -> np.ndarray:
    if b.group is None:
        raise InvalidInputError("every record needs a group_key")
    return b.group


def _group_stats(b: RecordBatch):
    g = _require_groups(b)
    n_g = np.bincount(g).astype(np.float64)
    acc = np.bincount(g, weights=b.correct) / n_g
    conf = np.bincount(g, weights=b.confidence) / n_g
    return g, n_g, acc, conf


def exact_conditional_ece(records) -> float:
    """ECE with groups in place of bins: sum_g (|g|/N) |acc(g) - conf(g)|."""
    b = as_batch(records)
    _, n_g, acc, conf = _group_stats(b)
    return float(np.sum(n_g * np.abs(acc - conf)) / len(b))


def decomposition_noise_term(records) -> float:
    """2 * mean min{z (1 - c), c (1 - z)} with z the known correctness probability."""
    b = as_batch(records)
    if b.oracle_z is None:
        raise InvalidInputError("every record needs oracle_z")
    z, c = b.oracle_z, b.confidence
    return float(2.0 * np.mean(np.minimum(z * (1.0 - c), c * (1.0 - z))))


def classwise_ece(records, num_classes: int | None = None) -> float:
    """Class-frequency weighted exact ECE, grouping within each true class."""
    b = as_batch(records)
    if b.true_class is None:
        raise InvalidInputError("every record needs true_class")
    _require_groups(b)
    classes = np.unique(b.true_class)
    if num_classes is not None and (classes.min() < 0 or classes.max() >= num_classes):
        raise InvalidInputError("true_class outside [0, num_classes)")
    n = len(b)
    total = 0.0
    for k in classes:
        mask = b.true_class == k
        total += (mask.sum() / n) * exact_conditional_ece(b.subset(mask))
    return float(total)


def weighted_ece(records, weights) -> float:
    """sum_g (|g|/N) w(g) |acc(g) - conf(g)| for a per-group nonnegative weight."""
    b = as_batch(records)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != len(b):
        raise InvalidInputError("one weight per record is required")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidInputError("weights must be finite and nonnegative")
    g, n_g, acc, conf = _group_stats(b)
    w_g = np.zeros(n_g.shape[0])
    w_g[g] = w
    if not np.array_equal(w_g[g], w):
        raise InvalidInputError("weights must be constant within a group")
    return float(np.sum(n_g * w_g * np.abs(acc - conf)) / len(b))


@dataclass(frozen=True)
class CalibrationSummary:
    ece_binned: float
    l1_risk: float
    exact_ece: float | None = None
    cw_ece: float | None = None
    noise_term: float | None = None


def summarize(records, num_bins: int = DEFAULT_BINS) -> CalibrationSummary:
    b = as_batch(records)
    exact = exact_conditional_ece(b) if b.group is not None else None
    cw = classwise_ece(b) if (b.group is not None and b.true_class is not None) else None
    noise = decomposition_noise_term(b) if b.oracle_z is not None else None
    return CalibrationSummary(ece_binned(b, num_bins), l1_risk(b), exact, cw, noise)


# ---------------------------------------------------------------------------
# prediction-record CSV
# ---------------------------------------------------------------------------

RECORD_HEADER = ["confidence", "correct", "true_class", "group_key", "oracle_z"]


def write_records_csv(records: Iterable[PredictionRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        w.writerow(
            [
                repr(float(r.confidence)),
                int(r.correct),
                "" if r.true_class is None else int(r.true_class),
                "" if r.group_key is None else r.group_key,
                "" if r.oracle_z is None else repr(float(r.oracle_z)),
            ]
        )
    return buf.getvalue()


def read_records_csv(source: str | Path) -> list[PredictionRecord]:
    """Parse a prediction-record CSV; ``source`` is a path or the CSV text."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    else:
        text = source
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or reader.fieldnames[:2] != RECORD_HEADER[:2]:
        raise InvalidInputError(f"unexpected record header {reader.fieldnames}")
    out = []
    for row in reader:
        tc = row.get("true_class") or ""
        gk = row.get("group_key") or ""
        oz = row.get("oracle_z") or ""
        out.append(
            PredictionRecord(
                float(row["confidence"]),
                int(row["correct"]),
                int(tc) if tc != "" else None,
                gk if gk != "" else None,
                float(oz) if oz != "" else None,
            )
        )
    if not out:
        raise InvalidInputError("record file holds no rows")
    return out
