"""Experiment drivers: each writes its tables under a fresh run directory."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__, gradcheck, metrics, rng, robustness, selection, synthdata
from .._backend import backend_name
from ..errors import InvariantViolation
from ..policy import TabularPolicy, TrainConfig, checkpoint_to_csv, sequence_nll, temperature_scale
from ..training import train
from .config import RunConfig
from .io import atomic_write_json, atomic_write_text

log = logging.getLogger(__name__)

METHODS = ("sft", "sft_label_smooth", "sft_temperature", "dpo", "dpo_bce", "dpo_bpc")


# ---------------------------------------------------------------------------
# run directory plumbing
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def table_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass
class RunDir:
    root: Path
    config: RunConfig
    files: dict = field(default_factory=dict)  # group -> list of relative paths
    timings: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: RunConfig, base: str | Path | None = None) -> "RunDir":
        base = Path(config.output_dir if base is None else base)
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        name = f"{stamp}-{config.experiment}"
        root = base / name
        i = 1
        while root.exists():
            root = base / f"{name}-{i}"
            i += 1
        (root / "checkpoints").mkdir(parents=True)
        (root / "reports").mkdir()
        atomic_write_json(root / "config.json", config.to_dict())
        return cls(root, config)

    def _record(self, group, path: Path):
        self.files.setdefault(str(group), []).append(str(path.relative_to(self.root)))

    def write_text(self, rel: str, text: str, group="run") -> Path:
        path = self.root / rel
        atomic_write_text(path, text)
        self._record(group, path)
        return path

    def write_table(self, name: str, header, rows, group="run") -> None:
        """Same table as ``reports/<name>.csv`` and ``reports/<name>.json``."""
        rows = [list(r) for r in rows]
        self.write_text(f"reports/{name}.csv", table_csv(header, rows), group)
        doc = [{h: _jsonable(v) for h, v in zip(header, r)} for r in rows]
        self.write_text(f"reports/{name}.json", json.dumps(doc, indent=1) + "\n", group)

    def finish(self) -> Path:
        manifest = {
            "artifact_version": __version__,
            "kernel_backend": backend_name(),
            "config": self.config.to_dict(),
            "files": self.files,
            "timings_seconds": self.timings,
        }
        for paths in self.files.values():
            for p in paths:
                f = self.root / p
                if not f.is_file() or f.stat().st_size == 0:
                    raise InvariantViolation("manifest_completeness", {"missing": p})
        atomic_write_json(self.root / "manifest.json", manifest)
        return self.root


# ---------------------------------------------------------------------------
# training branches shared by drift and Confidence@k
# ---------------------------------------------------------------------------


@dataclass
class SeedRun:
    seed: int
    spec: synthdata.TaskSpec
    dataset: synthdata.GeneratedDataset
    policies: dict
    best_epochs: dict
    temperature: float
    delta_min: dict = field(default_factory=dict)  # preference method -> per-epoch min margin


def _examples(ds, split):
    ex = ds.sft_split(split)
    return [e[0] for e in ex], [e[1] for e in ex]


def prediction_batch(policy: TabularPolicy, spec: synthdata.TaskSpec, examples) -> metrics.RecordBatch:
    """Greedy-label records against the sampled labels of ``examples``."""
    tok, conf = synthdata.greedy_predictions(policy, spec)
    z = synthdata.oracle_correctness(spec, tok)
    ctx = np.array([e[0] for e in examples], dtype=np.int64)
    lab = np.array([e[1][-1] for e in examples], dtype=np.int64)
    return metrics.RecordBatch.from_arrays(conf[ctx], (tok[ctx] == lab).astype(np.float64), lab, ctx, z[ctx])


def batch_records(b: metrics.RecordBatch, group_keys) -> list:
    return [
        metrics.PredictionRecord(float(c), int(y), int(t), int(g), float(z))
        for c, y, t, g, z in zip(b.confidence, b.correct, b.true_class, group_keys, b.oracle_z)
    ]


def exact_oracle_metrics(policy: TabularPolicy, spec: synthdata.TaskSpec):
    """(accuracy, exact ECE, mean confidence) of greedy decoding over all prompts."""
    tok, conf = synthdata.greedy_predictions(policy, spec)
    z = synthdata.oracle_correctness(spec, tok)
    return float(z.mean()), float(np.mean(np.abs(z - conf))), float(conf.mean())


def train_branches(config: RunConfig, seed: int, lambda_zero_check: bool = False) -> SeedRun:
    ts = config.train_config
    spec = synthdata.TaskSpec.from_dict({**config.task_spec.to_dict(), "seed": rng.derive_seed(config.master_seed, "task", seed)})
    ds = synthdata.generate_tasks(spec)
    train_seed = rng.derive_seed(config.master_seed, "train", seed)
    vctx, vseq = _examples(ds, "validation")
    val_examples = ds.sft_split("validation")

    def val_nll(p):
        return sequence_nll(p, vctx, vseq)

    def val_ece(p):
        return metrics.ece_binned(prediction_batch(p, spec, val_examples), config.bins)

    def cfg(objective, eta, epochs, **kw):
        return TrainConfig(
            objective,
            beta=ts.beta,
            lam=kw.pop("lam", ts.lam),
            epsilon_smooth=ts.epsilon_smooth,
            schedule=ts.schedule,
            eta=eta,
            epochs=epochs,
            batch_size=ts.batch_size,
            seed=train_seed,
        )

    init = TabularPolicy.zeros(spec.num_prompts, spec.vocab_size)
    sft_examples = ds.sft_split("train")
    sft = train(init, cfg("sft", ts.sft_eta, ts.sft_epochs), sft_examples=sft_examples, select=val_nll, stream_tag="sft")
    policies = {"sft": sft.policy}
    best = {"sft": sft.best_epoch}

    ls = train(
        sft.policy,
        cfg("sft_label_smooth", ts.sft_eta, ts.sft_epochs),
        sft_examples=sft_examples,
        select=val_nll,
        stream_tag="label-smooth",
    )
    policies["sft_label_smooth"], best["sft_label_smooth"] = ls.policy, ls.best_epoch

    tau = temperature_scale(sft.policy, list(zip(vctx, vseq)))
    policies["sft_temperature"], best["sft_temperature"] = sft.policy.scaled(tau), sft.best_epoch

    pairs = ds.pair_split("train")
    delta_min = {}
    for obj in ("dpo", "dpo_bce", "dpo_bpc"):
        r = train(
            sft.policy,
            cfg(obj, ts.pref_eta, ts.pref_epochs),
            pairs=pairs,
            reference=sft.policy,
            select=val_ece,
            stream_tag="preference",
        )
        policies[obj], best[obj] = r.policy, r.best_epoch
        delta_min[obj] = r.delta_min

    if lambda_zero_check:
        r0 = train(
            sft.policy,
            cfg("dpo_bpc", ts.pref_eta, ts.pref_epochs, lam=0.0),
            pairs=pairs,
            reference=sft.policy,
            select=val_ece,
            stream_tag="preference",
        )
        if not r0.policy == policies["dpo"]:
            diff = float(np.max(np.abs(r0.policy.logits - policies["dpo"].logits)))
            raise InvariantViolation("lambda_zero_equals_dpo", {"seed": seed, "max_abs_diff": diff})

    return SeedRun(seed, spec, ds, policies, best, tau, delta_min)


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------

DRIFT_FIELDS = (
    "method",
    "seed",
    "accuracy",
    "exact_ece",
    "binned_ece",
    "mean_confidence",
    "test_accuracy",
    "best_epoch",
)
SUMMARY_FIELDS = ("method", "num_seeds", "mean_accuracy", "mean_exact_ece", "mean_binned_ece", "mean_confidence")


def summarize_drift(per_seed_rows) -> list:
    """Per-method means over seeds, in METHODS order."""
    out = []
    for m in METHODS:
        rows = [r for r in per_seed_rows if r[0] == m]
        if not rows:
            continue
        a = np.array([[r[2], r[3], r[4], r[5]] for r in rows], dtype=np.float64)
        mean = a.mean(axis=0)
        out.append([m, len(rows), mean[0], mean[1], mean[2], mean[3]])
    return out


def run_drift_experiment(config: RunConfig, run: RunDir | None = None, lambda_zero_check: bool = True) -> Path:
    run = run or RunDir.create(config)
    rows, margins = [], []
    for seed in config.seeds:
        t0 = time.perf_counter()
        sr = train_branches(config, seed, lambda_zero_check)
        for m, dm in sr.delta_min.items():
            for epoch, d in enumerate(dm):
                bound = 2.0 * d / sr.spec.seq_len if d > 0 else 0.0
                margins.append([m, seed, epoch, d, bound, config.train_config.lam < bound])
        test_examples = sr.dataset.sft_split("test")
        for m in METHODS:
            pol = sr.policies[m]
            batch = prediction_batch(pol, sr.spec, test_examples)
            rel = metrics.reliability_diagram(batch, config.bins)
            acc, exact, mean_conf = exact_oracle_metrics(pol, sr.spec)
            rows.append([m, seed, acc, exact, rel.ece(), mean_conf, float(batch.correct.mean()), sr.best_epochs[m]])
            tag = f"seed{seed}_{m}"
            run.write_text(f"checkpoints/{tag}.csv", checkpoint_to_csv(pol), seed)
            run.write_text(f"reports/reliability_{tag}.csv", metrics.reliability_to_csv(rel), seed)
            run.write_text(
                f"reports/reliability_{tag}.json", json.dumps([{k: _jsonable(v) for k, v in r.items()} for r in rel.rows()], indent=1) + "\n", seed
            )
            ctx = [e[0] for e in test_examples]
            run.write_text(f"reports/records_{tag}.csv", metrics.write_records_csv(batch_records(batch, ctx)), seed)
        run.timings[f"seed{seed}"] = time.perf_counter() - t0
        log.info("drift seed %d done in %.2fs", seed, run.timings[f"seed{seed}"])
    run.write_table("drift_per_seed", DRIFT_FIELDS, rows)
    run.write_table("drift_summary", SUMMARY_FIELDS, summarize_drift(rows))
    run.write_table("delta_min", ("method", "seed", "epoch", "delta_min", "lambda_bound", "lambda_below_bound"), margins)
    return run.finish()


# ---------------------------------------------------------------------------
# contamination
# ---------------------------------------------------------------------------

CHECK_FIELDS = ("check", "passed", "observed", "limit")


def run_contamination_experiment(config: RunConfig, run: RunDir | None = None) -> Path:
    run = run or RunDir.create(config)
    cs = config.contamination
    t0 = time.perf_counter()
    reports, summary, checks = [], [], []
    for alpha in cs.alphas:
        base = robustness.ContaminationModel(cs.z, alpha, cs.Ms[0], cs.family, cs.B, config.master_seed)
        reps = robustness.verify_contamination_theorem(base, cs.Ms, cs.n, cs.num_seeds)
        reports.extend(reps)
        for M in cs.Ms:
            rr = [r for r in reps if r.M == M]
            summary.append(
                [
                    alpha,
                    M,
                    float(np.mean([r.empirical_mean for r in rr])),
                    rr[0].analytic_mean,
                    float(np.mean([r.empirical_median for r in rr])),
                    rr[0].analytic_median,
                    float(max(abs(r.empirical_median - r.analytic_median) for r in rr)),
                ]
            )
        if len(set(cs.Ms)) > 1 and alpha > 0:
            slope = robustness.mean_slope(reps)
            checks.append([f"mean_slope_alpha={alpha}", abs(slope / alpha - 1) <= 0.05, slope, alpha])
        meds = [r.empirical_median for r in reps]
        checks.append([f"median_spread_alpha={alpha}", max(meds) - min(meds) <= 0.05, max(meds) - min(meds), 0.05])
        if alpha == 0:
            band = 3 * cs.B / math.sqrt(cs.n)
            dev = max(max(abs(r.empirical_mean - cs.z), abs(r.empirical_median - cs.z)) for r in reps)
            checks.append(["alpha0_clt_band", dev <= band, dev, band])
        m_hi = base.with_(M=max(cs.Ms))
        dkw = robustness.dkw_check(m_hi, cs.dkw_n, cs.dkw_trials, cs.dkw_rho)
        checks.append([f"dkw_alpha={alpha}", dkw.passed, dkw.frequency, dkw.bound + dkw.slack])
        if alpha > 0:  # the band uses tau = alpha / 2
            band = robustness.mean_band_check(m_hi, cs.dkw_n, cs.dkw_trials)
            checks.append([f"mean_band_alpha={alpha}", band.passed, band.frequency, band.bound + band.slack])

    far = robustness.ContaminationModel(cs.z, 0.0, 1e6, cs.family, cs.B, config.master_seed)
    K = int(0.3 * cs.n)
    x = robustness.inject_outliers(far, cs.n, K)
    med = float(np.median(x))
    checks.append(["median_stability_K<n/2", robustness.median_stable(x, K, cs.z, cs.B), med, cs.z + cs.B])
    n_odd = cs.n | 1
    bd = robustness.breakdown_median(far, n_odd, n_odd // 2 + 1)
    checks.append(["breakdown_K>=n/2", bd == cs.z + far.M, bd, cs.z + far.M])

    run.write_text("reports/contamination.csv", robustness.reports_to_csv(reports))
    run.write_text("reports/contamination.json", robustness.reports_to_json(reports) + "\n")
    run.write_table(
        "contamination_summary",
        ("alpha", "M", "mean_of_means", "analytic_mean", "mean_of_medians", "analytic_median", "max_median_error"),
        summary,
    )
    run.write_table("contamination_checks", CHECK_FIELDS, checks)
    run.timings["total"] = time.perf_counter() - t0
    root = run.finish()
    failed = [c for c in checks if not c[1]]
    if failed:
        raise InvariantViolation("contamination", {"failed": [c[0] for c in failed], "run_dir": str(root)})
    return root


# ---------------------------------------------------------------------------
# Confidence@k
# ---------------------------------------------------------------------------

CONFATK_FIELDS = ("method", "k", "temperature", "seed", "accuracy", "stderr", "exact_expected")


def run_confat_k_experiment(config: RunConfig, run: RunDir | None = None) -> Path:
    run = run or RunDir.create(config)
    ks = config.selection.ks
    trials = config.selection.num_trials
    rows = []
    for seed in config.seeds:
        t0 = time.perf_counter()
        sr = train_branches(config, seed)
        vctx, vseq = _examples(sr.dataset, "validation")
        val = list(zip(vctx, vseq))
        eval_seed = rng.derive_seed(config.master_seed, "selection", seed)
        by_method = {}
        for m in METHODS:
            pol = sr.policies[m]
            tau = temperature_scale(pol, val)
            by_method[m] = [selection.evaluate_selection(pol, sr.spec, k, tau, trials, eval_seed) for k in ks]
            rows.extend([m, r.k, r.temperature, seed, r.accuracy, r.stderr, ""] for r in by_method[m])
        # controls on the SFT policy: oracle confidences and uniform-random choice
        sft = sr.policies["sft"]
        tau = temperature_scale(sft, val)
        for k in ks:
            r = selection.evaluate_selection(sft, sr.spec, k, tau, trials, eval_seed, oracle_confidence=True)
            exact = selection.expected_oracle_accuracy(sft, sr.spec, k, tau)
            rows.append(["oracle", k, tau, seed, r.accuracy, r.stderr, exact])
            by_method.setdefault("oracle", []).append(r)
        r1 = selection.evaluate_selection(sft, sr.spec, 1, tau, trials, eval_seed)
        exact1 = selection.expected_oracle_accuracy(sft, sr.spec, 1, tau)
        for k in ks:
            # a uniformly random pick from k iid candidates is distributed as a single draw
            rows.append(["random", k, tau, seed, r1.accuracy, r1.stderr, exact1])
        for m, results in by_method.items():
            run.write_text(f"reports/selection_seed{seed}_{m}.csv", selection.results_to_csv(results), seed)
        run.timings[f"seed{seed}"] = time.perf_counter() - t0
    run.write_table("confatk", CONFATK_FIELDS, rows)
    methods = list(METHODS) + ["oracle", "random"]
    table = []
    for m in methods:
        row = [m]
        for k in ks:
            row.append(float(np.mean([r[4] for r in rows if r[0] == m and r[1] == k])))
        table.append(row)
    run.write_table("confatk_table", ["method"] + [f"k={k}" for k in ks], table)
    return run.finish()


# ---------------------------------------------------------------------------
# gradient / bound suite and metric identities
# ---------------------------------------------------------------------------


def run_gradcheck(config: RunConfig, run: RunDir | None = None) -> Path:
    run = run or RunDir.create(config)
    gs = config.gradcheck
    t0 = time.perf_counter()
    results = gradcheck.run_all(config.master_seed, gs.grad_instances, gs.bound_instances, gs.pair_instances)
    run.timings["total"] = time.perf_counter() - t0
    rows = [[r.name, r.passed, r.max_observed, r.limit, r.instances] for r in results]
    run.write_table("gradcheck", ("check", "passed", "max_observed", "limit", "instances"), rows)
    failed = [r.to_dict() for r in results if not r.passed]
    if failed:
        run.write_text("reports/gradcheck_failures.json", json.dumps(failed, indent=1) + "\n")
    root = run.finish()
    if failed:
        raise InvariantViolation("gradcheck", {"failed": [f["name"] for f in failed], "run_dir": str(root)})
    return root


def random_record_batch(gen: np.random.Generator, num_groups: int | None = None, num_classes: int = 4):
    """Grouped records with confidence constant per group.

    ``oracle_z`` is set to each group's empirical accuracy, so the group is
    its own population and the l1 decomposition is exact.
    """
    G = int(num_groups or gen.integers(1, 30))
    sizes = gen.integers(1, 12, size=G)
    grp = np.repeat(np.arange(G), sizes)
    conf = gen.random(G)[grp]
    correct = (gen.random(grp.shape[0]) < gen.random(G)[grp]).astype(np.float64)
    z = (np.bincount(grp, weights=correct) / sizes)[grp]
    cls = gen.integers(0, num_classes, size=grp.shape[0])
    return metrics.RecordBatch.from_arrays(conf, correct, cls, grp, z)


def metric_identity_checks(seed: int, num_datasets: int = 1000) -> list:
    gen = rng.stream(seed, "metrics-suite")
    ident, dom1, dom2, wdom = [], [], [], []
    for _ in range(num_datasets):
        b = random_record_batch(gen)
        exact = metrics.exact_conditional_ece(b)
        ident.append(abs(metrics.l1_risk(b) - exact - metrics.decomposition_noise_term(b)))
        cw = metrics.classwise_ece(b)
        dom1.append(exact - cw)
        dom2.append(cw - metrics.l1_risk(b))
        w_g = gen.random(int(b.group.max()) + 1) * 3
        w = w_g[b.group]
        wdom.append(metrics.weighted_ece(b, w) - w.max() * exact)
    return [
        ["l1_risk=exact_ece+noise", max(ident) <= 1e-12, max(ident), 1e-12],
        ["exact_ece<=classwise_ece", max(dom1) <= 1e-12, max(dom1), 1e-12],
        ["classwise_ece<=l1_risk", max(dom2) <= 1e-12, max(dom2), 1e-12],
        ["weighted_ece<=w_max*exact_ece", max(wdom) <= 1e-12, max(wdom), 1e-12],
    ]


def run_metrics_suite(config: RunConfig, run: RunDir | None = None) -> Path:
    run = run or RunDir.create(config)
    t0 = time.perf_counter()
    checks = metric_identity_checks(config.master_seed)
    run.timings["total"] = time.perf_counter() - t0
    run.write_table("metrics_suite", CHECK_FIELDS, checks)
    root = run.finish()
    if not all(c[1] for c in checks):
        raise InvariantViolation("metrics_suite", {"failed": [c[0] for c in checks if not c[1]]})
    return root


# ---------------------------------------------------------------------------
# single training run
# ---------------------------------------------------------------------------


def run_train(config: RunConfig, run: RunDir | None = None) -> Path:
    """Train every branch for each seed and store checkpoints plus a metrics table."""
    run = run or RunDir.create(config)
    rows = []
    for seed in config.seeds:
        t0 = time.perf_counter()
        sr = train_branches(config, seed)
        run.write_text(f"checkpoints/seed{seed}_dataset.json", sr.dataset.to_json(), seed)
        for m in METHODS:
            run.write_text(f"checkpoints/seed{seed}_{m}.csv", checkpoint_to_csv(sr.policies[m]), seed)
            acc, exact, conf = exact_oracle_metrics(sr.policies[m], sr.spec)
            rows.append([m, seed, acc, exact, conf, sr.best_epochs[m]])
        run.timings[f"seed{seed}"] = time.perf_counter() - t0
    run.write_table("train", ("method", "seed", "accuracy", "exact_ece", "mean_confidence", "best_epoch"), rows)
    return run.finish()


RUNNERS = {
    "drift": run_drift_experiment,
    "contamination": run_contamination_experiment,
    "confat_k": run_confat_k_experiment,
    "gradcheck": run_gradcheck,
    "metrics_suite": run_metrics_suite,
    "train": run_train,
}


def run_experiment(config: RunConfig) -> Path:
    return RUNNERS[config.experiment](config)
