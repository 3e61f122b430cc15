"""Finite-difference gradient checks and gradient-bound checks on random instances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import calibration_loss as cl
from . import preference as pref
from . import rng
from .numerics import finite_diff_gradient, relative_error, sigmoid_derivative
from .policy import TabularPolicy, sft_loss

GRAD_TOL = 1e-6
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_observed: float
    limit: float
    instances: int
    counterexample: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "max_observed": self.max_observed,
            "limit": self.limit,
            "instances": self.instances,
            "counterexample": self.counterexample,
        }


def _worst(name, values, limit, instances, payloads) -> CheckResult:
    values = np.asarray(values, dtype=np.float64)
    i = int(np.argmax(values))
    ok = bool(np.all(values <= limit))
    return CheckResult(name, ok, float(values[i]), float(limit), instances, {} if ok else payloads(i))


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------


def _random_policy(gen, P=2, V=5, scale=2.0) -> TabularPolicy:
    return TabularPolicy(gen.normal(scale=scale, size=(P, V + 1, V)))


def _random_pair(gen, P, V, T) -> pref.PreferencePair:
    a = gen.integers(0, V, size=T)
    b = a.copy()
    while np.array_equal(a, b):
        b = gen.integers(0, V, size=T)
    return pref.PreferencePair(int(gen.integers(0, P)), a, b)


def _policy_fd(fn, policy: TabularPolicy) -> np.ndarray:
    return finite_diff_gradient(lambda x: fn(TabularPolicy(x)), policy.logits, FD_STEP)


def _frozen_cal(policy: TabularPolicy, pair, flip: bool):
    """Calibration loss of one side as a function of the table, targets fixed at ``policy``."""
    seq = pair.dispreferred if flip else pair.preferred
    st = policy.sequence_states([pair.context_id], np.asarray(seq)[None, :])[0]
    mode = cl.ONE_MINUS_SURROGATE if flip else cl.SURROGATE
    targets = cl.seq_targets(policy.flat[st], seq, mode)

    def f(p: TabularPolicy) -> float:
        return cl.seq_cal_loss_from_logits(p.flat[st], seq, mode, frozen_targets=targets)

    return f


# ---------------------------------------------------------------------------
# analytic gradients under test (overridable for negative controls)
# ---------------------------------------------------------------------------


def analytic_seq_cal_grad(logits, truth, mode) -> np.ndarray:
    ctxs = [cl.TokenContext.from_logits(lg, int(t)) for lg, t in zip(logits, truth)]
    grads = cl.cal_loss_gradient(ctxs, mode, logits)
    return np.array([g.d_loss_d_logits for g in grads]) / len(ctxs)


def analytic_dpo_grad(policy, reference, pair, beta) -> np.ndarray:
    g = np.zeros_like(policy.logits)
    pref.dpo_loss(policy, reference, pair, beta, grad=g)
    return g


def analytic_joint_grad(policy, reference, pair, beta, lam) -> np.ndarray:
    g = np.zeros_like(policy.logits)
    pref.joint_loss(policy, reference, pair, beta, lam, grad=g)
    return g


def analytic_sft_grad(policy, ctx, seq, eps) -> np.ndarray:
    g = np.zeros_like(policy.logits)
    sft_loss(policy, ctx, seq, eps, grad=g)
    return g


ANALYTIC = {
    "seq_cal_loss": analytic_seq_cal_grad,
    "dpo_loss": analytic_dpo_grad,
    "joint_loss": analytic_joint_grad,
    "sft_loss": analytic_sft_grad,
}


# ---------------------------------------------------------------------------
# finite-difference checks
# ---------------------------------------------------------------------------


def check_seq_cal_loss(seed=0, instances=100, analytic=None) -> CheckResult:
    analytic = analytic or ANALYTIC["seq_cal_loss"]
    gen = rng.stream(seed, "gradcheck-cal")
    errs, cases = [], []
    for _ in range(instances):
        T, V = int(gen.integers(1, 6)), int(gen.integers(2, 7))
        lg = gen.normal(scale=2.0, size=(T, V))
        truth = gen.integers(0, V, size=T)
        mode = cl.TARGET_MODES[int(gen.integers(0, 2))]
        targets = cl.seq_targets(lg, truth, mode)
        fd = finite_diff_gradient(lambda x: cl.seq_cal_loss_from_logits(x, truth, mode, targets), lg, FD_STEP)
        errs.append(relative_error(analytic(lg, truth, mode), fd))
        cases.append({"logits": lg.tolist(), "truth": truth.tolist(), "mode": mode})
    return _worst("grad:seq_cal_loss", errs, GRAD_TOL, instances, lambda i: cases[i])


def check_dpo_loss(seed=0, instances=100, analytic=None) -> CheckResult:
    analytic = analytic or ANALYTIC["dpo_loss"]
    gen = rng.stream(seed, "gradcheck-dpo")
    errs, cases = [], []
    for _ in range(instances):
        pol, ref = _random_policy(gen), _random_policy(gen)
        pair = _random_pair(gen, pol.num_prompts, pol.vocab_size, int(gen.integers(1, 5)))
        beta = float(gen.uniform(0.05, 1.0))
        fd = _policy_fd(lambda p: pref.dpo_loss(p, ref, pair, beta), pol)
        errs.append(relative_error(analytic(pol, ref, pair, beta), fd))
        cases.append({"policy": pol.logits.tolist(), "reference": ref.logits.tolist(), "pair": repr(pair), "beta": beta})
    return _worst("grad:dpo_loss", errs, GRAD_TOL, instances, lambda i: cases[i])


def check_joint_loss(seed=0, instances=100, analytic=None) -> CheckResult:
    analytic = analytic or ANALYTIC["joint_loss"]
    gen = rng.stream(seed, "gradcheck-joint")
    errs, cases = [], []
    for _ in range(instances):
        pol, ref = _random_policy(gen), _random_policy(gen)
        pair = _random_pair(gen, pol.num_prompts, pol.vocab_size, int(gen.integers(1, 5)))
        beta, lam = float(gen.uniform(0.05, 1.0)), float(gen.uniform(0.0, 1.0))
        cal_p, cal_m = _frozen_cal(pol, pair, False), _frozen_cal(pol, pair, True)

        def f(p):
            return pref.dpo_loss(p, ref, pair, beta) + lam * (cal_p(p) + cal_m(p))

        fd = _policy_fd(f, pol)
        errs.append(relative_error(analytic(pol, ref, pair, beta, lam), fd))
        cases.append({"policy": pol.logits.tolist(), "pair": repr(pair), "beta": beta, "lam": lam})
    return _worst("grad:joint_loss", errs, GRAD_TOL, instances, lambda i: cases[i])


def check_sft_loss(seed=0, instances=100, analytic=None) -> CheckResult:
    analytic = analytic or ANALYTIC["sft_loss"]
    gen = rng.stream(seed, "gradcheck-sft")
    errs, cases = [], []
    for _ in range(instances):
        pol = _random_policy(gen)
        ctx = int(gen.integers(0, pol.num_prompts))
        seq = gen.integers(0, pol.vocab_size, size=int(gen.integers(1, 5)))
        eps = float(gen.uniform(0.0, 0.5))
        fd = _policy_fd(lambda p: sft_loss(p, ctx, seq, eps), pol)
        errs.append(relative_error(analytic(pol, ctx, seq, eps), fd))
        cases.append({"policy": pol.logits.tolist(), "context": ctx, "sequence": seq.tolist(), "eps": eps})
    return _worst("grad:sft_loss", errs, GRAD_TOL, instances, lambda i: cases[i])


# ---------------------------------------------------------------------------
# bound checks
# ---------------------------------------------------------------------------


def _random_contexts(gen, n, V=6, scale=3.0):
    lg = gen.normal(scale=scale, size=(n, V))
    truth = gen.integers(0, V, size=n)
    flip = gen.random(n) < 0.5
    return lg, truth, flip


def check_token_bounds(seed=0, instances=100_000) -> list:
    """|1 - 2 target| <= 1 and |dL/dlogit_j| <= c (1 - c) <= 1/4 on random token contexts."""
    gen = rng.stream(seed, "gradcheck-bounds")
    lg, truth, flip = _random_contexts(gen, instances)
    c, zt, target, dl_dc, dlog = cl.batch_token_cal_grad(lg, truth, flip)
    slope = np.abs(dl_dc)
    per_logit = np.abs(dlog).max(axis=1)
    excess = per_logit - c * (1 - c)
    cc = c * (1 - c)

    def payload(i):
        return {"logits": lg[i].tolist(), "truth": int(truth[i]), "flip": bool(flip[i])}

    return [
        _worst("bound:|1-2z|<=1", slope, 1.0, instances, payload),
        _worst("bound:|dL/dlogit|-c(1-c)<=0", excess, 1e-15, instances, payload),
        _worst("bound:|dL/dlogit|<=1/4", per_logit, 0.25, instances, payload),
        _worst("bound:c(1-c)<=1/4", cc, 0.25, instances, payload),
    ]


def check_sigmoid_slope(seed=0, instances=100_000) -> CheckResult:
    gen = rng.stream(seed, "gradcheck-sigmoid")
    u = gen.normal(scale=10.0, size=instances)
    u[:3] = (0.0, 1e-12, -1e-12)
    d = sigmoid_derivative(u)
    return _worst("bound:sigmoid'<=1/4", d, 0.25, instances, lambda i: {"u": float(u[i])})


def check_margin_perturbation(seed=0, instances=10_000, lam=None) -> CheckResult:
    """lam |G+ - G-| <= 2 lam |y| / 4 on random policies and pairs (reported as the ratio)."""
    gen = rng.stream(seed, "gradcheck-perturbation")
    ratios, cases = [], []
    for _ in range(instances):
        pol = _random_policy(gen, P=2, V=6, scale=3.0)
        T = int(gen.integers(1, 6))
        pair = _random_pair(gen, pol.num_prompts, pol.vocab_size, T)
        lam_i = float(gen.uniform(0.01, 1.0)) if lam is None else float(lam)
        ratios.append(pref.cal_margin_perturbation(pol, pair, lam_i) / pref.perturbation_bound(lam_i, T))
        cases.append({"policy": pol.logits.tolist(), "pair": repr(pair), "lam": lam_i})
    return _worst("bound:margin_perturbation/bound<=1", ratios, 1.0, instances, lambda i: cases[i])


def run_all(seed=0, grad_instances=100, bound_instances=100_000, pair_instances=10_000) -> list:
    out = [
        check_seq_cal_loss(seed, grad_instances),
        check_dpo_loss(seed, grad_instances),
        check_joint_loss(seed, grad_instances),
        check_sft_loss(seed, grad_instances),
    ]
    out.extend(check_token_bounds(seed, bound_instances))
    out.append(check_sigmoid_slope(seed, bound_instances))
    out.append(check_margin_perturbation(seed, pair_instances))
    return out
