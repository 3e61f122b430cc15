import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bpclab import calibration_loss as cl
from bpclab import kernels
from bpclab.errors import InvalidInputError
from bpclab.numerics import finite_diff_gradient, relative_error

import oracles

unit = st.floats(0.0, 1.0)


def ctx(probs, truth):
    return cl.TokenContext(np.array(probs), truth)


def test_margin_examples():
    assert cl.margin(ctx([0.7, 0.2, 0.1], 0)) == pytest.approx(0.5, abs=1e-15)
    assert cl.margin(ctx([0.1, 0.9], 0)) == pytest.approx(-0.8, abs=1e-15)
    assert cl.margin(ctx([0.25] * 4, 2)) == 0.0


def test_surrogate_examples():
    assert cl.surrogate(ctx([0.7, 0.2, 0.1], 0)) == pytest.approx(0.6224593312, abs=1e-10)
    assert cl.surrogate(ctx([0.5, 0.5], 1)) == 0.5


def test_token_context_validation():
    with pytest.raises(InvalidInputError):
        ctx([1.0], 0)
    with pytest.raises(InvalidInputError):
        ctx([0.5, 0.6], 0)
    with pytest.raises(InvalidInputError):
        ctx([0.5, 0.5], 2)


def test_confidence_tie_goes_to_lowest_index():
    c = ctx([0.4, 0.4, 0.2], 1)
    assert c.top_index == 0
    assert c.confidence == 0.4


def test_token_loss_examples():
    assert cl.token_cal_loss(0.5, 0.93) == 0.5
    # 0.6224593312 * 0.3 + 0.3775406688 * 0.7
    assert cl.token_cal_loss(0.6224593312, 0.7) == pytest.approx(0.45101626752, abs=1e-12)
    with pytest.raises(InvalidInputError):
        cl.token_cal_loss(1.2, 0.5)
    with pytest.raises(InvalidInputError):
        cl.token_cal_loss(0.5, -0.1)


def test_bce_examples():
    assert cl.bce_cal_loss(0.5, 0.5) == pytest.approx(0.6931471806, abs=1e-10)
    assert cl.bce_cal_loss(1.0, 1 - 1e-12) < 1e-11
    # -(0.8 ln 0.6 + 0.2 ln 0.4)
    assert cl.bce_cal_loss(0.8, 0.6) == pytest.approx(0.5919186453876236, abs=1e-12)
    assert math.isfinite(cl.bce_cal_loss(1.0, 0.0))


def test_symmetry_on_random_pairs():
    gen = np.random.default_rng(11)
    z, c = gen.random(100_000), gen.random(100_000)
    lhs = z * (1 - c) + (1 - z) * c + (1 - z) * (1 - c) + z * c
    assert np.max(np.abs(lhs - 1.0)) <= 1e-15
    for zi, ci in zip(z[:2000], c[:2000]):
        assert abs(cl.token_cal_loss(zi, ci) + cl.token_cal_loss(1 - zi, ci) - 1.0) <= 1e-15


@given(unit, unit, st.floats(0.0, 0.5))
def test_token_loss_affine_in_confidence(z, c, h):
    c0, c1, c2 = c * (1 - 2 * h) , c * (1 - 2 * h) + h * c, c * (1 - 2 * h) + 2 * h * c
    second = cl.token_cal_loss(z, c0) - 2 * cl.token_cal_loss(z, c1) + cl.token_cal_loss(z, c2)
    assert abs(second) <= 1e-12


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20)), st.data())
def test_direction_matches_margin_sign(logits, data):
    truth = data.draw(st.integers(0, logits.shape[0] - 1))
    c = cl.TokenContext.from_logits(logits, truth)
    m, s = cl.margin(c), cl.surrogate(c)
    assert (s > 0.5) == (m > 0)
    assert (s < 0.5) == (m < 0)
    assert (s == 0.5) == (m == 0)


def test_surrogate_preserves_margin_order():
    gen = np.random.default_rng(5)
    ctxs = [cl.TokenContext.from_logits(gen.normal(scale=2, size=5), int(gen.integers(5))) for _ in range(500)]
    ctxs.sort(key=cl.margin)
    s = [cl.surrogate(c) for c in ctxs]
    assert all(a <= b for a, b in zip(s, s[1:]))


def test_seq_loss_reductions():
    a = ctx([0.7, 0.2, 0.1], 0)
    assert cl.seq_cal_loss([a]) == cl.token_cal_loss(cl.surrogate(a), a.confidence)
    assert cl.seq_cal_loss([a, a]) == cl.seq_cal_loss([a])
    assert cl.seq_cal_loss([a], cl.ONE_MINUS_SURROGATE) == pytest.approx(1 - cl.seq_cal_loss([a]), abs=1e-15)
    with pytest.raises(InvalidInputError):
        cl.seq_cal_loss([])
    with pytest.raises(InvalidInputError):
        cl.seq_cal_loss([a], "nope")


def test_seq_loss_against_loop_oracle():
    gen = np.random.default_rng(7)
    for flip in (False, True):
        rows = gen.normal(scale=2, size=(5, 6))
        truth = gen.integers(0, 6, size=5)
        tokens = [cl.TokenContext.from_logits(r, int(t)) for r, t in zip(rows, truth)]
        mode = cl.ONE_MINUS_SURROGATE if flip else cl.SURROGATE
        expect = oracles.cal_loss_seq(rows.tolist(), truth.tolist(), flip)
        assert abs(cl.seq_cal_loss(tokens, mode) - expect) <= 1e-15


def test_gradient_examples():
    a = ctx([0.7, 0.2, 0.1], 0)
    g = cl.token_cal_gradient(a, 0.5)
    assert g.d_loss_d_confidence == 0.0
    assert np.all(g.d_loss_d_logits == 0.0)
    zt = cl.surrogate(a)
    g = cl.cal_loss_gradient([a], cl.SURROGATE, [np.log(a.probs)])[0]
    assert g.d_loss_d_confidence == pytest.approx(-0.2449186624, abs=1e-10)
    assert g.d_loss_d_confidence == 1 - 2 * zt


def test_gradient_shape_errors():
    a = ctx([0.7, 0.2, 0.1], 0)
    with pytest.raises(InvalidInputError):
        cl.cal_loss_gradient([a], cl.SURROGATE, [])
    with pytest.raises(InvalidInputError):
        cl.cal_loss_gradient([a], cl.SURROGATE, [np.zeros(2)])
    with pytest.raises(InvalidInputError):
        cl.cal_loss_gradient([a], cl.SURROGATE, [np.zeros(3)])


def test_gradient_matches_finite_differences_v4():
    gen = np.random.default_rng(1)
    for _ in range(100):
        T = int(gen.integers(1, 5))
        lg = gen.normal(scale=2, size=(T, 4))
        truth = gen.integers(0, 4, size=T)
        mode = cl.TARGET_MODES[int(gen.integers(2))]
        frozen = cl.seq_targets(lg, truth, mode)
        fd = finite_diff_gradient(lambda x: cl.seq_cal_loss_from_logits(x, truth, mode, frozen), lg)
        ctxs = [cl.TokenContext.from_logits(r, int(t)) for r, t in zip(lg, truth)]
        an = np.array([g.d_loss_d_logits for g in cl.cal_loss_gradient(ctxs, mode, lg)]) / T
        assert relative_error(an, fd) <= 1e-6


def test_bce_kernel_gradient_matches_finite_differences():
    gen = np.random.default_rng(2)
    for _ in range(100):
        T, V = int(gen.integers(1, 5)), int(gen.integers(2, 6))
        lg = gen.normal(scale=2, size=(T, V))
        truth = gen.integers(0, V, size=T)
        flip = bool(gen.integers(2))
        states = np.arange(T)[None, :]
        frozen = cl.seq_targets(lg, truth, cl.ONE_MINUS_SURROGATE if flip else cl.SURROGATE)

        def f(x):
            conf = np.max(np.exp(x - x.max(1, keepdims=True)) / np.exp(x - x.max(1, keepdims=True)).sum(1, keepdims=True), 1)
            return float(np.mean([cl.bce_cal_loss(z, c) for z, c in zip(frozen, conf)]))

        g = np.zeros_like(lg)
        val = kernels.seq_calibration(lg, states, truth[None, :], [flip], kernels.CAL_BCE, grad=g)[0]
        assert val == pytest.approx(oracles.cal_loss_seq(lg.tolist(), truth.tolist(), flip, bce=True), abs=1e-13)
        assert relative_error(g, finite_diff_gradient(f, lg)) <= 1e-6


def test_token_bounds_on_random_contexts():
    gen = np.random.default_rng(9)
    lg = gen.normal(scale=3, size=(100_000, 5))
    truth = gen.integers(0, 5, size=100_000)
    c, zt, target, dl_dc, dlog = cl.batch_token_cal_grad(lg, truth, gen.random(100_000) < 0.5)
    assert np.all(np.abs(dl_dc) <= 1.0)
    assert np.all(np.abs(dlog) <= (c * (1 - c))[:, None] + 1e-15)
    assert np.all(c * (1 - c) <= 0.25)


def test_batch_grad_agrees_with_scalar_path():
    gen = np.random.default_rng(4)
    lg = gen.normal(size=(20, 4))
    truth = gen.integers(0, 4, size=20)
    c, zt, target, dl_dc, dlog = cl.batch_token_cal_grad(lg, truth, True)
    for i in range(20):
        t = cl.TokenContext.from_logits(lg[i], int(truth[i]))
        assert zt[i] == pytest.approx(cl.surrogate(t), abs=1e-15)
        g = cl.token_cal_gradient(t, 1 - cl.surrogate(t))
        assert np.max(np.abs(g.d_loss_d_logits - dlog[i])) <= 1e-15
