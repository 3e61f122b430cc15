import numpy as np
import pytest

from bpclab import kernels, synthdata
from bpclab import preference as pref
from bpclab.errors import DivergenceError, InvalidInputError
from bpclab.policy import TabularPolicy, TrainConfig, sft_loss
from bpclab.training import PairBatch, SequenceBatch, dpo_margins, pair_objective, sft_objective, train


@pytest.fixture(scope="module")
def task():
    spec = synthdata.TaskSpec(num_prompts=12, seed=3)
    ds = synthdata.generate_tasks(spec)
    sft = train(
        TabularPolicy.zeros(spec.num_prompts, spec.vocab_size),
        TrainConfig("sft", eta=5.0, epochs=5, batch_size=16, seed=1),
        sft_examples=ds.sft_split("train"),
    ).policy
    return spec, ds, sft


def test_batched_objectives_match_per_example_losses(task):
    spec, ds, sft = task
    p = TabularPolicy(sft.logits + np.random.default_rng(0).normal(scale=0.3, size=sft.logits.shape))
    pairs = ds.pair_split("train")[:9]
    batch = PairBatch.build(p, sft, pairs)
    for lam, kind, name in [(0.0, kernels.CAL_L1, "l1"), (0.3, kernels.CAL_L1, "l1"), (0.3, kernels.CAL_BCE, "bce")]:
        g = np.zeros_like(p.flat)
        got = pair_objective(p.flat, batch, 0.1, lam, kind, g)
        ref_g = np.zeros_like(p.logits)
        want = np.mean([pref.joint_loss(p, sft, pr, 0.1, lam, ref_g, name) for pr in pairs])
        assert got == pytest.approx(want, rel=1e-12)
        assert np.allclose(g, ref_g.reshape(g.shape) / len(pairs), atol=1e-14)
    m = dpo_margins(p.flat, batch, 0.1)
    assert np.allclose(m, pref.dpo_margins(p, sft, pairs, 0.1), atol=1e-14)
    ex = ds.sft_split("train")[:7]
    sb = SequenceBatch.build(p, ex)
    assert sft_objective(p.flat, sb, 0.1) == pytest.approx(np.mean([sft_loss(p, c, s, 0.1) for c, s in ex]), rel=1e-12)


def test_lambda_zero_is_bitwise_dpo(task):
    spec, ds, sft = task
    pairs = ds.pair_split("train")
    kw = dict(pairs=pairs, reference=sft, stream_tag="preference")
    a = train(sft, TrainConfig("dpo", eta=5.0, epochs=4, batch_size=8, seed=2), **kw)
    b = train(sft, TrainConfig("dpo_bpc", lam=0.0, eta=5.0, epochs=4, batch_size=8, seed=2), **kw)
    assert a.policy == b.policy
    assert a.losses == b.losses
    c = train(sft, TrainConfig("dpo_bpc", lam=0.1, eta=5.0, epochs=4, batch_size=8, seed=2), **kw)
    assert not c.policy == a.policy


def test_delta_min_and_selection(task):
    spec, ds, sft = task
    scores = iter([3.0, 1.0, 2.0, 1.0])
    r = train(
        sft,
        TrainConfig("dpo", eta=5.0, epochs=4, batch_size=8, seed=2),
        pairs=ds.pair_split("train"),
        reference=sft,
        select=lambda p: next(scores),
    )
    assert len(r.delta_min) == 4 and r.best_epoch == 1
    assert r.scores == [3.0, 1.0, 2.0, 1.0]
    last = train(
        sft, TrainConfig("dpo", eta=5.0, epochs=4, batch_size=8, seed=2), pairs=ds.pair_split("train"), reference=sft
    )
    assert last.best_epoch == 3 and last.delta_min == r.delta_min
    want = float(np.min(pref.dpo_margins(last.policy, sft, ds.pair_split("train"), 0.1)))
    assert last.delta_min[-1] == pytest.approx(want, abs=1e-13)


def test_divergence_is_reported(task):
    spec, ds, sft = task
    with pytest.raises(DivergenceError):
        train(
            sft,
            TrainConfig("dpo", beta=1e308, eta=10.0, epochs=3, batch_size=8),
            pairs=ds.pair_split("train"),
            reference=sft,
        )


def test_missing_data_is_rejected(task):
    spec, ds, sft = task
    with pytest.raises(InvalidInputError):
        train(sft, TrainConfig("sft"), sft_examples=[])
    with pytest.raises(InvalidInputError):
        train(sft, TrainConfig("dpo"), pairs=ds.pair_split("train"))
