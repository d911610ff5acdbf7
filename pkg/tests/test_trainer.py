from dataclasses import replace

import numpy as np
import pytest

from compatseg import trainer
from compatseg.labels import encode_full
from compatseg.losses import CompLossSpec
from compatseg.metrics import DiceResult
from compatseg.net import NetPair, init_params, params_hash
from compatseg.synthdata import DonorError, PartialSample, Sample, partialize
from compatseg.trainer import (Adam, TrainConfig, batch_objective, dual_step, log_csv, make_batch,
                               primal_objective, select_class, swap_pair, train_dcl, train_stage1, _tensors)

M = 3
TINY = TrainConfig(widths=(2, 3, 4), batch_size=4, epochs1=2, epochs2=3, lr1=1e-3, patience=1, head_bias=-1.0)


def tiny_pool(seed: int, n: int = 9, size: int = 8) -> list[PartialSample]:
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        cmap = rng.integers(M, size=(size, size))
        samples.append(Sample(cmap * 0.5 + rng.normal(0, 0.1, size=(size, size)), encode_full(cmap, M)))
    return partialize(samples, 1, seed)


@pytest.fixture(scope="module")
def pool():
    return tiny_pool(0)


def pair_and_batch(pool, cfg, seed=0):
    netcfg = cfg.net_config(M)
    rng = np.random.default_rng(seed)
    pair = NetPair.from_pretrained(init_params(netcfg, seed))
    batch = make_batch(pool, [0, 1, 2], rng, True)
    return pair, batch, netcfg, rng


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lam, cfg.lr1, cfg.lr2, cfg.patience) == (0.2, 1e-2, 1e-4, 10)
        assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize("kw", [dict(lam=1.5), dict(lr1=0.0), dict(objective="x"), dict(patience=0),
                                    dict(objective="positive_ce"), dict(conditionals=False)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_heads(self):
        assert TrainConfig().net_config(4).out_channels == 8
        cfg = TrainConfig(objective="conventional_ce", conditionals=False, prior=False)
        assert cfg.net_config(4).out_channels == 4

    def test_echo(self):
        echo = TrainConfig(dual=True).echo()
        assert echo["lam"] == "0.2" and echo["dual"] == "true" and echo["prior"] == "true"
        assert echo["positive"] == "p_ce" and echo["widths"] == "16 32 64"


def test_adam_descends():
    params = {"w": np.array([3.0, -2.0])}
    opt = Adam(params, 0.1)
    for _ in range(200):
        opt.step(params, {"w": 2 * params["w"]})
    assert np.abs(params["w"]).max() < 0.05


def test_swap_is_involution():
    rng = np.random.default_rng(1)
    t, tm = rng.normal(size=(4, 4)), rng.integers(0, 2, size=(4, 4)).astype(float)
    ci, cm = rng.normal(size=(3, 4, 4)), rng.integers(0, 2, size=(3, 4, 4)).astype(float)
    once = swap_pair(t, tm, ci, cm, 1)
    twice = swap_pair(*once, 1)
    for a, b in zip(twice, (t, tm, ci, cm)):
        assert np.array_equal(a, b)
    assert np.array_equal(once[0], ci[1]) and np.array_equal(once[2][1], t)


def test_batch_without_conditionals(pool):
    batch = make_batch(pool, [0, 1], np.random.default_rng(0), False)
    assert not batch.cond_images.any() and not batch.cond_masks.any()
    assert batch.stacks == [None, None]


def test_objective_normalized_by_batch_size(pool):
    cfg = replace(TINY, prior=False)
    netcfg = cfg.net_config(M)
    batch = make_batch(pool, [0, 1], np.random.default_rng(0), True)
    single = make_batch(pool, [0], np.random.default_rng(0), True)
    theta = _tensors(init_params(netcfg, 0), False)
    pair_obj, z = primal_objective(theta, batch, cfg, netcfg)
    one = batch_objective(z[0:1], batch.labels[:1], batch.stacks[:1], cfg).item()
    two = batch_objective(z[1:2], batch.labels[1:], batch.stacks[1:], cfg).item()
    assert pair_obj.item() == pytest.approx((one + two) / 2, rel=1e-12)
    assert single.labels[0] is batch.labels[0]


class TestDualStep:
    def test_dual_frozen(self, pool):
        cfg = replace(TINY, dual=True)
        pair, batch, netcfg, rng = pair_and_batch(pool, cfg)
        before = params_hash(pair.dual)
        st = dual_step(pair, batch, pool, cfg, netcfg, rng)
        Adam(pair.prim, cfg.lr2).step(pair.prim, st.grads)
        assert params_hash(pair.dual) == before
        assert params_hash(pair.prim) != before

    def test_lambda_zero_is_primal(self, pool):
        cfg = replace(TINY, dual=True, lam=0.0)
        pair, batch, netcfg, rng = pair_and_batch(pool, cfg)
        st = dual_step(pair, batch, pool, cfg, netcfg, rng)
        theta = _tensors(pair.prim, False)
        primal, _ = primal_objective(theta, batch, cfg, netcfg)
        assert st.objective == primal.item()

    def test_lambda_zero_ignores_dual_params(self, pool):
        cfg = replace(TINY, dual=True, lam=0.0)
        pair, batch, netcfg, _ = pair_and_batch(pool, cfg)
        a = dual_step(pair, batch, pool, cfg, netcfg, np.random.default_rng(5))
        pair.dual = {k: v + 0.5 for k, v in pair.dual.items()}
        b = dual_step(pair, batch, pool, cfg, netcfg, np.random.default_rng(5))
        assert a.objective == b.objective

    def test_lambda_one_reaches_primnet(self, pool):
        cfg = replace(TINY, dual=True, lam=1.0)
        pair, batch, netcfg, rng = pair_and_batch(pool, cfg)
        st = dual_step(pair, batch, pool, cfg, netcfg, rng)
        assert max(np.abs(g).max() for g in st.grads.values()) > 0

    def test_affine_in_lambda(self, pool):
        values = []
        lams = (0.0, 0.3, 0.9)
        for lam in lams:
            cfg = replace(TINY, dual=True, lam=lam)
            pair, batch, netcfg, _ = pair_and_batch(pool, cfg)
            values.append(dual_step(pair, batch, pool, cfg, netcfg, np.random.default_rng(3)).objective)
        slope = (values[1] - values[0]) / (lams[1] - lams[0])
        assert values[2] == pytest.approx(values[0] + slope * lams[2], abs=1e-12 * max(1, abs(values[2])))

    def test_soft_mask_and_swapped_target(self, pool):
        cfg = replace(TINY, dual=True)
        pair, batch, netcfg, rng = pair_and_batch(pool, cfg)
        st = dual_step(pair, batch, pool, cfg, netcfg, rng)
        for i, s in enumerate(st.selected):
            assert s in pool[st.dual_targets[i]].kept
            assert np.array_equal(st.dual_images[i][s], batch.images[i])
            soft = st.dual_masks[i][s]
            assert np.all((soft > 0) & (soft <= 1)) and not np.all((soft == 0) | (soft == 1))


def test_class_selection_coverage(pool):
    batch = make_batch(pool, [0], np.random.default_rng(0), True)
    rng = np.random.default_rng(1)
    seen = {select_class(pool, batch.donors[0], rng) for _ in range(200)}
    assert seen == set(range(M))


def test_select_class_without_annotated_donor(pool):
    never = [next(i for i, p in enumerate(pool) if j not in p.kept) for j in range(M)]
    with pytest.raises(DonorError):
        select_class(pool, never, np.random.default_rng(0))


class TestTraining:
    def test_stage1_deterministic(self, pool):
        a, log_a = train_stage1(pool[:6], pool[6:], TINY)
        b, log_b = train_stage1(pool[:6], pool[6:], TINY)
        assert params_hash(a) == params_hash(b)
        assert log_csv(log_a) == log_csv(log_b)
        assert log_csv(log_a).splitlines()[0] == "epoch,stage,loss,val_dice_0,val_dice_1,val_dice_2,sync"

    @pytest.mark.parametrize("objective", ["conventional_ce", "positive_ce"])
    def test_single_head_objectives(self, pool, objective):
        cfg = replace(TINY, objective=objective, conditionals=False, prior=False, epochs1=1)
        params, log = train_stage1(pool[:6], pool[6:], cfg)
        assert params["head.w"].shape[0] == M and len(log) == 1

    def test_zero_stage2_epochs(self, pool):
        cfg = replace(TINY, dual=True, epochs2=0)
        init = init_params(cfg.net_config(M), 4)
        params, log = train_dcl(pool[:6], pool[6:], cfg, init=init)
        assert params_hash(params) == params_hash(init) and log == []

    def test_dcl_reproducible(self, pool, tmp_path):
        cfg = replace(TINY, dual=True, epochs1=2, epochs2=3, patience=2)
        a, log_a = train_dcl(pool[:6], pool[6:], cfg, checkpoint_dir=tmp_path)
        b, log_b = train_dcl(pool[:6], pool[6:], cfg)
        assert params_hash(a) == params_hash(b)
        assert log_csv(log_a) == log_csv(log_b)
        assert any(r.stage == 2 for r in log_a)
        assert (tmp_path / "stage1_best.ckpt").exists()

    def test_patience_sync_schedule(self, pool, monkeypatch):
        # scripted validation Dice: start, then one value per stage-2 epoch
        script = iter([0.5, 0.6, 0.55, 0.55, 0.7, 0.6, 0.6, 0.6, 0.6, 0.9])

        def fake_evaluate(*args, **kwargs):
            v = next(script)
            return DiceResult(np.array([[v, v, 1.0]]))

        monkeypatch.setattr(trainer, "evaluate", fake_evaluate)
        cfg = replace(TINY, dual=True, epochs2=20, patience=2)
        init = init_params(cfg.net_config(M), 0)
        _, log = train_dcl(pool[:6], pool[6:], cfg, init=init)
        assert [r.epoch for r in log if r.sync] == [2, 5]
        assert len(log) == 8  # the window after the second sync brings nothing, so the loop stops
        for r in log:
            if r.sync:
                assert r.prim_hash == r.dual_hash != ""

    def test_missing_donor(self, pool):
        lonely = [p for p in pool if 0 not in p.kept]
        with pytest.raises(DonorError):
            train_stage1(lonely, pool[:2], TINY)

    def test_spec_parse_in_config(self, pool):
        cfg = replace(TINY, loss=CompLossSpec.parse("ta_ce", "ex_ce"), epochs1=1)
        params, _ = train_stage1(pool[:6], pool[6:], cfg)
        assert np.all(np.isfinite(params["head.w"]))
