import math

import numpy as np
import pytest

from twostage_fsl.data import SyntheticTaskSpec, gen_synthetic
from twostage_fsl.errors import ConfigError, ContractError
from twostage_fsl.eval import evaluate
from twostage_fsl.model import FewShotModel, ModelConfig
from twostage_fsl.tensor import Tensor, load_tensors
from twostage_fsl.trainer import (OptimizerState, TrainConfig, adam_step, read_trace, train, train_stage1,
                                  train_stage2)

SMALL = ModelConfig(mlp_hidden=(16,), feature_dim=16, fv_hidden=8, t11_hidden=(16, 12))


@pytest.fixture(scope="module")
def data():
    return gen_synthetic(SyntheticTaskSpec(n_classes=16, dim=8, samples_per_class=20, box=2.0,
                                           n_validation=3, n_novel=5))


def quick(**kw):
    base = dict(stage1_way=5, stage1_shot=2, stage1_query=3, stage1_episodes=12,
                stage2_way=3, stage2_shot=1, stage2_query=3, stage2_episodes=6,
                checkpoint_every=4, val_every=6, val_episodes=5, val_way=3)
    base.update(kw)
    return TrainConfig(**base)


def test_adam_three_steps_by_hand():
    theta = Tensor(np.array([0.5]))
    grads = [0.2, -0.4, 0.1]
    state = OptimizerState(lr=0.01)
    m = v = 0.0
    expected = 0.5
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        adam_step(state, {"theta": theta}, {"theta": np.array([g])})
    assert theta.data[0] == pytest.approx(expected, abs=1e-12)
    assert state.step == 3


def test_adam_zero_gradient():
    theta = Tensor(np.array([1.0, -2.0]))
    state = OptimizerState()
    adam_step(state, {"w": theta}, {"w": np.array([1.0, 1.0])})
    before = theta.data.copy()
    m_before = state.m["w"].copy()
    adam_step(state, {"w": theta}, {"w": np.zeros(2)})
    np.testing.assert_allclose(state.m["w"], 0.9 * m_before)
    # the decayed first moment still moves the parameter slightly; with m = 0 it would not
    fresh = Tensor(before.copy())
    adam_step(OptimizerState(), {"w": fresh}, {"w": np.zeros(2)})
    np.testing.assert_array_equal(fresh.data, before)


def test_adam_constant_gradient_steps_at_lr():
    theta = Tensor(np.array([0.0]))
    state = OptimizerState(lr=1e-3)
    prev = 0.0
    for _ in range(200):
        adam_step(state, {"w": theta}, {"w": np.array([3.7])})
        step = prev - theta.data[0]
        prev = theta.data[0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_adam_missing_gradient():
    with pytest.raises(ContractError):
        adam_step(OptimizerState(), {"w": Tensor(np.ones(2))})


def test_lr_schedule():
    c = TrainConfig(lr=1e-3, lr_halve_every=2000)
    assert c.lr_at(0) == 1e-3 and c.lr_at(1999) == 1e-3
    assert c.lr_at(2000) == 5e-4 and c.lr_at(4500) == 2.5e-4
    assert TrainConfig(lr_halve_every=0).lr_at(10**6) == 1e-3


def strip_time(rows):
    return [{k: v for k, v in r.items() if k != "wallclock_ms"} for r in rows]


def test_training_is_deterministic(tmp_path, data):
    outs = []
    for name in ("a", "b"):
        model = FewShotModel((8,), SMALL, seed=3)
        train(quick(seed=3), data, model, tmp_path / name)
        outs.append(tmp_path / name)
    for f in ("stage1.ckpt", "model.ckpt", "stage1_last.ckpt", "stage2_last.ckpt"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
    for f in ("trace_stage1.csv", "trace_stage2.csv"):
        assert strip_time(read_trace(outs[0] / f)) == strip_time(read_trace(outs[1] / f))


def test_resume_matches_uninterrupted_run(tmp_path, data):
    full = FewShotModel((8,), SMALL, seed=1)
    train(quick(seed=1), data, full, tmp_path / "full")

    part = FewShotModel((8,), SMALL, seed=1)
    train_stage1(quick(seed=1, stage1_episodes=8), data, part, tmp_path / "part")
    (tmp_path / "part" / "stage1.ckpt").unlink()
    resumed = FewShotModel((8,), SMALL, seed=1)
    train(quick(seed=1), data, resumed, tmp_path / "part", resume=True)

    for f in ("stage1.ckpt", "model.ckpt"):
        assert (tmp_path / "full" / f).read_bytes() == (tmp_path / "part" / f).read_bytes(), f
    assert strip_time(read_trace(tmp_path / "full" / "trace_stage1.csv")) == \
        strip_time(read_trace(tmp_path / "part" / "trace_stage1.csv"))


def test_trace_file_layout(tmp_path, data):
    model = FewShotModel((8,), SMALL, seed=0)
    r1, _ = train(quick(), data, model, tmp_path, stage="1")
    lines = (tmp_path / "trace_stage1.csv").read_text().splitlines()
    assert lines[0] == "episode,loss,query_acc,lr,wallclock_ms"
    assert len(lines) == 13
    rows = read_trace(tmp_path / "trace_stage1.csv")
    assert [r["loss"] for r in rows] == [r["loss"] for r in r1.trace]
    assert all(math.isfinite(r["loss"]) for r in rows)


def test_stage2_keeps_stage1_bytes(tmp_path, data):
    model = FewShotModel((8,), SMALL, seed=2)
    train(quick(seed=2), data, model, tmp_path)
    s1 = load_tensors(tmp_path / "stage1.ckpt")
    full = load_tensors(tmp_path / "model.ckpt")
    for k, v in s1.items():
        assert full[k].tobytes() == v.tobytes(), k
    assert not np.array_equal(full["ft/W2"], 0.0)


def test_stage2_first_episode_matches_frozen_accuracy(data):
    from twostage_fsl.episodes import class_mean_features, sample_stage2_episode
    from twostage_fsl.metric import predict
    from twostage_fsl.transform import frozen_class_stats
    from twostage_fsl.metric import PrototypeSet
    model = FewShotModel((8,), SMALL, seed=4)
    cfg = quick(seed=4, stage2_episodes=1)
    train_stage1(cfg, data, model)
    base = data["base"]
    means = class_mean_features(base, model.features, cfg.max_base_samples)
    ep = sample_stage2_episode(base, cfg.stage2_way, cfg.stage2_shot, cfg.stage2_query, model.features,
                               cfg.max_base_samples, rng_seed=[cfg.seed, 2, 0], class_means=means)
    p, s2 = frozen_class_stats(model.extractor, model.fv, ep.support_x, ep.support_y, ep.n_way, True)
    q = model.features(ep.query_x)
    frozen = PrototypeSet(Tensor(p), None, None, Tensor(s2))
    acc = float(np.mean(predict(Tensor(q), frozen, 0.0) == ep.query_y))
    r2 = train_stage2(cfg, data, model)
    assert r2.trace[0]["query_acc"] == acc


def test_stage2_skipped_without_transformer(tmp_path, data):
    model = FewShotModel((8,), ModelConfig(**{**SMALL.__dict__, "use_T": False}), seed=0)
    r1, r2 = train(quick(), data, model, tmp_path)
    assert r2.skipped and r2.trace == []
    assert (tmp_path / "model.ckpt").exists()
    assert not (tmp_path / "trace_stage2.csv").exists()


def test_stage2_alone_needs_stage1_checkpoint(tmp_path, data):
    model = FewShotModel((8,), SMALL, seed=0)
    with pytest.raises(ConfigError, match="stage 1"):
        train(quick(), data, model, tmp_path, stage="2")


def test_validation_keeps_best_checkpoint(tmp_path, data):
    model = FewShotModel((8,), SMALL, seed=0)
    train(quick(), data, model, tmp_path, stage="1")
    assert (tmp_path / "stage1_best.ckpt").exists()
    best = load_tensors(tmp_path / "stage1_best.ckpt")
    final = load_tensors(tmp_path / "stage1.ckpt")
    assert best.keys() == final.keys()
    assert all(best[k].tobytes() == final[k].tobytes() for k in best)


def test_training_improves_on_separable_data():
    d = gen_synthetic(SyntheticTaskSpec(n_classes=20, dim=8, samples_per_class=20, box=1.5,
                                        sigma_lo=0.4, sigma_hi=0.8, n_novel=5))
    model = FewShotModel((8,), SMALL, seed=0)
    cfg = TrainConfig(stage1_way=5, stage1_shot=1, stage1_query=5, stage1_episodes=500,
                      stage2_episodes=60, checkpoint_every=0)
    r1, r2 = train(cfg, d, model)
    accs = [r["query_acc"] for r in r1.trace]
    assert np.mean(accs[-50:]) > accs[0]
    assert np.var(accs) > 0
    untrained = FewShotModel((8,), SMALL, seed=0)
    before = evaluate(untrained, d["novel"], 5, 1, 5, 50, seed=1, base=d["base"]).mean_acc
    after = evaluate(model, d["novel"], 5, 1, 5, 50, seed=1, base=d["base"]).mean_acc
    assert after > before


def test_regression_term_decreases_at_desk_scale():
    # default lambda_r = 1e-4 on the desk-scale synthetic task
    d = gen_synthetic(SyntheticTaskSpec(n_classes=50, dim=32, samples_per_class=100, box=3.0, n_novel=10))
    model = FewShotModel((32,), ModelConfig(), seed=0)
    _, r2 = train(TrainConfig(stage1_episodes=300, checkpoint_every=0), d, model)
    reg = np.array([r["regression"] for r in r2.trace])
    assert reg[-50:].mean() < reg[:50].mean()
