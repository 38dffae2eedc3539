import json

import numpy as np
import pytest

from querypatch import (AttackAborted, AttackConfig, BrightnessOracle,
                        BuiltinOracle, ConsistencyError, GeometryError,
                        LabeledDataset, Patch, ProtocolError, Rng, StopRule,
                        TransformConfig, UniformOracle, ZoHyperParams, eot_loss,
                        init_patch, make_mask, patched_accuracy, read_report,
                        save_patch_bundle, train_patch)
from querypatch.attack import config_hash, save_attack_artifacts
from querypatch.zo import read_history_csv


def _tiny_dataset(n=12, side=8, seed=0):
    gen = np.random.default_rng(seed)
    images = np.round(gen.uniform(size=(n, side, side, 1)) * 255) / 255
    labels = (np.arange(n) % 2).astype(np.int64)
    return LabeledDataset(images=images.astype(np.float32), labels=labels,
                          num_classes=2)


def _cfg(**kw):
    base = dict(patch_side=3, channels=1,
                transform=TransformConfig(location=(4.0, 4.0)),
                batch_size=4, eot_samples=1,
                hyper=ZoHyperParams(q=2, alpha=0.1, mu=0.05),
                budget=500, seed=1)
    base.update(kw)
    return AttackConfig(**base)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError, match="target"):
        _cfg(mode="targeted")  # no target class
    with pytest.raises(ValueError, match="target"):
        _cfg(mode="untargeted", target_class=1)
    with pytest.raises(ValueError):
        _cfg(budget=0)
    with pytest.raises(ValueError):
        _cfg(patch_side=0)
    with pytest.raises(ValueError):
        _cfg(eot_samples=0)


def test_stop_rule_validation():
    with pytest.raises(ValueError):
        StopRule(kind="accuracy")  # missing threshold
    with pytest.raises(ValueError):
        StopRule(kind="accuracy", threshold=1.5)
    with pytest.raises(ValueError):
        StopRule(kind="budget", threshold=0.3)
    with pytest.raises(ValueError):
        StopRule(kind="whenever")
    assert StopRule(kind="loss", threshold=-2.0).threshold == -2.0


def test_config_dict_round_trip():
    cfg = _cfg(mode="targeted", target_class=1,
               stop=StopRule(kind="loss", threshold=-1.0))
    back = AttackConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)
    assert config_hash(_cfg(seed=2)) != config_hash(_cfg(seed=3))


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_patch_kinds(tmp_path):
    gray = init_patch(4, 1, "gray", Rng(0))
    assert np.all(gray.pixels == 0.5)
    r1 = init_patch(4, 1, "random", Rng(7))
    r2 = init_patch(4, 1, "random", Rng(7))
    assert np.array_equal(r1.pixels, r2.pixels)
    assert not np.array_equal(r1.pixels, init_patch(4, 1, "random", Rng(8)).pixels)

    save_patch_bundle(tmp_path / "b", gray)
    loaded = init_patch(4, 1, str(tmp_path / "b"), Rng(0))
    assert np.allclose(loaded.pixels, 0.5, atol=1 / 255)  # 8-bit quantization
    with pytest.raises(ConsistencyError):
        init_patch(6, 1, str(tmp_path / "b"), Rng(0))


# ---------------------------------------------------------------------------
# the EOT loss
# ---------------------------------------------------------------------------

def test_loss_decomposes_over_draws():
    d = _tiny_dataset()
    oracle = BrightnessOracle((8, 8, 1))
    cfg_multi = _cfg(eot_samples=4)
    cfg_single = _cfg(eot_samples=1)
    batch = (d.images[:4], d.labels[:4])
    vec = np.full(9, 0.7)

    multi = eot_loss(vec, batch, oracle, cfg_multi, Rng(99))
    shared = Rng(99)  # same stream walked by four single-draw calls
    singles = [eot_loss(vec, batch, oracle, cfg_single, shared) for _ in range(4)]
    assert multi == pytest.approx(np.mean(singles), abs=1e-12)


def test_loss_modes_and_signs():
    d = _tiny_dataset()
    oracle = BrightnessOracle((8, 8, 1))
    batch = (d.images[:4], d.labels[:4])
    bright = np.ones(9)
    dark = np.zeros(9)
    cfg_t = _cfg(mode="targeted", target_class=1)
    # brighter patch raises P(class 1): targeted loss -log p_1 must drop
    assert eot_loss(bright, batch, oracle, cfg_t, Rng(0)) < \
           eot_loss(dark, batch, oracle, cfg_t, Rng(0))
    # untargeted loss is the mean log p_true, so it is always <= 0
    assert eot_loss(bright, batch, oracle, _cfg(), Rng(0)) <= 0.0


def test_loss_clamps_out_of_box_pixels():
    d = _tiny_dataset()
    oracle = BrightnessOracle((8, 8, 1))
    batch = (d.images[:4], d.labels[:4])
    inside = eot_loss(np.ones(9), batch, oracle, _cfg(), Rng(1))
    outside = eot_loss(np.full(9, 3.7), batch, oracle, _cfg(), Rng(1))
    assert inside == outside  # rendering clamps to [0,1]


def test_loss_deterministic_given_rng():
    d = _tiny_dataset()
    oracle = BrightnessOracle((8, 8, 1))
    batch = (d.images[:6], d.labels[:6])
    cfg = _cfg(transform=TransformConfig(theta_max=0.4, scale_range=(0.8, 1.2)))
    a = eot_loss(np.full(9, 0.3), batch, oracle, cfg, Rng(5))
    b = eot_loss(np.full(9, 0.3), batch, oracle, cfg, Rng(5))
    assert a == b


def test_loss_empty_batch():
    oracle = BrightnessOracle((8, 8, 1))
    with pytest.raises(ValueError):
        eot_loss(np.zeros(9), (np.zeros((0, 8, 8, 1)), np.zeros(0, dtype=int)),
                 oracle, _cfg(), Rng(0))


# ---------------------------------------------------------------------------
# train_patch
# ---------------------------------------------------------------------------

def test_attack_runs_and_reports(mlp_model, digits_tiny):
    oracle = BuiltinOracle(mlp_model, "mlp")
    cfg = AttackConfig(patch_side=4, channels=1,
                       transform=TransformConfig(location=(13.0, 13.0)),
                       batch_size=8, eot_samples=1,
                       hyper=ZoHyperParams(q=3, alpha=0.1, mu=0.1),
                       budget=2000, seed=5)
    res = train_patch(digits_tiny, oracle, cfg)
    assert len(res.history) >= 1
    assert res.queries_used <= cfg.budget
    assert res.queries_used == oracle.query_count
    assert res.final_train_accuracy is not None
    assert 0.0 <= res.final_train_accuracy <= 1.0
    assert res.patch.side == 4
    assert res.stop_reason == "budget"
    assert res.provenance["oracle_id"] == "mlp"
    # history rows count queries in objective evaluations of the optimizer
    assert res.history[-1].step == len(res.history)


def test_attack_budget_for_zero_steps_returns_init(digits_tiny):
    oracle = UniformOracle(10, (28, 28, 1))
    cfg = AttackConfig(patch_side=3, channels=1,
                       transform=TransformConfig(location=(13.0, 13.0)),
                       batch_size=8, eot_samples=1, init="random",
                       hyper=ZoHyperParams(q=5), budget=10, seed=9)
    res = train_patch(digits_tiny, oracle, cfg)
    assert res.history == []
    assert res.final_train_accuracy is None  # nothing left for the final pass
    expect = init_patch(3, 1, "random", Rng(9).spawn("init"))
    assert np.array_equal(res.patch.pixels, expect.pixels)


def test_attack_respects_budget_exactly(mlp_model, digits_tiny):
    oracle = BuiltinOracle(mlp_model, "mlp")
    budget = 3000
    cfg = AttackConfig(patch_side=3, channels=1,
                       transform=TransformConfig(location=(13.0, 13.0)),
                       batch_size=8, eot_samples=2,
                       hyper=ZoHyperParams(q=4), budget=budget, seed=2)
    res = train_patch(digits_tiny, oracle, cfg)
    assert oracle.query_count <= budget
    # with the final accuracy pass reserved, steps fill the rest
    per_step = (4 + 1) * 8 * 2
    assert len(res.history) == (budget - len(digits_tiny)) // per_step


def test_attack_loss_stop(digits_tiny):
    oracle = BrightnessOracle((28, 28, 1))
    cfg = AttackConfig(patch_side=3, channels=1, mode="targeted", target_class=1,
                       transform=TransformConfig(location=(13.0, 13.0)),
                       batch_size=8, eot_samples=1,
                       hyper=ZoHyperParams(q=2, alpha=0.3, mu=0.1),
                       budget=50_000, seed=1,
                       stop=StopRule(kind="loss", threshold=-0.0001))
    res = train_patch(digits_tiny, oracle, cfg)
    # threshold is unreachable (-log p > 0), so this must run to budget
    assert res.stop_reason == "budget"

    cfg2 = AttackConfig(patch_side=3, channels=1, mode="targeted", target_class=1,
                        transform=TransformConfig(location=(13.0, 13.0)),
                        batch_size=8, eot_samples=1,
                        hyper=ZoHyperParams(q=2, alpha=0.3, mu=0.1),
                        budget=50_000, seed=1,
                        stop=StopRule(kind="loss", threshold=5.0))
    res2 = train_patch(digits_tiny, oracle, cfg2)
    assert res2.stop_reason == "loss"
    assert len(res2.history) == 1  # any loss beats a threshold of 5


def test_attack_accuracy_stop(mlp_model, digits_tiny):
    oracle = BuiltinOracle(mlp_model, "mlp")
    cfg = AttackConfig(patch_side=3, channels=1,
                       transform=TransformConfig(location=(13.0, 13.0)),
                       batch_size=8, eot_samples=1,
                       hyper=ZoHyperParams(q=2), budget=100_000, seed=3,
                       stop=StopRule(kind="accuracy", threshold=1.0),
                       accuracy_check_every=2)
    res = train_patch(digits_tiny, oracle, cfg)
    # threshold 1.0 is satisfied at the first check
    assert res.stop_reason == "accuracy"
    assert len(res.history) == 2
    assert oracle.query_count <= cfg.budget


def test_attack_deterministic(mlp_model, digits_tiny):
    def once():
        oracle = BuiltinOracle(mlp_model, "mlp")
        cfg = AttackConfig(patch_side=3, channels=1,
                           transform=TransformConfig(theta_max=0.3,
                                                     scale_range=(0.9, 1.1)),
                           batch_size=6, eot_samples=2,
                           hyper=ZoHyperParams(q=3), budget=4000, seed=21)
        return train_patch(digits_tiny, oracle, cfg)

    r1, r2 = once(), once()
    assert np.array_equal(r1.patch.pixels, r2.patch.pixels)
    assert r1.history == r2.history
    assert r1.final_train_accuracy == r2.final_train_accuracy


def test_attack_argument_errors(mlp_model, digits_tiny):
    oracle = BuiltinOracle(mlp_model, "mlp")
    with pytest.raises(ValueError, match="target_class 77"):
        train_patch(digits_tiny, oracle,
                    AttackConfig(patch_side=3, channels=1, mode="targeted",
                                 target_class=77,
                                 transform=TransformConfig(location=(13.0, 13.0)),
                                 budget=1000))
    with pytest.raises(GeometryError):
        train_patch(digits_tiny, oracle,
                    AttackConfig(patch_side=40, channels=1, budget=1000))
    with pytest.raises(ConsistencyError):
        train_patch(_tiny_dataset(side=8), oracle,
                    AttackConfig(patch_side=3, channels=1, budget=1000))
    with pytest.raises(ValueError, match="empty"):
        train_patch(digits_tiny.subset(np.array([], dtype=int)), oracle,
                    AttackConfig(patch_side=3, channels=1, budget=1000))


def test_attack_oracle_failure_preserves_history(digits_tiny):
    class Flaky(UniformOracle):
        def _infer(self, batch):
            if self.query_count > 300:
                raise ProtocolError("oracle went sideways")
            return super()._infer(batch)

    oracle = Flaky(10, (28, 28, 1))
    cfg = AttackConfig(patch_side=3, channels=1,
                       transform=TransformConfig(location=(13.0, 13.0)),
                       batch_size=8, eot_samples=1,
                       hyper=ZoHyperParams(q=4), budget=5000, seed=0)
    with pytest.raises(AttackAborted) as exc:
        train_patch(digits_tiny, oracle, cfg)
    assert len(exc.value.history) >= 1  # completed steps survive
    assert exc.value.queries_used > 0


def test_patched_accuracy_brightness(digits_tiny):
    # all-ones patch drives the mean up, so the brightness oracle calls
    # everything class 1: accuracy = share of 1-labels
    oracle = BrightnessOracle((28, 28, 1))
    patch = Patch(pixels=np.ones((20, 20, 1)), mask=make_mask(20))
    acc = patched_accuracy(oracle, digits_tiny, patch,
                           TransformConfig(location=(13.5, 13.5)), Rng(0))
    share_ones = (digits_tiny.labels == 1).mean()
    dark = float((digits_tiny.images.reshape(len(digits_tiny), -1).mean(axis=1)).max())
    if dark < 0.18:  # 20x20 ones over a 28x28 image forces mean > 0.5
        assert acc == pytest.approx(share_ones)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def test_save_attack_artifacts(tmp_path, mlp_model, digits_tiny):
    oracle = BuiltinOracle(mlp_model, "mlp")
    cfg = AttackConfig(patch_side=3, channels=1,
                       transform=TransformConfig(location=(13.0, 13.0)),
                       batch_size=8, eot_samples=1,
                       hyper=ZoHyperParams(q=3), budget=1500, seed=4)
    res = train_patch(digits_tiny, oracle, cfg)
    out = tmp_path / "run"
    save_attack_artifacts(out, res, cfg)

    assert (out / "patch.png").exists()
    assert (out / "mask.png").exists()
    doc = json.loads((out / "attack.json").read_text())
    assert doc["config"]["patch_side"] == 3
    assert doc["config_sha256"] == config_hash(cfg)
    assert doc["steps"] == len(res.history)
    assert doc["queries_used"] == res.queries_used
    hist = read_history_csv(out / "history.csv")
    assert hist == res.history
    meta = json.loads((out / "meta.json").read_text())
    assert meta["provenance"]["oracle_id"] == "mlp"
