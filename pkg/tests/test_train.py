import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from petlvit import tensor as T
from petlvit.accounting import predict_count
from petlvit.checkpoint import backbone_digest, checkpoint_digest
from petlvit.data import ToyTaskSpec, make_toy_dataset
from petlvit.petl import PETLSpec
from petlvit.train import (AdamW, DivergenceError, NonFiniteGradient, TrainConfig, evaluate, finetune_with_sweep,
                           lr_at, prepare_finetune, pretrain, train, transfer_experiment)
from petlvit.vit import ParamRegistry, ViTConfig, build_vit, freeze_backbone

import oracles

CFG = ViTConfig(image_size=16, patch_size=4, in_channels=3, dim=16, depth=2, num_heads=2, mlp_dim=32, num_classes=4)


def small_data(shots=8, seed=0, sig=5, classes=4, **kw):
    return make_toy_dataset(ToyTaskSpec(image_size=16, num_classes=classes, shots=shots, val_per_class=2,
                                        test_per_class=4, seed=seed, signature_seed=sig, **kw))


# ---------------------------------------------------------------- schedule

def test_lr_schedule_points():
    assert lr_at(0, 100, 10, 1e-3) == 0.0
    assert lr_at(5, 100, 10, 1e-3) == pytest.approx(5e-4, abs=1e-18)
    assert lr_at(10, 100, 10, 1e-3) == 1e-3
    assert abs(lr_at(55, 100, 10, 1e-3) - 5e-4) <= 1e-12
    last = lr_at(99, 100, 10, 1e-3)
    assert 0 <= last <= 1e-3 * (1 - math.cos(math.pi / 90)) / 2 + 1e-18


@given(st.integers(1, 500), st.data())
def test_lr_nonnegative_and_continuous(total, data):
    warm = data.draw(st.integers(0, total))
    vals = [lr_at(s, total, warm, 1.0) for s in range(total)]
    assert all(v >= 0 for v in vals) and max(vals) <= 1.0
    if 0 < warm < total:
        assert abs(lr_at(warm, total, warm, 1.0) - lr_at(warm - 1, total, warm, 1.0)) <= 1.0 / warm + 1e-12


def test_train_config_invariants():
    with pytest.raises(ValueError, match="warmup"):
        TrainConfig(epochs=2, warmup_epochs=3)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)


# ---------------------------------------------------------------- AdamW

def scalar_registry(value=0.5):
    reg = ParamRegistry()
    reg.add("w", np.array([value]), "test")
    return reg


def run_steps(reg, grads, lr, **kw):
    opt = AdamW(reg, **kw)
    for g in grads:
        reg["w"].grad = np.array([g])
        opt.step(lr)
    return opt


@pytest.mark.parametrize("wd", [0.0, 0.05])
def test_adamw_two_steps_vs_oracle(wd):
    reg = scalar_registry(0.5)
    run_steps(reg, [0.3, -1.2], 0.01, weight_decay=wd)
    assert abs(reg["w"].data[0] - oracles.adam_two_steps(0.5, [0.3, -1.2], 0.01, wd=wd)) <= 1e-12


def test_adamw_zero_lr_is_bitwise_noop():
    reg = scalar_registry(0.123)
    before = reg["w"].data.tobytes()
    opt = run_steps(reg, [1.0, 2.0], 0.0, weight_decay=0.1)
    assert reg["w"].data.tobytes() == before
    assert opt.m["w"][0] != 0 and opt.v["w"][0] != 0


def test_adamw_constant_gradient_step_tends_to_lr():
    reg = scalar_registry(0.0)
    opt = AdamW(reg)
    prev = 0.0
    for _ in range(3000):
        reg["w"].grad = np.array([0.7])
        opt.step(1e-3)
        step, prev = reg["w"].data[0] - prev, reg["w"].data[0]
    assert step == pytest.approx(-1e-3, rel=1e-4)


def test_adamw_nan_gradient_names_param():
    reg = scalar_registry()
    reg["w"].grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradient, match="w"):
        AdamW(reg).step(1e-3)


def test_adamw_skips_frozen():
    reg = scalar_registry()
    reg.add("f", np.ones(2), "test", frozen=True)
    reg["f"].grad = np.ones(2)
    reg["w"].grad = np.ones(1)
    AdamW(reg, weight_decay=0.5).step(0.1)
    assert np.array_equal(reg["f"].data, np.ones(2))


# ---------------------------------------------------------------- train loop

def test_zero_epochs_leave_model_unchanged():
    model = build_vit(CFG)
    freeze_backbone(model.registry, "full")
    before = checkpoint_digest(model)
    log = train(model, small_data(), TrainConfig(epochs=0, warmup_epochs=0))
    assert log.rows == [] and checkpoint_digest(model) == before


def test_empty_dataset_rejected():
    ds = small_data()
    ds.train = dataclasses.replace(ds.train, images=ds.train.images[:0], labels=ds.train.labels[:0])
    with pytest.raises(ValueError, match="empty"):
        train(build_vit(CFG), ds, TrainConfig(epochs=1, warmup_epochs=0))


def test_divergence_aborts():
    model = build_vit(CFG)
    model.registry["head.weight"].data[...] = np.inf
    with pytest.raises(DivergenceError), np.errstate(invalid="ignore"):
        train(model, small_data(), TrainConfig(epochs=1, warmup_epochs=0))


def test_first_batch_loss_is_log_classes():
    model = build_vit(CFG)
    model.registry["head.weight"].data[...] = 0
    freeze_backbone(model.registry, "frozen")
    ds = small_data(shots=16)
    log = train(model, ds, TrainConfig(epochs=1, warmup_epochs=1, batch_size=len(ds.train)))
    assert abs(log.rows[0].train_loss - math.log(4)) <= 0.1


def test_frozen_bytes_and_metrics_csv():
    base = build_vit(CFG, seed=1)
    model = prepare_finetune(base, PETLSpec(method="convpass", h=4, s=1.0), 4, seed=0)
    before = backbone_digest(model)
    log = train(model, small_data(), TrainConfig(epochs=3, warmup_epochs=1, batch_size=8))
    assert backbone_digest(model) == before
    lines = log.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_acc,lr" and len(lines) == 4


def test_identical_seeds_identical_runs():
    def run():
        model = prepare_finetune(build_vit(CFG, seed=2), PETLSpec(method="adapter", h=4), 4, seed=3)
        log = train(model, small_data(), TrainConfig(epochs=3, warmup_epochs=1, batch_size=8, seed=3))
        return log, checkpoint_digest(model)

    (la, da), (lb, db) = run(), run()
    assert la == lb and da == db


def test_best_epoch_state_is_restored():
    model = build_vit(CFG)
    freeze_backbone(model.registry, "full")
    ds = small_data()
    log = train(model, ds, TrainConfig(epochs=4, warmup_epochs=1, batch_size=8))
    assert evaluate(model, ds.val) == log.best_val == max(r.val_acc for r in log.rows)
    assert log.best_epoch == min(r.epoch for r in log.rows if r.val_acc == log.best_val)


@pytest.mark.slow
def test_full_finetune_converges():
    ds = make_toy_dataset(ToyTaskSpec(image_size=16, num_classes=4, shots=200, val_per_class=20, test_per_class=50,
                                      seed=0, signature_seed=5))
    model = build_vit(CFG, seed=0)
    freeze_backbone(model.registry, "full")
    train(model, ds, TrainConfig(epochs=50, warmup_epochs=5, seed=0))
    assert evaluate(model, ds.test) >= 0.95


def test_evaluate_is_deterministic():
    model, ds = build_vit(CFG), small_data()
    assert evaluate(model, ds.test) == evaluate(model, ds.test)
    assert math.isnan(evaluate(model, dataclasses.replace(ds.test, images=ds.test.images[:0],
                                                          labels=ds.test.labels[:0])))


# ---------------------------------------------------------------- transfer

def test_sweep_runs_every_s_for_scaled_methods():
    base = build_vit(CFG)
    cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=16, s_grid=(0.1, 1.0, 10.0))
    _, best, rows = finetune_with_sweep(base, PETLSpec(method="convpass", h=2), small_data(), cfg)
    assert [r.s for r in rows] == [0.1, 1.0, 10.0]
    assert best.val_acc == max(r.val_acc for r in rows)
    assert rows.index(best) == [r.val_acc for r in rows].index(best.val_acc)
    _, _, rows = finetune_with_sweep(base, PETLSpec(method="linear"), small_data(), cfg)
    assert len(rows) == 1


def test_transfer_structure():
    vit = dataclasses.replace(CFG, depth=1)
    src = ToyTaskSpec(image_size=16, num_classes=3, shots=8, val_per_class=2, test_per_class=4, signature_seed=1)
    tgt = dataclasses.replace(src, num_classes=4, signature_seed=2)
    specs = [PETLSpec(method=m, h=2) for m in ("none", "linear", "convpass")]
    short = TrainConfig(epochs=2, warmup_epochs=1, batch_size=16, s_grid=(1.0,))
    res = transfer_experiment(vit, src, tgt, specs, short, short)
    none, linear, conv = res.rows
    assert dataclasses.replace(none, method="linear") == linear
    assert conv.trainable == conv.predicted == predict_count(specs[2], vit)
    assert len(res.to_csv().splitlines()) == 4
    with pytest.raises(ValueError, match="signatures"):
        transfer_experiment(vit, src, src, specs, short, short)


def test_pretrain_trains_everything():
    model, log = pretrain(CFG, small_data(classes=3), TrainConfig(epochs=1, warmup_epochs=0, batch_size=16))
    assert model.cfg.num_classes == 3 and len(model.registry.trainable()) == len(model.registry)
    assert len(log.rows) == 1


def test_loss_matches_manual_cross_entropy():
    model, ds = build_vit(CFG, dtype=np.float64), small_data()
    x = ds.train.images[:5].astype(np.float64)
    logits = model(x).data
    logz = np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1)) + logits.max(1)
    want = np.mean(logz - logits[np.arange(5), ds.train.labels[:5]])
    assert T.cross_entropy(model(x), ds.train.labels[:5]).item() == pytest.approx(want, abs=1e-12)
