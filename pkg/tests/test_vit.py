import dataclasses

import numpy as np
import pytest

from petlvit import tensor as T
from petlvit.gradcheck import block_checks
from petlvit.train import AdamW
from petlvit.vit import (VIT_B16, ParamRegistry, ViTConfig, build_vit, freeze_backbone, is_backbone, mhsa_block,
                         mlp_block, patch_embed, reset_head)

import oracles

TINY = ViTConfig(image_size=32, patch_size=8, in_channels=3, dim=16, depth=2, num_heads=2, mlp_dim=32,
                 num_classes=5)


def images(n=2, cfg=TINY, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal((n, cfg.in_channels, cfg.image_size, cfg.image_size)
                                                        ).astype(dtype)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ViTConfig(dim=30, num_heads=4)
    with pytest.raises(ValueError, match="patch_size"):
        ViTConfig(image_size=30, patch_size=8)
    with pytest.raises(ValueError, match="mlp_dim"):
        ViTConfig(dim=16, mlp_dim=8)


def test_token_counts():
    assert VIT_B16.num_tokens == 197
    assert TINY.num_tokens == 17


def test_patch_embed_shape_and_zero_case():
    model = build_vit(TINY)
    assert patch_embed(T.Tensor(images()), TINY, model.registry).shape == (2, 17, 16)
    reg = model.registry
    for name in ("patch_embed.weight", "patch_embed.bias", "cls_token"):
        reg[name].data = np.zeros_like(reg[name].data)
    out = patch_embed(T.Tensor(np.zeros((3, 3, 32, 32), np.float32)), TINY, reg).data
    assert np.array_equal(out, np.broadcast_to(reg["pos_embed"].data, (3, 17, 16)))


def test_patch_embed_rejects_wrong_size():
    with pytest.raises(T.ShapeError, match="expected images"):
        patch_embed(T.Tensor(np.zeros((1, 3, 16, 16))), TINY, build_vit(TINY).registry)


def test_patch_embed_patch_order():
    """Token 1 + r*n + c holds patch (r, c), flattened channel-major."""
    cfg = ViTConfig(image_size=4, patch_size=2, in_channels=1, dim=4, depth=0, num_heads=1, mlp_dim=4)
    reg = build_vit(cfg, dtype=np.float64).registry
    reg["patch_embed.weight"].data = np.eye(4)
    for name in ("patch_embed.bias", "cls_token", "pos_embed"):
        reg[name].data = np.zeros_like(reg[name].data)
    img = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = patch_embed(T.Tensor(img), cfg, reg).data[0]
    assert np.array_equal(out[1], [0, 1, 4, 5])
    assert np.array_equal(out[2], [2, 3, 6, 7])
    assert np.array_equal(out[3], [8, 9, 12, 13])


def _mhsa_params(rng, d, zero_bias=False):
    p = {}
    for n in ("q", "k", "v", "proj"):
        p[f"{n}.weight"] = rng.standard_normal((d, d)) * 0.5
        p[f"{n}.bias"] = np.zeros(d) if zero_bias else rng.standard_normal(d) * 0.1
    return p


def _t(p):
    return {k: T.Tensor(v) for k, v in p.items()}


def test_mhsa_single_token_reduces_to_value_path():
    rng = np.random.default_rng(1)
    p = _mhsa_params(rng, 8, zero_bias=True)
    x = rng.standard_normal((1, 1, 8))
    out = mhsa_block(T.Tensor(x), _t(p), 2).data
    assert np.allclose(out, x @ p["v.weight"] @ p["proj.weight"], atol=1e-13)


def test_mhsa_zero_value_weights_gives_bias_only():
    rng = np.random.default_rng(2)
    p = _mhsa_params(rng, 8)
    p["v.weight"] = np.zeros((8, 8))
    out = mhsa_block(T.Tensor(rng.standard_normal((1, 4, 8))), _t(p), 2).data
    expect = p["v.bias"] @ p["proj.weight"] + p["proj.bias"]
    assert np.allclose(out, np.broadcast_to(expect, out.shape), atol=1e-13)


def test_mhsa_matches_elementwise_formula():
    rng = np.random.default_rng(3)
    p = _mhsa_params(rng, 8)
    x = rng.standard_normal((1, 4, 8))
    got = mhsa_block(T.Tensor(x), _t(p), 2).data[0]
    want = oracles.mhsa_elementwise(x[0], *(p[f"{n}.{w}"] for n in ("q", "k", "v", "proj")
                                            for w in ("weight", "bias")), heads=2)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_mlp_block_cases():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4))
    p = {"fc1.weight": rng.standard_normal((4, 6)), "fc1.bias": rng.standard_normal(6),
         "fc2.weight": np.zeros((6, 4)), "fc2.bias": np.zeros(4)}
    assert np.array_equal(mlp_block(T.Tensor(x), _t(p)).data, np.zeros((2, 3, 4)))
    eye = {"fc1.weight": np.eye(2), "fc1.bias": np.zeros(2), "fc2.weight": np.eye(2), "fc2.bias": np.zeros(2)}
    assert np.array_equal(mlp_block(T.Tensor(np.zeros((1, 1, 2))), _t(eye)).data, np.zeros((1, 1, 2)))
    p["fc2.weight"], p["fc2.bias"] = rng.standard_normal((6, 4)), rng.standard_normal(4)
    want = oracles.mlp_formula(x, p["fc1.weight"], p["fc1.bias"], p["fc2.weight"], p["fc2.bias"])
    assert np.max(np.abs(mlp_block(T.Tensor(x), _t(p)).data - want)) <= 1e-12


def test_depth_zero_forward():
    cfg = dataclasses.replace(TINY, depth=0)
    model = build_vit(cfg, dtype=np.float64)
    x = images(dtype=np.float64)
    reg = model.registry
    tokens = patch_embed(T.Tensor(x), cfg, reg).data
    cls = oracles.layernorm_ref(tokens[:, 0], reg["norm.weight"].data, reg["norm.bias"].data)
    want = cls @ reg["head.weight"].data + reg["head.bias"].data
    assert np.allclose(model(x).data, want, atol=1e-12)


def test_all_zero_weights_logits_equal_head_bias():
    model = build_vit(TINY)
    bias = np.arange(5, dtype=np.float32)
    for name in model.registry:
        model.registry[name].data = np.zeros_like(model.registry[name].data)
    model.registry["head.bias"].data = bias
    out = model(images(3)).data
    assert np.array_equal(out, np.broadcast_to(bias, (3, 5)))


def test_forward_deterministic_bitwise():
    a = build_vit(TINY, seed=7)(images()).data
    b = build_vit(TINY, seed=7)(images()).data
    assert a.tobytes() == b.tobytes()


def test_registry_order_and_uniqueness():
    reg = build_vit(TINY).registry
    names = list(reg)
    assert names[0] == "patch_embed.weight" and names[-1] == "head.bias"
    assert len(names) == len(set(names))
    with pytest.raises(KeyError):
        reg.add("cls_token", np.zeros((1, 16)), "zeros")


def test_freeze_modes():
    reg = build_vit(TINY).registry
    freeze_backbone(reg, "frozen")
    assert {n for n, _ in reg.trainable()} == {"head.weight", "head.bias"}
    freeze_backbone(reg, "bitfit")
    trainable = {n for n, _ in reg.trainable()}
    assert all(n.endswith(".bias") for n in trainable - {"head.weight"})
    assert "blocks.0.attn.q.bias" in trainable and "blocks.1.norm2.bias" in trainable
    freeze_backbone(reg, "full")
    assert len(reg.trainable()) == len(reg)
    for name in reg:
        assert reg[name].requires_grad == (not reg.is_frozen(name))


def test_frozen_backbone_unchanged_after_100_steps():
    model = build_vit(TINY)
    freeze_backbone(model.registry, "frozen")
    before = {n: model.registry[n].data.tobytes() for n in model.registry if is_backbone(n)}
    opt = AdamW(model.registry, weight_decay=0.1)
    x, y = images(4), np.array([0, 1, 2, 3])
    for _ in range(100):
        model.registry.zero_grad()
        T.cross_entropy(model(x), y).backward()
        opt.step(1e-2)
    assert all(model.registry[n].data.tobytes() == b for n, b in before.items())
    assert all(model.registry[n].grad is None for n in before)


def test_head_gradient_nonzero():
    model = build_vit(TINY)
    T.cross_entropy(model(images()), np.array([0, 1])).backward()
    assert np.abs(model.registry["head.weight"].grad).sum() > 0


def test_reset_head_keeps_position():
    reg = build_vit(TINY).registry
    names = list(reg)
    reset_head(reg, 3, seed=0)
    assert list(reg) == names
    assert reg["head.weight"].shape == (16, 3) and np.array_equal(reg["head.bias"].data, np.zeros(3))


def test_abstract_registry_is_shape_only():
    reg = build_vit(VIT_B16, abstract=True).registry
    assert reg["blocks.11.mlp.fc1.weight"].shape == (768, 3072)
    assert reg["blocks.11.mlp.fc1.weight"].data.strides == (0, 0)


def test_registry_copy_is_independent():
    reg = build_vit(TINY).registry
    cp = reg.copy()
    cp["cls_token"].data[...] = 1.0
    assert not np.array_equal(reg["cls_token"].data, cp["cls_token"].data)
    assert isinstance(cp, ParamRegistry) and list(cp) == list(reg)


@pytest.mark.parametrize("result", block_checks(0), ids=lambda r: r.name)
def test_block_gradients(result):
    assert result.ok, result.max_rel_err
