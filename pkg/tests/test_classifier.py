from __future__ import annotations

import math

import numpy as np
import pytest

from mealsense.classifier import (
    FoodClassifier,
    PatchMerging,
    SwinBlock,
    SwinClassifier1d,
    SwinConfig,
    default_class_names,
    patch_embed,
    shift_mask,
    train_classifier,
    window_merge,
    window_partition,
)
from mealsense.data import FOOD_NAMES
from mealsense.detector import InputStats
from mealsense.errors import ClassAbsent, MissingLabel, ShapeMismatch
from mealsense.nn import Tensor, grad_check
from mealsense.nn import functional as F


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def _zero_params(module) -> None:
    for p in module.parameters():
        p.data[...] = 0.0


# --- config -----------------------------------------------------------------------------------


def test_default_config():
    cfg = SwinConfig()
    assert (cfg.patch_size, cfg.embed_dim, cfg.stage_depths, cfg.stage_heads) == (4, 48, (2, 2), (3, 6))
    assert (cfg.window_size, cfg.mlp_ratio, cfg.num_classes, cfg.patch_dim) == (8, 4, 11, 48)


@pytest.mark.parametrize(
    "kw", [{"seq_len": 130}, {"window_size": 5}, {"stage_heads": (5, 6)}, {"num_classes": 1}, {"stage_heads": (3,)}]
)
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        SwinConfig(**kw)


# --- patch embedding -----------------------------------------------------------------------------


def test_patch_embed_zero_and_identity():
    model = SwinClassifier1d(SwinConfig(), np.random.default_rng(0))
    model.embed.proj.bias.data[...] = 0.0
    assert not patch_embed(model, np.zeros((12, 128))).data.any()
    model.embed.proj.weight.data[...] = np.eye(48)
    x = np.random.default_rng(1).normal(size=(12, 128)).astype(np.float32)
    tokens = patch_embed(model, x).data
    assert tokens.shape == (32, 48)
    np.testing.assert_array_equal(tokens[5], x[:, 20:24].reshape(-1))


def test_patch_embed_grad():
    cfg = SwinConfig(in_channels=3, seq_len=16, embed_dim=6, stage_heads=(3, 6), window_size=2)
    model = SwinClassifier1d(cfg, np.random.default_rng(0)).to_dtype(np.float64)
    x = t64(np.random.default_rng(1).normal(size=(2, 3, 16)), grad=True)
    w = np.random.default_rng(2).normal(size=(2, 4, 6))
    assert grad_check(lambda x, *_: (model.embed(x) * t64(w)).sum(), [x, *model.embed.parameters()]) < 1e-4


# --- windows -------------------------------------------------------------------------------------


FAMILY = [(T, W, s) for T in (8, 16, 32) for W in (2, 4, 8) if T % W == 0 for s in range(W)]


@pytest.mark.parametrize("T,W,shift", FAMILY)
def test_partition_round_trip(T, W, shift):
    x = t64(np.random.default_rng(T + W + shift).normal(size=(2, T, 3)))
    win, mask = window_partition(x, W, shift)
    assert win.shape == (2, T // W, W, 3)
    assert window_merge(win, shift).data.tobytes() == x.data.tobytes()
    assert (mask is None) == (shift == 0)


def test_shift_zero_is_plain_chunking():
    x = t64(np.arange(16, dtype=float).reshape(1, 8, 2))
    win, _ = window_partition(x, 4, 0)
    np.testing.assert_array_equal(win.data[0, 1, :, 0], [8, 10, 12, 14])


def test_wrap_window_example():
    x = t64(np.arange(8, dtype=float).reshape(1, 8, 1))
    win, mask = window_partition(x, 4, 2)
    np.testing.assert_array_equal(win.data[0, 1, :, 0], [6, 7, 0, 1])
    np.testing.assert_array_equal(win.data[0, 0, :, 0], [2, 3, 4, 5])
    assert not mask[0].any()
    blocked = mask[1] < 0
    expected = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]], dtype=bool)
    np.testing.assert_array_equal(blocked, expected)


def test_partition_rejects_bad_shapes():
    with pytest.raises(ShapeMismatch):
        window_partition(t64(np.zeros((1, 10, 2))), 4)
    with pytest.raises(ShapeMismatch):
        window_partition(t64(np.zeros((1, 8, 2))), 4, 4)


@pytest.mark.parametrize("T,W", [(8, 4), (32, 8), (16, 8)])
def test_cross_boundary_weights_vanish(T, W):
    rng = np.random.default_rng(T)
    shift = W // 2
    q = rng.normal(0, 3, size=(T // W, W, 4))
    k = rng.normal(0, 3, size=(T // W, W, 4))
    mask = shift_mask(T, W, shift)
    p = F.attention_weights(q, k, mask)
    assert p[mask < 0].max() < 1e-6
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


# --- blocks ----------------------------------------------------------------------------------------


def test_full_window_matches_global_attention():
    rng = np.random.default_rng(0)
    block = SwinBlock(12, 3, 8, 0, 4, rng)
    x = Tensor(rng.normal(size=(2, 8, 12)).astype(np.float32))
    bias = Tensor(rng.normal(size=(3, 8, 8)).astype(np.float32))
    windowed = block(x, bias, windowed=True).data
    global_ = block(x, bias, windowed=False).data
    assert np.abs(windowed - global_).max() < 1e-5


def test_zero_weights_make_block_identity():
    rng = np.random.default_rng(1)
    block = SwinBlock(12, 3, 4, 2, 4, rng)
    _zero_params(block.attn)
    _zero_params(block.fc1)
    _zero_params(block.fc2)
    x = Tensor(rng.normal(size=(2, 8, 12)).astype(np.float32))
    assert block(x).data.tobytes() == x.data.tobytes()


@pytest.mark.parametrize("shift", [0, 2])
def test_block_grad_reduced(shift):
    rng = np.random.default_rng(2 + shift)
    block = SwinBlock(8, 2, 4, shift, 2, rng).to_dtype(np.float64)
    for p in block.parameters():
        p.data[...] = rng.normal(0, 0.5, p.shape)
    x = t64(rng.normal(size=(1, 8, 8)), grad=True)
    bias = t64(rng.normal(size=(2, 4, 4)), grad=True)
    w = t64(rng.normal(size=(1, 8, 8)))
    assert grad_check(lambda x, b, *_: (block(x, b) * w).sum(), [x, bias, *block.parameters()]) < 1e-4


def test_patch_merging_shape_and_identity():
    rng = np.random.default_rng(0)
    pm = PatchMerging(48, rng)
    assert pm(Tensor(np.zeros((1, 32, 48), dtype=np.float32))).shape == (1, 16, 96)
    pm = PatchMerging(3, rng).to_dtype(np.float64)
    pm.reduction.weight.data[...] = np.eye(6)
    tok = rng.normal(size=(1, 2, 3))
    dup = np.repeat(tok, 2, axis=1)  # tokens 0,1 equal tok[0]; tokens 2,3 equal tok[1]
    out = pm(t64(dup)).data
    pair = np.concatenate([tok[0, 0], tok[0, 0]])
    np.testing.assert_allclose(out[0, 0], (pair - pair.mean()) / np.sqrt(pair.var() + 1e-5), atol=1e-12)
    with pytest.raises(ShapeMismatch):
        pm(t64(np.zeros((1, 3, 3))))


def test_patch_merging_grad():
    rng = np.random.default_rng(5)
    pm = PatchMerging(3, rng).to_dtype(np.float64)
    for p in pm.parameters():
        p.data[...] = rng.normal(size=p.shape)
    x = t64(rng.normal(size=(2, 4, 3)), grad=True)
    w = t64(rng.normal(size=(2, 2, 6)))
    assert grad_check(lambda x, *_: (pm(x) * w).sum(), [x, *pm.parameters()]) < 1e-4


# --- classifier ------------------------------------------------------------------------------------


def fresh(num_classes: int = 11, seed: int = 0) -> FoodClassifier:
    cfg = SwinConfig(num_classes=num_classes)
    return FoodClassifier(cfg, SwinClassifier1d(cfg, np.random.default_rng(seed)),
                          InputStats(np.zeros(12, np.float32), np.ones(12, np.float32)), default_class_names(num_classes))


def test_probabilities_and_initial_loss(small_windows):
    clf = fresh(seed=3)
    ws = small_windows[:40]
    p = clf.probabilities(ws)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)
    assert (p >= 0).all()
    y = np.random.default_rng(0).integers(0, 11, size=len(ws))
    ce = -np.mean(np.log(p[np.arange(len(ws)), y]))
    assert abs(ce - math.log(11)) < 0.1
    same = clf.probabilities([ws[0], ws[0]])
    assert same[0].tobytes() == same[1].tobytes()


def test_head_permutation_permutes_probabilities(small_windows):
    clf = fresh(num_classes=5, seed=1)
    clf.model.head.bias.data[...] = np.random.default_rng(2).normal(size=5)
    before = clf.probabilities(small_windows[:6])
    perm = np.array([3, 0, 4, 1, 2])
    clf.model.head.weight.data[...] = clf.model.head.weight.data[perm]
    clf.model.head.bias.data[...] = clf.model.head.bias.data[perm]
    np.testing.assert_allclose(clf.probabilities(small_windows[:6]), before[:, perm], atol=1e-6)


def test_training_errors(small_windows, small_eating):
    with pytest.raises(MissingLabel):
        train_classifier(small_windows[:50], SwinConfig(num_classes=3), epochs=1)
    only_zero = [w for w in small_eating if w.food_label == 0]
    with pytest.raises(ClassAbsent):
        train_classifier(only_zero, SwinConfig(num_classes=3), epochs=1)


def test_training_is_bit_reproducible(small_eating):
    cfg = SwinConfig(num_classes=3)
    a = train_classifier(small_eating[::6], cfg, epochs=1, seed=4)
    b = train_classifier(small_eating[::6], cfg, epochs=1, seed=4)
    assert a.to_checkpoint().to_bytes() == b.to_checkpoint().to_bytes()


def test_overfit_small_set(small_eating):
    picked = [w for c in range(3) for w in [x for x in small_eating if x.food_label == c][:8]]
    clf = train_classifier(picked, SwinConfig(num_classes=3), epochs=300, lr=1e-3, seed=0)
    pred = clf.probabilities(picked).argmax(axis=1)
    assert (pred == np.array([w.food_label for w in picked])).all()


def test_checkpoint_round_trip(small_eating, tmp_path):
    clf = train_classifier(small_eating[::8], SwinConfig(num_classes=3), epochs=1, seed=0)
    clf.to_checkpoint().save(tmp_path / "c.ckpt")
    from mealsense.nn import Checkpoint

    back = FoodClassifier.from_checkpoint(Checkpoint.load(tmp_path / "c.ckpt"))
    assert back.class_names == list(FOOD_NAMES[:3])
    assert back.cfg == clf.cfg
    ws = small_eating[:5]
    assert back.probabilities(ws).tobytes() == clf.probabilities(ws).tobytes()


def test_rejects_wrong_input_shape():
    model = SwinClassifier1d(SwinConfig(), np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        model(Tensor(np.zeros((1, 6, 128), dtype=np.float32)))


def test_default_names():
    assert default_class_names(11) == list(FOOD_NAMES)
    assert default_class_names(12)[-1] == "class 11"
