"""Classifier internals: patch layout, analytic gradients against central
differences, training on a separable toy problem, and the weights file."""

from __future__ import annotations

import hashlib
import struct

import numpy as np
import pytest

from conftest import record
from streamgate.catalog import Catalog, Image, save_png
from streamgate.model import (
    ModelConfig,
    ModelError,
    ModelState,
    TrainConfig,
    forward,
    init_state,
    load_model,
    loss_and_gradients,
    patchify,
    predict_catalog,
    save_model,
    train,
)

TOY = dict(input_size=16, patch_size=8, dim=16, heads=2, blocks=1, mlp_ratio=2, seed=0)


def noisy_site_catalog(root, sites, per_site=6):
    """One site per (name, brightness, label) triple; frames are noise around
    the site's brightness, so label follows brightness and nothing else."""
    rng = np.random.default_rng(0)
    recs = []
    for site, level, label in sites:
        for k in range(per_site):
            path = root / site / f"{k}.png"
            pixels = np.clip(rng.normal(level, 10.0, (20, 20, 3)), 0, 255).astype(np.uint8)
            save_png(Image(pixels), path)
            recs.append(record(f"{site}/{k}.png", site=site, hours=k, path=path, label=label))
    return Catalog.from_records(recs)


def test_config_token_and_patch_dims():
    cfg = ModelConfig(**TOY, m=6)
    assert cfg.tokens == 4
    assert cfg.patch_dim == 3 * 8 * 8
    assert cfg.mlp_hidden == 32
    big = ModelConfig(input_size=64, patch_size=8, dim=32, heads=2, blocks=2, m=6)
    assert big.tokens == 64


def test_config_rejects_bad_geometry():
    with pytest.raises(ModelError, match="not divisible"):
        ModelConfig(input_size=65, patch_size=8)
    with pytest.raises(ModelError, match="not divisible by heads"):
        ModelConfig(dim=10, heads=4)
    with pytest.raises(ModelError, match="m must be"):
        ModelConfig(m=1)
    with pytest.raises(ModelError, match="positive"):
        ModelConfig(blocks=0)
    with pytest.raises(ModelError, match="positive"):
        ModelConfig(input_size=0, patch_size=1)


def test_config_round_trip():
    cfg = ModelConfig(input_size=32, patch_size=4, dim=24, heads=3, blocks=3,
                      mlp_ratio=4, m=2, seed=11)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_train_config_validation():
    with pytest.raises(ModelError):
        TrainConfig(epochs=0)
    with pytest.raises(ModelError):
        TrainConfig(batch_size=0)
    with pytest.raises(ModelError, match="lr"):
        TrainConfig(lr=0.0)
    cfg = TrainConfig(epochs=7, batch_size=3, lr=0.01, seed=5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_patchify_matches_direct_slicing():
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
    out = patchify(images, 4)
    assert out.shape == (2, 4, 48)
    assert out.dtype == np.float64
    # tokens run row-major over the patch grid; inside a patch the values
    # run row-major with channel fastest
    for b in range(2):
        for gi in range(2):
            for gj in range(2):
                want = images[b, gi * 4:(gi + 1) * 4, gj * 4:(gj + 1) * 4, :]
                got = out[b, gi * 2 + gj]
                assert np.array_equal(got, want.reshape(-1) / 255.0)


def test_patchify_rejects_bad_shapes():
    with pytest.raises(ModelError, match="expected"):
        patchify(np.zeros((8, 8, 3), dtype=np.uint8), 4)
    with pytest.raises(ModelError, match="expected"):
        patchify(np.zeros((1, 8, 8, 4), dtype=np.uint8), 4)
    with pytest.raises(ModelError, match="square"):
        patchify(np.zeros((1, 8, 12, 3), dtype=np.uint8), 4)
    with pytest.raises(ModelError, match="square"):
        patchify(np.zeros((1, 10, 10, 3), dtype=np.uint8), 4)


def test_init_state_is_deterministic():
    a = init_state(ModelConfig(**TOY, m=6))
    b = init_state(ModelConfig(**TOY, m=6))
    assert set(a.params) == set(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    other = init_state(ModelConfig(input_size=16, patch_size=8, dim=16, heads=2,
                                   blocks=1, mlp_ratio=2, m=6, seed=1))
    assert not np.array_equal(a.params["patch_w"], other.params["patch_w"])
    assert np.array_equal(a.params["block0.ln1_g"], np.ones(16))
    assert np.array_equal(a.params["head_b"], np.zeros(6))
    assert np.array_equal(a.params["patch_b"], np.zeros(16))


def test_init_tensor_shapes():
    cfg = ModelConfig(input_size=64, patch_size=8, dim=32, heads=4, blocks=2,
                      mlp_ratio=2, m=6)
    state = init_state(cfg)
    assert state.params["patch_w"].shape == (cfg.patch_dim, 32)
    assert state.params["pos"].shape == (64, 32)
    assert state.params["head_w"].shape == (32, 6)
    assert state.params["block1.mlp_w1"].shape == (32, 64)
    assert "block2.wq" not in state.params


def test_forward_returns_probabilities():
    state = init_state(ModelConfig(**TOY, m=6))
    rng = np.random.default_rng(2)
    images = rng.integers(0, 256, (5, 16, 16, 3), dtype=np.uint8)
    probs, cache = forward(state, images)
    assert cache is None
    assert probs.shape == (5, 6)
    assert np.all(probs > 0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    _, cache = forward(state, images, want_cache=True)
    assert cache is not None and "pooled" in cache


def test_fresh_weights_predict_near_uniform():
    # init scale is 0.02, so an untrained head should sit close to 1/m
    state = init_state(ModelConfig(input_size=16, patch_size=8, dim=16, heads=2,
                                   blocks=2, mlp_ratio=2, m=6, seed=7))
    rng = np.random.default_rng(7)
    images = rng.integers(0, 256, (8, 16, 16, 3), dtype=np.uint8)
    probs, _ = forward(state, images)
    assert np.abs(probs - 1.0 / 6.0).max() < 0.02


def test_forward_batch_composition_invariant():
    # the contract is numerical, not bitwise: summation order may differ
    # between batched and single-frame matmuls
    state = init_state(ModelConfig(**TOY, m=6))
    rng = np.random.default_rng(3)
    images = rng.integers(0, 256, (7, 16, 16, 3), dtype=np.uint8)
    batched, _ = forward(state, images)
    singles = np.vstack([forward(state, images[i:i + 1])[0] for i in range(7)])
    np.testing.assert_allclose(batched, singles, rtol=0.0, atol=1e-10)


def test_gradients_match_central_differences():
    cfg = ModelConfig(input_size=8, patch_size=4, dim=4, heads=1, blocks=1,
                      mlp_ratio=2, m=2, seed=3)
    state = init_state(cfg)
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
    targets = np.array([0, 1])
    _, grads = loss_and_gradients(state, images, targets)
    h = 1e-5
    for name in sorted(state.params):
        flat = state.params[name].reshape(-1)
        for c in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            keep = flat[c]
            flat[c] = keep + h
            up, _ = loss_and_gradients(state, images, targets)
            flat[c] = keep - h
            down, _ = loss_and_gradients(state, images, targets)
            flat[c] = keep
            numeric = (up - down) / (2.0 * h)
            analytic = grads[name].reshape(-1)[c]
            diff = abs(numeric - analytic)
            rel = diff / max(abs(numeric), abs(analytic), 1e-300)
            assert diff < 1e-8 or rel < 1e-4, f"{name}[{c}]: {numeric} vs {analytic}"


def test_gradient_targets_shape_guard():
    state = init_state(ModelConfig(**TOY, m=6))
    images = np.zeros((2, 16, 16, 3), dtype=np.uint8)
    with pytest.raises(ModelError, match="one index per image"):
        loss_and_gradients(state, images, np.array([0, 1, 0]))


def test_toy_training_reaches_perfect_monitor_accuracy(tmp_path):
    train_cat = noisy_site_catalog(tmp_path, [("a", 60, 1), ("b", 190, 6)])
    mon_cat = noisy_site_catalog(tmp_path, [("c", 60, 1), ("d", 190, 6)], per_site=3)
    state, history = train(
        train_cat,
        ModelConfig(**TOY, m=6),
        TrainConfig(epochs=40, batch_size=4, lr=3e-3, seed=0),
        mon_cat,
    )
    # judge on accuracy: with only two of six labels present, the four
    # support-free classes zero out the combined F1 by construction
    rows, issues = predict_catalog(mon_cat, state)
    assert issues == []
    want = {"c": 1, "d": 6}
    assert all(label == want[rid.split("/")[0]] for rid, label, _ in rows)
    assert len(history) == 40
    assert all(
        set(h) == {"epoch", "loss", "best", "monitor_combined_f1", "monitor_accuracy"}
        for h in history
    )
    assert any(h["best"] for h in history)
    assert all(isinstance(h["monitor_accuracy"], float) for h in history)


def test_binary_head_collapses_labels(tmp_path):
    # m=2 trains on the binary collapse: label 1 -> class 1, label 6 -> class 2
    train_cat = noisy_site_catalog(tmp_path, [("a", 60, 1), ("b", 190, 6)])
    mon_cat = noisy_site_catalog(tmp_path, [("c", 60, 1), ("d", 190, 6)], per_site=3)
    state, _ = train(
        train_cat,
        ModelConfig(**TOY, m=2),
        TrainConfig(epochs=10, batch_size=4, lr=3e-3, seed=0),
        mon_cat,
    )
    rows, _ = predict_catalog(mon_cat, state)
    want = {"c": 1, "d": 2}
    assert all(label == want[rid.split("/")[0]] for rid, label, _ in rows)


def test_history_without_monitor(tmp_path):
    cat = noisy_site_catalog(tmp_path, [("a", 60, 1), ("b", 190, 6)])
    _, history = train(cat, ModelConfig(**TOY, m=6),
                       TrainConfig(epochs=5, batch_size=4, lr=3e-3, seed=0))
    assert all(h["monitor_combined_f1"] is None for h in history)
    assert all(h["monitor_accuracy"] is None for h in history)
    losses = [h["loss"] for h in history]
    last_best = max(i for i, h in enumerate(history) if h["best"])
    assert losses[last_best] == min(losses)


def test_monitor_without_labels_is_ignored(tmp_path):
    cat = noisy_site_catalog(tmp_path, [("a", 60, 1), ("b", 190, 6)])
    bare = noisy_site_catalog(tmp_path, [("c", 60, None)], per_site=2)
    _, history = train(cat, ModelConfig(**TOY, m=6),
                       TrainConfig(epochs=2, batch_size=4, seed=0), bare)
    assert history[0]["monitor_combined_f1"] is None


def test_train_site_overlap_raises(tmp_path):
    cat = noisy_site_catalog(tmp_path, [("a", 60, 1), ("b", 190, 6)])
    with pytest.raises(ModelError, match="leak"):
        train(cat, ModelConfig(**TOY, m=6), TrainConfig(epochs=1, seed=0), cat)


def test_label_outside_head_range_raises(tmp_path):
    cat = noisy_site_catalog(tmp_path, [("a", 60, 1), ("b", 190, 4)], per_site=2)
    cfg = ModelConfig(input_size=16, patch_size=8, dim=8, heads=1, blocks=1, m=3, seed=0)
    with pytest.raises(ModelError, match="outside 1..3"):
        train(cat, cfg, TrainConfig(epochs=1, batch_size=2, seed=0))


def test_unlabeled_training_split_raises(tmp_path):
    cat = noisy_site_catalog(tmp_path, [("a", 60, None)], per_site=2)
    with pytest.raises(ModelError, match="no labeled frames"):
        train(cat, ModelConfig(**TOY, m=6), TrainConfig(epochs=1, seed=0))


def test_divergence_guard(tmp_path):
    # an infinite step makes the second batch's loss NaN deterministically
    cat = noisy_site_catalog(tmp_path, [("a", 60, 1), ("b", 190, 6)], per_site=4)
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(ModelError, match="diverged"):
            train(cat, ModelConfig(**TOY, m=6),
                  TrainConfig(epochs=2, batch_size=4, lr=float("inf"), seed=0))


def test_predict_catalog_order_issues_and_jobs(tmp_path):
    rng = np.random.default_rng(4)
    recs = []
    for k in range(2):
        path = tmp_path / "a" / f"good{k}.png"
        save_png(Image(rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)), path)
        recs.append(record(f"a/good{k}.png", hours=k, path=path))
    recs.append(record("a/gone.png", hours=2, path=tmp_path / "a" / "gone.png"))
    gray = tmp_path / "a" / "gray.png"
    save_png(Image(rng.integers(0, 256, (20, 20), dtype=np.uint8)), gray)
    recs.append(record("a/gray.png", hours=3, path=gray))
    cat = Catalog.from_records(recs)

    state = init_state(ModelConfig(**TOY, m=6))
    rows, issues = predict_catalog(cat, state)
    assert [r[0] for r in rows] == ["a/good0.png", "a/good1.png"]
    assert all(1 <= label <= 6 and 0.0 < conf <= 1.0 for _, label, conf in rows)
    by_id = dict(issues)
    assert set(by_id) == {"a/gone.png", "a/gray.png"}
    assert by_id["a/gray.png"] == "classifier input must be RGB"
    assert predict_catalog(cat, state, jobs=4) == (rows, issues)


def test_save_load_round_trip(tmp_path):
    state = init_state(ModelConfig(**TOY, m=6),
                       preprocess={"crop_target": 64, "beta": -0.5})
    path = tmp_path / "model.bin"
    save_model(state, path)
    loaded = load_model(path, expected_classes=6)
    assert loaded.config == state.config
    assert loaded.preprocess == {"crop_target": 64, "beta": -0.5}
    assert set(loaded.params) == set(state.params)
    for name in state.params:
        assert np.array_equal(loaded.params[name], state.params[name])
    again = tmp_path / "again.bin"
    save_model(loaded, again)
    assert again.read_bytes() == path.read_bytes()


def test_load_rejects_corruption(tmp_path):
    state = init_state(ModelConfig(**TOY, m=2))
    path = tmp_path / "model.bin"
    save_model(state, path)
    raw = path.read_bytes()

    flipped = bytearray(raw)
    flipped[len(flipped) // 2] ^= 0xFF
    (tmp_path / "flip.bin").write_bytes(bytes(flipped))
    with pytest.raises(ModelError, match="checksum"):
        load_model(tmp_path / "flip.bin")

    (tmp_path / "trunc.bin").write_bytes(raw[:30])
    with pytest.raises(ModelError, match="truncated"):
        load_model(tmp_path / "trunc.bin")

    junk = b"XJUNKBODYPADDING"
    (tmp_path / "junk.bin").write_bytes(junk + hashlib.sha256(junk).digest())
    with pytest.raises(ModelError, match="not a model weights file"):
        load_model(tmp_path / "junk.bin")

    versioned = b"SGMODEL1" + struct.pack("<I", 99) + struct.pack("<I", 0)
    (tmp_path / "ver.bin").write_bytes(versioned + hashlib.sha256(versioned).digest())
    with pytest.raises(ModelError, match="version 99"):
        load_model(tmp_path / "ver.bin")

    # header intact but no tensor section at all
    (hlen,) = struct.unpack_from("<I", raw, 12)
    headless = raw[:16 + hlen]
    (tmp_path / "empty.bin").write_bytes(headless + hashlib.sha256(headless).digest())
    with pytest.raises(ModelError, match="missing tensors"):
        load_model(tmp_path / "empty.bin")

    # rename one tensor in place and re-sign, so only the name is wrong
    body = raw[:-32]
    idx = body.rindex(b"head_b")
    renamed = body[:idx] + b"head_x" + body[idx + 6:]
    (tmp_path / "renamed.bin").write_bytes(renamed + hashlib.sha256(renamed).digest())
    with pytest.raises(ModelError, match="unexpected tensor"):
        load_model(tmp_path / "renamed.bin")


def test_load_rejects_wrong_class_count(tmp_path):
    path = tmp_path / "model.bin"
    save_model(init_state(ModelConfig(**TOY, m=2)), path)
    with pytest.raises(ModelError, match="has 2 classes, expected 6"):
        load_model(path, expected_classes=6)


def test_save_validates_tensor_shapes(tmp_path):
    state = init_state(ModelConfig(**TOY, m=2))
    bad = ModelState(state.config, state.copy_params())
    bad.params["head_b"] = np.zeros(7)
    with pytest.raises(ModelError, match="expected"):
        save_model(bad, tmp_path / "bad.bin")
    del bad.params["head_b"]
    with pytest.raises(ModelError, match="missing tensor"):
        save_model(bad, tmp_path / "bad.bin")


def test_copy_params_is_independent():
    state = init_state(ModelConfig(**TOY, m=2))
    snap = state.copy_params()
    state.params["head_w"] += 1.0
    assert not np.array_equal(snap["head_w"], state.params["head_w"])
