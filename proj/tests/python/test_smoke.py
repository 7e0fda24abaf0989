# Copyright (c) 2026 The loffta Authors
# SPDX-License-Identifier: Apache-2.0
import json

import numpy as np
import pytest

import loffta
from loffta import extract

SMALL = {
    "classes": 3,
    "train_per_class": 8,
    "val_per_class": 2,
    "test_per_class": 4,
    "d": 8,
    "h": 4,
    "w": 4,
    "seed": 5,
}
TINY_MODEL = {"embed_dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2}


@pytest.fixture
def cache(tmp_path):
    root = tmp_path / "cache"
    manifest = loffta.build_synthetic_cache(root, SMALL)
    return root, manifest


def test_version():
    assert isinstance(loffta.__version__, str) and loffta.__version__


def test_grid_ops_shapes_and_identities():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((5, 7, 3)).astype(np.float32)
    np.testing.assert_array_equal(loffta.flip(g, "horizontal"), g[:, ::-1, :])
    np.testing.assert_array_equal(loffta.flip(g, "vertical"), g[::-1, :, :])
    np.testing.assert_array_equal(loffta.rotate(g, 0.0), g)
    np.testing.assert_array_equal(loffta.shear(g, 0.0, 0.0), g)
    np.testing.assert_array_equal(loffta.translate(g, 0, 0), g)
    np.testing.assert_array_equal(loffta.resize(g, 1.0), g)

    shifted = loffta.translate(g, 1, 0)
    np.testing.assert_array_equal(shifted[1:], g[:-1])
    assert not shifted[0].any()

    cls = rng.standard_normal(3).astype(np.float32)
    ng, nc = loffta.add_noise(g, cls, 0.0, seed=1)
    np.testing.assert_array_equal(ng, g)
    np.testing.assert_array_equal(nc, cls)

    pooled = loffta.pool(np.arange(16, dtype=np.float32).reshape(4, 4, 1), "max", 2, 2)
    np.testing.assert_array_equal(pooled[..., 0], [[5, 7], [13, 15]])
    avg = loffta.pool(np.arange(16, dtype=np.float32).reshape(4, 4, 1), "average", 2, 2)
    np.testing.assert_allclose(avg[..., 0], [[2.5, 4.5], [10.5, 12.5]])


def test_errors_are_typed():
    g = np.zeros((2, 2, 1), dtype=np.float32)
    with pytest.raises(loffta.InvalidParameter):
        loffta.pool(g, "max", 3, 1)
    with pytest.raises(loffta.InvalidParameter):
        loffta.flip(g, "diagonal")
    with pytest.raises(loffta.ShapeMismatch):
        loffta.flip(np.zeros((2, 2), dtype=np.float32), "vertical")
    assert issubclass(loffta.CacheError, loffta.LofftaError)


def test_cache_build_read_validate(cache, tmp_path):
    root, manifest = cache
    assert manifest["splits"] == {"train": 24, "val": 6, "test": 12}
    assert loffta.validate_cache(root) == {"errors": [], "warnings": []}
    cls, grid, label = loffta.read_record(root, "train", 4)
    assert cls.shape == (8,) and grid.shape == (4, 4, 8) and label == 1
    with pytest.raises(loffta.IndexError):
        loffta.read_record(root, "train", 24)

    pooled = loffta.pool_cache(root, tmp_path / "pooled", "average", 2, 2)
    assert (pooled["h"], pooled["w"]) == (2, 2)
    _, pgrid, _ = loffta.read_record(tmp_path / "pooled", "train", 4)
    np.testing.assert_allclose(pgrid, loffta.pool(grid, "average", 2, 2), atol=1e-6)

    with pytest.raises(loffta.CacheError):
        loffta.read_record(tmp_path / "missing", "train", 0)


def test_short_training_run(cache, tmp_path):
    root, _ = cache
    before = loffta.provider_invocations()
    config = {"model": TINY_MODEL, "batch_size": 8, "max_epochs": 2, "warmup_steps": 2, "seed": 3}
    out = tmp_path / "run"
    result = loffta.train(root, config, out)
    assert loffta.provider_invocations() == before
    assert len(result["step_losses"]) == 6
    assert result["last_step"] == 6
    assert all(np.isfinite(result["step_losses"]))
    assert {r["split"] for r in result["log"]} == {"train", "val"}
    assert (out / "best.ckpt").exists() and (out / "metrics.ndjson").exists()
    assert json.loads((out / "config.json").read_text())["seed"] == 3

    again = loffta.train(root, config)
    assert again["step_losses"] == result["step_losses"]

    metrics = loffta.evaluate(root, "test", out / "best.ckpt")
    assert metrics["count"] == 12
    assert 0.0 <= metrics["accuracy"] <= 1.0

    report = loffta.bench_train(root, {"model": TINY_MODEL, "batch_size": 8}, steps=10)
    assert report["mode"] == "train" and report["images_per_sec"] > 0
    report = loffta.bench_infer(root, out / "last.ckpt", batch_size=8, steps=6)
    assert report["mode"] == "infer"

    with pytest.raises(loffta.ConfigError):
        loffta.train(root, {"learning_rate": 1.0})


def test_extract_interface(cache):
    root, _ = cache
    assert extract.grid_side(224, 14) == 16
    with pytest.raises(extract.GridAmbiguity):
        extract.grid_side(225, 14)
    with pytest.raises(NotImplementedError):
        extract.extract_images("vit-base", ".", 224, root)
    report = extract.verify_against_primary(root, steps=3)
    assert report.ok, report.validate_output + report.train_output
