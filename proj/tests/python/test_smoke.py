import json
import math

import numpy as np
import pytest

import embolite


def test_formula_spot_values():
    assert embolite.focal_loss(0.5, 1.0, 2.0) == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert embolite.bce_loss(0.5, 0.0) == pytest.approx(math.log(2), abs=1e-12)
    assert embolite.dice_coefficient(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == pytest.approx(2 / 3, abs=1e-5)


def test_auroc_matches_pair_counting():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 5, 40) / 4.0
    labels = np.r_[1, 0, rng.integers(0, 2, 38)]
    pos, neg = scores[labels == 1], scores[labels == 0]
    pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    auc, fpr, tpr = embolite.auroc(scores.tolist(), labels.tolist())
    assert auc == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-12)
    assert (fpr[0], tpr[0]) == (0.0, 0.0)
    assert (fpr[-1], tpr[-1]) == (1.0, 1.0)


def test_window_plan():
    assert embolite.plan_windows(150, 100, 25) == [(0, 100, False), (50, 150, False)]
    assert embolite.plan_windows(60, 100, 25) == [(0, 100, True)]


def test_phantom_arrays():
    p = embolite.generate_phantom(seed=3, severity="lobar", size=32)
    assert p["volume"].shape == (32, 32, 32)
    assert p["positive"]
    assert p["annotation"]
    for mask in p["annotation"].values():
        assert mask.shape == (32, 32)
    neg = embolite.generate_phantom(seed=3, size=32)
    assert not neg["positive"] and not neg["annotation"]


def test_config_errors():
    with pytest.raises(embolite.ConfigError):
        embolite.load_config({"unknown": 1})
    cfg = embolite.load_config({"seed": 4})
    assert cfg["seed"] == 4
    assert cfg["preprocess"]["T"] == 16
    counts = embolite.parameter_counts({})
    assert counts["unet"] > 0 and counts["detector"] > 0


def test_tiny_pipeline(tmp_path):
    cfg = {
        "seed": 5,
        "output_dir": str(tmp_path / "run"),
        "phantom": {"splits": {"train": 4, "val": 2, "test": 2}, "depth": 32, "height": 32, "width": 32,
                    "solid_margin_slices": 2},
        "preprocess": {"crop": 24, "resize": 16, "T": 8, "overlap": 2},
        "unet": {"depth": 2, "base_channels": 4},
        "detector": {"hidden": 4, "pool_kernel": 4},
        "stage1": {"epochs": 1, "batch_size": 4},
        "stage2": {"epochs": 1, "batch_size": 2},
    }
    assert embolite.run("gen-data", cfg)["studies"] == 8
    with pytest.raises(embolite.DataError):
        embolite.run("train-stage2", cfg)
    assert embolite.run("train-stage1", cfg)["epochs"] == 1
    assert embolite.run("train-stage2", cfg)["epochs"] == 1
    report = embolite.run("eval", cfg)
    assert report["studies"] == 2
    assert "overall" in report["report"]
    saved = json.loads((tmp_path / "run" / "stage2" / "config.json").read_text())
    assert saved["seed"] == 5
