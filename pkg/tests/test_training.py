import json

import numpy as np
import pytest

from foveal_mim.imaging import MaskPlan
from foveal_mim.model import ArchitectureSpec
from foveal_mim.training import (
    CheckpointRecord,
    PretrainConfig,
    SweepRow,
    best_record,
    best_sweep_row,
    checkpoint_records,
    prepare_batch,
    prepare_sample,
    pretrain,
    read_losses,
    read_sweep,
    select_best_checkpoint,
    write_sweep,
)

TINY = ArchitectureSpec.reduced(image_size=16, base_channels=4)


def tiny_config(**kw):
    base = dict(mask=MaskPlan("masked_periphery", 0.8), learning_rate=1e-3, batch_size=8, epochs=3,
                checkpoint_every=1, architecture=TINY, seed=0)
    base.update(kw)
    return PretrainConfig(**base)


@pytest.fixture
def tiny_images():
    return np.random.default_rng(0).integers(0, 256, size=(20, 16, 16, 3), dtype=np.uint8)


def _records(losses):
    return [CheckpointRecord(e, l, f"epoch_{e}.pt") for e, l in enumerate(losses, start=1)]


def test_best_record_examples():
    assert best_record(_records([0.5, 0.4, 0.3])).epoch == 3
    assert best_record(_records([0.5, 0.3, 0.4])).epoch == 2
    assert best_record(_records([0.3, 0.3])).epoch == 1
    with pytest.raises(ValueError):
        best_record([])


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(learning_rate=0)
    with pytest.raises(ValueError):
        tiny_config(optimizer="sgd")


def test_prepare_sample_deterministic(tiny_images):
    cfg = tiny_config(mask=MaskPlan("random_patches", 0.5, patch_size=4))
    a = prepare_sample(tiny_images[3], cfg, epoch=2, index=3)
    b = prepare_sample(tiny_images[3], cfg, epoch=2, index=3)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    c = prepare_sample(tiny_images[3], cfg, epoch=3, index=3)
    assert not np.array_equal(a[2], c[2])


def test_sample_independent_of_batch_composition(tiny_images):
    cfg = tiny_config(mask=MaskPlan("random_patches", 0.5, patch_size=4))
    full = prepare_batch(tiny_images, cfg, 1, [4, 7, 9])
    alone = prepare_batch(tiny_images, cfg, 1, [7])
    for x, y in zip(full, alone):
        assert np.array_equal(x[1], y[0])


def test_fixed_masks_reuse_layout_across_epochs(tiny_images):
    cfg = tiny_config(mask=MaskPlan("random_patches", 0.5, patch_size=4), fixed_masks=True, crop=False)
    w1 = prepare_sample(tiny_images[0], cfg, epoch=1, index=0)[2]
    w2 = prepare_sample(tiny_images[0], cfg, epoch=5, index=0)[2]
    assert np.array_equal(w1, w2)
    other = prepare_sample(tiny_images[1], cfg, epoch=1, index=1)[2]
    assert not np.array_equal(w1, other)


def test_no_crop_keeps_target(tiny_images):
    cfg = tiny_config(crop=False)
    _, target, _ = prepare_sample(tiny_images[2], cfg, 1, 2)
    np.testing.assert_allclose(target, tiny_images[2] / 255.0, atol=1e-7)


def test_foreground_weighting_only_touches_weights(tiny_images):
    conf = np.zeros((16, 16), dtype=np.float32)
    conf[:, :8] = 1.0
    plain = tiny_config(crop=False)
    weighted = tiny_config(crop=False, foreground_weighting=True)
    a = prepare_sample(tiny_images[0], plain, 1, 0, conf)
    b = prepare_sample(tiny_images[0], weighted, 1, 0, conf)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    np.testing.assert_array_equal(b[2], a[2] * conf)


def test_foreground_weighting_needs_confidence(tiny_images, tmp_path):
    with pytest.raises(ValueError):
        pretrain(tiny_config(foreground_weighting=True), tiny_images, tmp_path)


def test_autoencoder_baseline_has_full_support(tiny_images):
    cfg = tiny_config(mask=MaskPlan("none", 0.0))
    masked, target, weights = prepare_sample(tiny_images[0], cfg, 1, 0)
    assert np.array_equal(masked, target) and weights.all()


def test_pretrain_artifacts_and_replay(tiny_images, tmp_path):
    a = pretrain(tiny_config(), tiny_images, tmp_path / "a")
    b = pretrain(tiny_config(), tiny_images, tmp_path / "b")
    np.testing.assert_allclose(a.losses, b.losses, atol=1e-6)
    assert (tmp_path / "a" / "losses.csv").read_text() == (tmp_path / "b" / "losses.csv").read_text()
    assert read_losses(tmp_path / "a" / "losses.csv") == pytest.approx(a.losses, rel=1e-6)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["epochs"] == 3 and manifest["normalization_layers"] == "none"
    assert (tmp_path / "a" / "config.snapshot").exists()
    assert (tmp_path / "a" / "checkpoints" / "init.pt").exists()
    records = checkpoint_records(tmp_path / "a")
    assert [r.epoch for r in records] == [1, 2, 3]
    assert select_best_checkpoint(tmp_path / "a") == best_record(a.checkpoints)


def test_different_seed_different_run(tiny_images, tmp_path):
    a = pretrain(tiny_config(epochs=1), tiny_images, tmp_path / "a")
    b = pretrain(tiny_config(epochs=1, seed=1), tiny_images, tmp_path / "b")
    assert a.losses != b.losses


def test_checkpoint_cadence(tiny_images, tmp_path):
    res = pretrain(tiny_config(epochs=5, checkpoint_every=2), tiny_images, tmp_path)
    assert [r.epoch for r in res.checkpoints] == [2, 4, 5]


def test_loss_decreases_on_tiny_run(tiny_images, tmp_path):
    res = pretrain(tiny_config(epochs=15, learning_rate=3e-3, crop=False), tiny_images, tmp_path)
    assert res.losses[-1] < res.losses[0]


def test_degenerate_samples_skipped(tiny_images, tmp_path):
    conf = np.ones((20, 16, 16), dtype=np.float32)
    conf[:5] = 0.0
    res = pretrain(tiny_config(epochs=1, foreground_weighting=True, crop=False), tiny_images, tmp_path,
                   confidences=conf)
    assert res.skipped_samples == 5


def test_keep_indices_restrict_pool(tiny_images, tmp_path):
    res = pretrain(tiny_config(epochs=1), tiny_images, tmp_path, keep_indices=[0, 1, 2])
    assert json.loads((tmp_path / "manifest.json").read_text())["num_images"] == 3
    assert np.isfinite(res.losses[0])


def test_sweep_selection_uses_validation(tmp_path):
    rows = [SweepRow(0.5, 0.9, 0.01, "a", 0.40), SweepRow(0.6, 0.5, 0.01, "b", 0.45),
            SweepRow(0.7, 0.6, 0.01, "c", 0.45)]
    assert best_sweep_row(rows).ratio == 0.6
    write_sweep(tmp_path / "sweep.csv", rows)
    again = read_sweep(tmp_path / "sweep.csv")
    assert [r.ratio for r in again] == [0.5, 0.6, 0.7]
    assert again[1].val_accuracy_mean == pytest.approx(0.45)
