"""Self-supervised pretraining loop, checkpointing and masking-ratio sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from foveal_mim import __version__
from foveal_mim.dataio import random_resized_crop
from foveal_mim.imaging import MaskPlan, apply_mask
from foveal_mim.model import ArchitectureSpec, Autoencoder, build_autoencoder, load_checkpoint, save_checkpoint, to_tensor
from foveal_mim.objective import masked_reconstruction_loss

logger = logging.getLogger(__name__)

LR_GRID = (5e-5, 1e-4, 5e-4)
SWEEP_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class PretrainConfig:
    mask: MaskPlan = field(default_factory=lambda: MaskPlan("masked_periphery", 0.8))
    learning_rate: float = 1e-4
    weight_decay: float = 1e-8
    batch_size: int = 512
    epochs: int = 500
    optimizer: str = "adam"
    crop: bool = True
    crop_scale: Tuple[float, float] = (0.08, 1.0)
    crop_ratio: Tuple[float, float] = (0.75, 1.33)
    fixed_masks: bool = False
    foreground_weighting: bool = False
    checkpoint_every: int = 10
    architecture: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "checkpoint_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CheckpointRecord:
    epoch: int
    loss: float
    path: str
    config_hash: str = ""


@dataclass
class PretrainResult:
    run_dir: Path
    losses: List[float]
    checkpoints: List[CheckpointRecord]
    model: Autoencoder
    skipped_samples: int = 0


def sample_rngs(seed: int, epoch: int, index: int, fixed_masks: bool = False):
    """Independent crop and mask generators for one sample.

    Seeds depend only on (seed, epoch, index), never on batch composition or
    worker count. With ``fixed_masks`` the mask generator ignores the epoch.
    """
    crop_rng = np.random.default_rng([seed, epoch, index, 0])
    mask_rng = np.random.default_rng([seed, 0 if fixed_masks else epoch, index, 1])
    return crop_rng, mask_rng


def prepare_sample(image, config: PretrainConfig, epoch: int, index: int, confidence=None):
    """One training view: ``(masked_input, target, weights)``.

    The crop is applied first and shared by the image and its confidence map;
    the mask is then defined on the presented view. Foreground weighting
    multiplies the weights only and never touches the input.
    """
    crop_rng, mask_rng = sample_rngs(config.seed, epoch, index, config.fixed_masks)
    img = np.asarray(image)
    img = img.astype(np.float32) / 255.0 if img.dtype == np.uint8 else img.astype(np.float32, copy=False)
    conf = None if confidence is None else np.asarray(confidence, dtype=np.float32)
    size = config.architecture.image_size
    if config.crop:
        stacked = img if conf is None else np.concatenate([img, conf[..., None]], axis=-1)
        stacked = random_resized_crop(stacked, config.crop_scale, config.crop_ratio, (size, size), crop_rng)
        img = np.ascontiguousarray(stacked[..., :3])
        if conf is not None:
            conf = np.ascontiguousarray(stacked[..., 3])
    masked, weights = apply_mask(img, config.mask, mask_rng, confidence=conf)
    if config.foreground_weighting:
        if conf is None:
            raise ValueError("foreground weighting needs confidence maps")
        weights = weights * conf
    return masked, img, weights


def _as_float_images(images, indices):
    batch = np.asarray(images[np.asarray(indices)])
    if batch.dtype == np.uint8:
        return batch.astype(np.float32) / 255.0
    return batch.astype(np.float32, copy=False)


def prepare_batch(images, config: PretrainConfig, epoch: int, indices, confidences=None):
    raw = _as_float_images(images, indices)
    conf = None if confidences is None else np.asarray(confidences[np.asarray(indices)], dtype=np.float32)
    inputs, targets, weights = [], [], []
    for j, idx in enumerate(indices):
        m, t, w = prepare_sample(raw[j], config, epoch, int(idx), None if conf is None else conf[j])
        inputs.append(m)
        targets.append(t)
        weights.append(w)
    return np.stack(inputs), np.stack(targets), np.stack(weights).astype(np.float32)


def make_optimizer(model, config: PretrainConfig):
    cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    return cls(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)


def format_loss(value: float) -> str:
    return f"{value:.7e}"


def write_losses(path, losses: Sequence[float]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(losses, start=1):
            writer.writerow([epoch, format_loss(loss)])


def read_losses(path) -> List[float]:
    with open(path, newline="") as fh:
        return [float(row["mean_loss"]) for row in csv.DictReader(fh)]


def pretrain(
    config: PretrainConfig,
    images,
    run_dir,
    confidences=None,
    keep_indices: Optional[Sequence[int]] = None,
    on_epoch: Optional[Callable[[int, float, Autoencoder], None]] = None,
) -> PretrainResult:
    """Train the autoencoder on masked views of ``images``.

    Args:
        config: run hyperparameters and mask plan.
        images: ``N x H x W x 3`` uint8 or float array (memmaps are fine).
        run_dir: output directory; receives ``config.snapshot``,
            ``losses.csv``, ``checkpoints/`` and ``manifest.json``.
        confidences: ``N x H x W`` foreground maps, required when
            ``config.foreground_weighting`` is on.
        keep_indices: restrict training to these dataset positions.
        on_epoch: called after every epoch with ``(epoch, loss, model)``.
    """
    from foveal_mim.config import dump_yaml

    if len(images) == 0:
        raise ValueError("no training images")
    if config.foreground_weighting and confidences is None:
        raise ValueError("foreground weighting needs confidence maps")
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(dump_yaml(asdict(config)))
    chash = config.config_hash()

    pool = np.arange(len(images)) if keep_indices is None else np.asarray(keep_indices, dtype=np.int64)
    if len(pool) == 0:
        raise ValueError("no training images left after filtering")

    torch.manual_seed(config.seed)
    model = build_autoencoder(config.architecture, seed=config.seed)
    optimizer = make_optimizer(model, config)
    save_checkpoint(model, ckpt_dir / "init", seed=config.seed, epoch=0, config_hash=chash,
                    config_path=str(run_dir / "config.snapshot"))

    losses: List[float] = []
    records: List[CheckpointRecord] = []
    skipped = 0
    started = time.time()
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = pool[np.random.default_rng([config.seed, epoch]).permutation(len(pool))]
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            inputs, targets, weights = prepare_batch(images, config, epoch, idx, confidences)
            keep = weights.reshape(len(weights), -1).sum(axis=1) > 0
            if not keep.all():
                skipped += int((~keep).sum())
                inputs, targets, weights, idx = inputs[keep], targets[keep], weights[keep], idx[keep]
                if len(idx) == 0:
                    continue
            x = to_tensor(inputs)
            y = to_tensor(targets)
            pred = model(x)
            report = masked_reconstruction_loss(pred, y, torch.from_numpy(weights), channels_last=False)
            if not torch.isfinite(report.value):
                snapshot = {"epoch": epoch, "batch_indices": [int(i) for i in idx],
                            "plan": asdict(config.mask), "seed": config.seed}
                (run_dir / "diagnostic.json").write_text(json.dumps(snapshot, indent=2, default=list))
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", snapshot)
            optimizer.zero_grad(set_to_none=True)
            report.value.backward()
            optimizer.step()
            total += float(report.per_sample_values.detach().sum())
            count += len(idx)
        epoch_loss = total / max(count, 1)
        losses.append(epoch_loss)
        logger.info("epoch %d/%d loss %.6f", epoch, config.epochs, epoch_loss)
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            path = save_checkpoint(model, ckpt_dir / f"epoch_{epoch}", seed=config.seed, epoch=epoch,
                                   pretraining_loss=epoch_loss, config_hash=chash,
                                   config_path=str(run_dir / "config.snapshot"))
            records.append(CheckpointRecord(epoch, epoch_loss, str(path), chash))
        write_losses(run_dir / "losses.csv", losses)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, model)

    manifest = {
        "config_hash": chash,
        "code_version": __version__,
        "torch_version": torch.__version__,
        "platform": platform.platform(),
        "seed": config.seed,
        "epochs": config.epochs,
        "num_images": int(len(pool)),
        "skipped_samples": skipped,
        "normalization_layers": "none",
        "wall_clock_seconds": round(time.time() - started, 3),
        "checkpoints": [asdict(r) for r in records],
        "artifacts": sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*") if p.is_file()),
    }
    manifest["artifacts"].append("manifest.json")
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return PretrainResult(run_dir, losses, records, model, skipped)


def best_record(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Lowest loss; ties go to the earliest epoch."""
    if not records:
        raise ValueError("run has no checkpoints")
    return min(records, key=lambda r: (r.loss, r.epoch))


def checkpoint_records(run_dir) -> List[CheckpointRecord]:
    run_dir = Path(run_dir)
    records = []
    for meta_path in sorted((run_dir / "checkpoints").glob("epoch_*.json")):
        meta = json.loads(meta_path.read_text())
        loss = meta.get("pretraining_loss")
        if loss is None or not math.isfinite(loss):
            continue
        records.append(CheckpointRecord(int(meta["epoch"]), float(loss), str(meta_path.with_suffix(".pt")),
                                        meta.get("config_hash", "")))
    return sorted(records, key=lambda r: r.epoch)


def select_best_checkpoint(run_dir) -> CheckpointRecord:
    return best_record(checkpoint_records(run_dir))


def load_best_model(run_dir) -> Tuple[Autoencoder, CheckpointRecord]:
    record = select_best_checkpoint(run_dir)
    model, _ = load_checkpoint(record.path)
    return model, record


@dataclass
class SweepRow:
    ratio: float
    accuracy_mean: float
    accuracy_std: float
    run_dir: str
    val_accuracy_mean: float = float("nan")


def sweep_masking_ratio(
    base: PretrainConfig,
    images,
    probe_data,
    out_dir,
    ratios: Sequence[float] = SWEEP_RATIOS,
    probe_config=None,
    confidences=None,
) -> Tuple[List[SweepRow], float]:
    """Pretrain and probe once per masking ratio; returns rows and the best ratio.

    The best ratio is chosen on validation accuracy; test accuracy is only reported.

    ``probe_data`` is a :class:`foveal_mim.evaluation.ProbeSplits`. Every run
    shares ``base.seed``.
    """
    from foveal_mim.evaluation import ProbeConfig, train_linear_probe

    probe_config = probe_config or ProbeConfig()
    out_dir = Path(out_dir)
    rows = []
    for ratio in ratios:
        cfg = PretrainConfig(**{**base.__dict__, "mask": base.mask.with_(ratio=float(ratio))})
        run_dir = out_dir / f"ratio_{ratio:.1f}"
        result = pretrain(cfg, images, run_dir, confidences=confidences)
        model, _ = load_best_model(run_dir)
        metrics = train_linear_probe(model, probe_data, probe_config)
        rows.append(SweepRow(float(ratio), metrics.accuracy_mean, metrics.accuracy_std, str(result.run_dir),
                             metrics.val_accuracy_mean))
    best = best_sweep_row(rows).ratio
    write_sweep(out_dir / "sweep.csv", rows)
    return rows, best


def best_sweep_row(rows: Sequence[SweepRow]) -> SweepRow:
    """Highest validation accuracy; ties go to the smaller ratio."""
    return max(rows, key=lambda r: (r.val_accuracy_mean, -r.ratio))


def write_sweep(path, rows: Sequence[SweepRow]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "accuracy_mean", "accuracy_std", "val_accuracy_mean", "run_dir"])
        for r in rows:
            writer.writerow([f"{r.ratio:.2f}", f"{r.accuracy_mean:.6f}", f"{r.accuracy_std:.6f}",
                             f"{r.val_accuracy_mean:.6f}", r.run_dir])


def read_sweep(path) -> List[SweepRow]:
    with open(path, newline="") as fh:
        return [SweepRow(float(r["ratio"]), float(r["accuracy_mean"]), float(r["accuracy_std"]), r["run_dir"],
                         float(r["val_accuracy_mean"])) for r in csv.DictReader(fh)]


def select_learning_rate(
    base: PretrainConfig,
    images,
    probe_data,
    out_dir,
    grid: Sequence[float] = LR_GRID,
    probe_config=None,
) -> Tuple[float, dict]:
    """Pick the pretraining learning rate by validation accuracy of the probe.

    Returns ``(best_lr, {lr: validation_accuracy})``; ties go to the smaller rate.
    """
    from foveal_mim.evaluation import ProbeConfig, train_linear_probe

    probe_config = probe_config or ProbeConfig()
    scores = {}
    for lr in grid:
        cfg = PretrainConfig(**{**base.__dict__, "learning_rate": float(lr)})
        run_dir = Path(out_dir) / f"lr_{lr:g}"
        pretrain(cfg, images, run_dir)
        model, _ = load_best_model(run_dir)
        scores[float(lr)] = train_linear_probe(model, probe_data, probe_config).val_accuracy_mean
    best = max(scores, key=lambda lr: (scores[lr], -lr))
    (Path(out_dir) / "lr_selection.json").write_text(json.dumps({"scores": scores, "best": best}, indent=2))
    return best, scores
