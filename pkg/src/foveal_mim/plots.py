"""Static figures regenerated from run directories alone."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from foveal_mim.evaluation import read_metrics  # noqa: E402

PNG_META = {"Software": None}


class MissingSeriesError(FileNotFoundError):
    """A figure needs a series that no run directory provides."""


def preview_panel(image, masked, weights, scale: int = 2) -> np.ndarray:
    """Side-by-side uint8 panel: input, masked input, weight map."""
    w = np.repeat(np.asarray(weights, dtype=np.float32)[..., None], 3, axis=-1)
    sep = np.ones((image.shape[0], 2, 3), dtype=np.float32)
    panel = np.concatenate([image, sep, masked, sep, w], axis=1)
    panel = np.repeat(np.repeat(panel, scale, axis=0), scale, axis=1)
    return np.rint(np.clip(panel, 0, 1) * 255).astype(np.uint8)


def save_preview(path, image, masked, weights):
    Image.fromarray(preview_panel(image, masked, weights)).save(path)


def _condition(run_dir: Path) -> str:
    return run_dir.name


def collect_series(run_dirs: Sequence) -> Dict[str, List[dict]]:
    """``metrics.csv`` rows per run; raises when any directory has none."""
    series = {}
    missing = []
    for d in map(Path, run_dirs):
        path = d / "metrics.csv"
        rows = read_metrics(path) if path.exists() else []
        if not rows:
            missing.append(str(path))
            continue
        series[_condition(d)] = rows
    if missing:
        raise MissingSeriesError(f"no metrics rows in: {', '.join(missing)}")
    if not series:
        raise MissingSeriesError("no run directories given")
    return series


def _final_accuracies(rows):
    acc = [r for r in rows if r.get("test_accuracy") is not None]
    if not acc:
        return []
    last = max((r["checkpoint_epoch"] or 0) for r in acc)
    return [r["test_accuracy"] for r in acc if (r["checkpoint_epoch"] or 0) == last]


def accuracy_bars(series: Dict[str, List[dict]], path):
    """Mean test accuracy per condition with a standard-deviation whisker."""
    names, means, stds = [], [], []
    for name, rows in series.items():
        vals = _final_accuracies(rows)
        if vals:
            names.append(name)
            means.append(np.mean(vals))
            stds.append(np.std(vals))
    if not names:
        raise MissingSeriesError("no test_accuracy series for the accuracy bars")
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.5))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4, color="0.6", edgecolor="k")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("linear probe accuracy")
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return {"names": names, "means": means, "stds": stds}


def _epoch_curve(rows, key):
    by_epoch = {}
    for r in rows:
        if r.get(key) is not None and r.get("checkpoint_epoch") is not None:
            by_epoch.setdefault(r["checkpoint_epoch"], []).append(r[key])
    epochs = sorted(by_epoch)
    return (np.array(epochs), np.array([np.mean(by_epoch[e]) for e in epochs]),
            np.array([np.std(by_epoch[e]) for e in epochs]))


def epoch_curves(series, key, ylabel, path, bands=True):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    drawn = 0
    for name, rows in series.items():
        e, m, s = _epoch_curve(rows, key)
        if len(e) == 0:
            continue
        ax.plot(e, m, marker="o", label=name)
        if bands:
            ax.fill_between(e, m - s, m + s, alpha=0.25)
        drawn += 1
    if not drawn:
        plt.close(fig)
        raise MissingSeriesError(f"no {key} series to plot")
    ax.set_xlabel("pretraining epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return drawn


def reconstruction_grid(truth, inputs, preds, path, max_cols: int = 8):
    """Rows: ground truth, masked input, prediction."""
    n = min(len(truth), max_cols)
    fig, axes = plt.subplots(3, n, figsize=(1.3 * n, 4), squeeze=False)
    for row, (imgs, label) in enumerate(((truth, "ground truth"), (inputs, "input"), (preds, "prediction"))):
        for j in range(n):
            ax = axes[row, j]
            ax.imshow(np.clip(imgs[j], 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
        axes[row, 0].set_ylabel(label, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def emit_plots(run_dirs: Sequence, out_dir) -> List[Path]:
    """Write every figure the run directories support; nothing is written on error."""
    series = collect_series(run_dirs)
    has_acc = any(_final_accuracies(rows) for rows in series.values())
    has_acc_curve = any(len(_epoch_curve(rows, "test_accuracy")[0]) for rows in series.values())
    has_cov = any(len(_epoch_curve(rows, "covariance_offdiag")[0]) for rows in series.values())
    recon = [Path(d) / "reconstructions.npz" for d in run_dirs if (Path(d) / "reconstructions.npz").exists()]
    if not (has_acc or has_cov or recon):
        raise MissingSeriesError("metrics files hold neither accuracies, covariances nor reconstructions")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if has_acc:
        accuracy_bars(series, out_dir / "accuracy_bars.png")
        written.append(out_dir / "accuracy_bars.png")
    if has_acc_curve:
        epoch_curves(series, "test_accuracy", "linear probe accuracy", out_dir / "accuracy_vs_epoch.png")
        written.append(out_dir / "accuracy_vs_epoch.png")
    if has_cov:
        epoch_curves(series, "covariance_offdiag", "off-diagonal covariance", out_dir / "covariance_vs_epoch.png",
                     bands=False)
        written.append(out_dir / "covariance_vs_epoch.png")
    for path in recon:
        data = np.load(path)
        target = out_dir / f"reconstructions_{path.parent.name}.png"
        reconstruction_grid(data["truth"], data["inputs"], data["preds"], target)
        written.append(target)
    return written
