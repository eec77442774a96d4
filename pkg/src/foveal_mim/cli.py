"""Command-line entry point: ``foveal-mim <subcommand> [--preset NAME] [--config PATH] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from foveal_mim import __version__
from foveal_mim.config import PRESET_NAMES, ConfigError, ExperimentConfig, load_config
from foveal_mim.dataio import (
    DataError,
    DatasetSpec,
    SplitIndex,
    confidence_array,
    filter_segmentable,
    load_confidence_masks,
    load_stl10,
    split_train_val,
    stl10_available,
)
from foveal_mim.evaluation import (
    ProbeSplits,
    covariance_offdiagonal,
    extract_features,
    probe_features,
    read_metrics,
    reconstruction_error,
    write_metrics,
    write_summary,
)
from foveal_mim.imaging import apply_mask
from foveal_mim.model import build_autoencoder, load_checkpoint, reconstruct
from foveal_mim.plots import MissingSeriesError, emit_plots, save_preview
from foveal_mim.training import (
    best_sweep_row,
    checkpoint_records,
    load_best_model,
    pretrain,
    read_sweep,
    sweep_masking_ratio,
)

logger = logging.getLogger("foveal_mim")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 1, 2, 3
SUBCOMMANDS = ("prepare-data", "preview-mask", "pretrain", "sweep", "probe", "metrics", "plot", "report")


def _plan_id(plan) -> str:
    pid = f"{plan.strategy}@{plan.ratio:g}"
    return pid + "+attention" if plan.attention is not None else pid


def _root(cfg: ExperimentConfig) -> Path:
    return Path(cfg.data.stl10_root)


def _confidence_dir(cfg: ExperimentConfig, split: str = "unlabeled"):
    if cfg.data.confidence_dir is None:
        return None
    base = Path(cfg.data.confidence_dir)
    return base if split == "unlabeled" else base / split


def load_unlabeled(cfg: ExperimentConfig):
    data = load_stl10(DatasetSpec(str(_root(cfg)), "unlabeled"))
    images = data.images
    if cfg.data.unlabeled_limit is not None:
        images = images[: cfg.data.unlabeled_limit]
    return np.asarray(images)


def load_confidences(cfg: ExperimentConfig, split: str, n: int):
    cdir = _confidence_dir(cfg, split)
    if cdir is None:
        raise FileNotFoundError("config names no data.confidence_dir")
    return load_confidence_masks(cdir, indices=range(n))


def load_probe_splits(cfg: ExperimentConfig) -> ProbeSplits:
    train = load_stl10(DatasetSpec(str(_root(cfg)), "train", with_labels=True))
    test = load_stl10(DatasetSpec(str(_root(cfg)), "test", with_labels=True))
    return ProbeSplits.from_stl10(train, test, seed=cfg.seed)


def _pretrain_inputs(cfg: ExperimentConfig):
    images = load_unlabeled(cfg)
    confidences, keep = None, None
    if cfg.pretrain.foreground_weighting:
        masks = load_confidences(cfg, "unlabeled", len(images))
        confidences = confidence_array(masks)
        keep = filter_segmentable(masks).kept_indices
    return images, confidences, keep


def cmd_prepare_data(cfg: ExperimentConfig, out: Path, args) -> list:
    written = []
    root = _root(cfg)
    if not stl10_available(root):
        if not cfg.data.synthetic:
            raise FileNotFoundError(f"no STL-10 binaries under {root} (set data.synthetic=true to generate a corpus)")
        from foveal_mim.synthetic import write_corpus

        logger.info("writing synthetic corpus to %s", root)
        write_corpus(root, cfg.data.synthetic_unlabeled, cfg.data.synthetic_train, cfg.data.synthetic_test,
                     seed=cfg.seed, confidence_dir=cfg.data.confidence_dir)
    prepared = out / "prepared"
    prepared.mkdir(parents=True, exist_ok=True)
    train = load_stl10(DatasetSpec(str(root), "train", with_labels=True))
    tv_train, tv_val = prepared / "train_indices.txt", prepared / "val_indices.txt"
    if not (tv_train.exists() and tv_val.exists()):
        tr, va = split_train_val(train.labels, seed=cfg.seed, expected=None)
        SplitIndex(tuple(int(i) for i in tr), f"stratified train part, seed {cfg.seed}", len(train)).save(tv_train)
        SplitIndex(tuple(int(i) for i in va), f"stratified validation part, seed {cfg.seed}", len(train)).save(tv_val)
    else:
        logger.info("train/validation split already prepared")
    written += [tv_train, tv_val]
    if cfg.data.confidence_dir is not None:
        seg = prepared / "segmentable.txt"
        if not seg.exists():
            n = len(load_stl10(DatasetSpec(str(root), "unlabeled")))
            if cfg.data.unlabeled_limit is not None:
                n = min(n, cfg.data.unlabeled_limit)
            split = filter_segmentable(load_confidences(cfg, "unlabeled", n))
            split.save(seg)
            print(f"segmentable: kept {len(split.kept_indices)}/{split.total} "
                  f"(discarded {100 * split.discarded_fraction:.1f}%)")
        written.append(seg)
    return written


def cmd_preview_mask(cfg: ExperimentConfig, out: Path, args) -> list:
    data = load_stl10(DatasetSpec(str(_root(cfg)), "unlabeled"))
    if not 0 <= args.index < len(data):
        raise DataError(f"image index {args.index} outside 0..{len(data) - 1}")
    img, _ = data[args.index]
    conf = None
    if cfg.pretrain.mask.attention is not None and cfg.pretrain.mask.attention.placement == "object":
        conf = load_confidences(cfg, "unlabeled", args.index + 1)[args.index].values
    plan = cfg.pretrain.mask
    masked, weights = apply_mask(img, plan, np.random.default_rng([cfg.seed, args.index]), confidence=conf)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"preview_{_plan_id(plan).replace('@', '_').replace('+', '_')}_{args.index}.png"
    save_preview(path, img, masked, weights)
    print(path)
    return [path]


def cmd_pretrain(cfg: ExperimentConfig, out: Path, args) -> list:
    images, confidences, keep = _pretrain_inputs(cfg)
    result = pretrain(cfg.pretrain, images, out, confidences=confidences, keep_indices=keep)
    print(f"epoch-mean loss: first {result.losses[0]:.6f} last {result.losses[-1]:.6f}")
    return [out / "losses.csv", out / "manifest.json"]


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> list:
    images, confidences, _ = _pretrain_inputs(cfg)
    rows, best = sweep_masking_ratio(cfg.pretrain, images, load_probe_splits(cfg), out, cfg.sweep_ratios,
                                     cfg.probe, confidences=confidences)
    print(f"best ratio {best:g}")
    return [out / "sweep.csv"]


def _merge_metrics(path: Path, new_rows, replace_accuracy: bool):
    rows = read_metrics(path) if path.exists() else []
    rows = [r for r in rows if (r.get("test_accuracy") is None) == replace_accuracy]
    write_metrics(path, rows + list(new_rows))
    write_summary(path.parent / "summary.json", rows + list(new_rows))


def cmd_probe(cfg: ExperimentConfig, out: Path, args) -> list:
    splits = load_probe_splits(cfg)
    targets = []
    if cfg.encoder == "pixels":
        targets.append((None, None))
    elif cfg.encoder == "random":
        targets.append((0, build_autoencoder(cfg.pretrain.architecture, seed=cfg.seed)))
    elif args.all_checkpoints:
        for rec in checkpoint_records(out):
            targets.append((rec.epoch, load_checkpoint(rec.path)[0]))
    else:
        model, rec = load_best_model(out)
        targets.append((rec.epoch, model))
    rows = []
    for epoch, model in targets:
        record = probe_features(model, splits, cfg.probe)
        for seed, acc in zip(record.seeds, record.test_accuracies):
            rows.append({"checkpoint_epoch": epoch, "seed": seed, "test_accuracy": acc,
                         "plan_id": cfg.encoder if model is None or cfg.encoder == "random" else _plan_id(cfg.pretrain.mask)})
        label = "pixels" if model is None else f"epoch {epoch}"
        print(f"{label}: accuracy {record.accuracy_mean:.4f} +- {record.accuracy_std:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    _merge_metrics(out / "metrics.csv", rows, replace_accuracy=True)
    return [out / "metrics.csv", out / "summary.json"]


def cmd_metrics(cfg: ExperimentConfig, out: Path, args) -> list:
    test = load_stl10(DatasetSpec(str(_root(cfg)), "test", with_labels=True))
    n_eval = min(cfg.metrics.eval_images, len(test))
    n_cov = min(cfg.metrics.covariance_batch, len(test))
    eval_images = test.array(np.arange(n_eval))
    conf = None
    if cfg.metrics.foreground_only:
        conf = confidence_array(load_confidences(cfg, "test", n_eval))
    plan = cfg.pretrain.mask
    checkpoints = [(0, out / "checkpoints" / "init.pt")] + [(r.epoch, Path(r.path)) for r in checkpoint_records(out)]
    if not (out / "checkpoints" / "init.pt").exists():
        raise FileNotFoundError(f"no pretraining run in {out}")
    rows = []
    for epoch, path in checkpoints:
        model, _ = load_checkpoint(path)
        cov = covariance_offdiagonal(extract_features(model, eval_images[:n_cov]))
        err, skipped = reconstruction_error(model, eval_images, plan, conf, cfg.metrics.foreground_only, seed=cfg.seed)
        rows.append({"checkpoint_epoch": epoch, "seed": cfg.seed, "covariance_offdiag": cov,
                     "reconstruction_error": err, "plan_id": _plan_id(plan)})
        print(f"epoch {epoch}: covariance {cov:.4f} reconstruction {err:.5f} (skipped {skipped})")
    model, _ = load_best_model(out)
    inputs = np.stack([apply_mask(eval_images[i], plan, np.random.default_rng([cfg.seed, i]),
                                  confidence=None if conf is None else conf[i])[0] for i in range(8)])
    np.savez(out / "reconstructions.npz", truth=eval_images[:8], inputs=inputs, preds=reconstruct(model, inputs))
    _merge_metrics(out / "metrics.csv", rows, replace_accuracy=False)
    return [out / "metrics.csv", out / "summary.json", out / "reconstructions.npz"]


def cmd_plot(cfg: ExperimentConfig, out: Path, args) -> list:
    run_dirs = [Path(d) for d in args.runs] or [out]
    return emit_plots(run_dirs, out / "figures")


def render_report(rows) -> str:
    best = best_sweep_row(rows)
    lines = ["ratio  val acc  test accuracy    best", "-----  -------  ---------------  ----"]
    for r in rows:
        mark = "  *" if r is best else ""
        lines.append(f"{r.ratio:5.2f}  {r.val_accuracy_mean:.4f}   {r.accuracy_mean:.4f}+-{r.accuracy_std:.4f}{mark}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: ExperimentConfig, out: Path, args) -> list:
    path = out / "sweep.csv"
    if not path.exists():
        raise FileNotFoundError(f"no sweep results at {path}")
    rows = read_sweep(path)
    if not rows:
        raise DataError(f"{path} is empty")
    text = render_report(rows)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return [out / "report.txt"]


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "preview-mask": cmd_preview_mask,
    "pretrain": cmd_pretrain,
    "sweep": cmd_sweep,
    "probe": cmd_probe,
    "metrics": cmd_metrics,
    "plot": cmd_plot,
    "report": cmd_report,
}


def write_run_manifest(out: Path, cfg: ExperimentConfig, command: str, started: float, artifacts):
    path = out / "run_manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest["config_hash"] = cfg.config_hash()
    manifest["code_version"] = __version__
    manifest["seeds"] = {"global": cfg.seed, "probe": list(cfg.probe.seeds)}
    manifest["commands"][command] = {
        "wall_clock_seconds": round(time.time() - started, 3),
        "artifacts": sorted(str(Path(a)) for a in artifacts if Path(a).exists()),
    }
    (out / "experiment.yaml").write_text(cfg.to_yaml())
    path.write_text(json.dumps(manifest, indent=2))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--preset", choices=PRESET_NAMES, help="named experiment condition")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable), e.g. pretrain.epochs=30")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output / run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="foveal-mim", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "preview-mask":
            p.add_argument("--index", type=int, default=0, help="unlabeled image to preview")
        if name == "probe":
            p.add_argument("--all-checkpoints", action="store_true", help="probe every saved checkpoint")
        if name == "plot":
            p.add_argument("runs", nargs="*", help="run directories (default: --out)")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset, args.overrides, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    started = time.time()
    try:
        artifacts = COMMANDS[args.command](cfg, out, args)
    except (FileNotFoundError, DataError, MissingSeriesError) as exc:
        print(f"missing data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # diagnostic snapshot for anything unexpected
        out.mkdir(parents=True, exist_ok=True)
        snapshot = {"command": args.command, "error": repr(exc), "traceback": traceback.format_exc(),
                    "config": cfg.to_dict(), "snapshot": getattr(exc, "snapshot", None)}
        (out / "failure.json").write_text(json.dumps(snapshot, indent=2, default=str))
        print(f"runtime failure: {exc} (details in {out / 'failure.json'})", file=sys.stderr)
        return EXIT_RUNTIME
    if args.command != "plot" or artifacts:
        out.mkdir(parents=True, exist_ok=True)
        write_run_manifest(out, cfg, args.command, started, artifacts)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
