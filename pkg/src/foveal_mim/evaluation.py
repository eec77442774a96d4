"""Representation-quality measurements: linear probes, latent decorrelation, reconstruction error."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from foveal_mim.imaging import MaskPlan, apply_mask
from foveal_mim.model import Autoencoder, ProbeHead, encode, load_checkpoint, parameter_checksum, reconstruct
from foveal_mim.objective import masked_reconstruction_loss
from foveal_mim.validation import check_images

logger = logging.getLogger(__name__)

ZERO_VARIANCE_TOL = 1e-12
METRICS_COLUMNS = ("checkpoint_epoch", "seed", "test_accuracy", "covariance_offdiag", "reconstruction_error", "plan_id")


class EncoderDriftError(RuntimeError):
    """Encoder parameters changed while it was supposed to be frozen."""


@dataclass
class ProbeConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-8
    batch_size: int = 512
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    max_epochs: int = 500
    patience: int = 25

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("need at least one probe seed")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("probe hyperparameters must be positive")


@dataclass
class ProbeSplits:
    """Image arrays (``N x H x W x C``, uint8 or float) and integer labels."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @classmethod
    def from_stl10(cls, train, test, seed: int = 0, val_size: int = 1000) -> "ProbeSplits":
        from foveal_mim.dataio import split_train_val

        tr, va = split_train_val(train.labels, seed=seed, val_size=val_size, expected=None)
        return cls(
            np.asarray(train.images[tr]), train.labels[tr],
            np.asarray(train.images[va]), train.labels[va],
            np.asarray(test.images), test.labels,
        )


@dataclass
class MetricsRecord:
    seeds: List[int]
    test_accuracies: List[float]
    val_accuracies: List[float] = field(default_factory=list)
    best_epochs: List[int] = field(default_factory=list)

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.test_accuracies))

    @property
    def accuracy_std(self) -> float:
        return float(np.std(self.test_accuracies))

    @property
    def val_accuracy_mean(self) -> float:
        return float(np.mean(self.val_accuracies)) if self.val_accuracies else float("nan")

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "test_accuracies": list(self.test_accuracies),
            "val_accuracies": list(self.val_accuracies),
            "best_epochs": list(self.best_epochs),
            "accuracy_mean": self.accuracy_mean,
            "accuracy_std": self.accuracy_std,
        }


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Affine softmax readout trained with Adam and early stopping on validation loss.

    ``fit`` takes precomputed features. When no validation set is passed,
    ``validation_fraction`` of the training data is held out (stratified).
    The parameters of the epoch with the lowest validation loss are kept.
    """

    def __init__(self, learning_rate=1e-4, weight_decay=1e-8, batch_size=512, max_epochs=500,
                 patience=25, validation_fraction=0.2, random_state=0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float32)
        if X_val is None:
            X, X_val, y, y_val = train_test_split(
                X, y, test_size=self.validation_fraction, stratify=y, random_state=self.random_state)
        else:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float32)
        self.classes_ = unique_labels(y, y_val)
        self.n_features_in_ = X.shape[1]
        yt = torch.as_tensor(np.searchsorted(self.classes_, y))
        yv = torch.as_tensor(np.searchsorted(self.classes_, y_val))
        Xt, Xv = torch.from_numpy(X), torch.from_numpy(X_val)

        gen = torch.Generator().manual_seed(int(self.random_state))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(self.random_state))
            head = ProbeHead(X.shape[1], len(self.classes_))
        opt = torch.optim.Adam(head.parameters(), lr=self.learning_rate, weight_decay=self.weight_decay)

        best_loss, best_state, best_epoch, stale = float("inf"), None, 0, 0
        self.history_ = []
        for epoch in range(1, self.max_epochs + 1):
            head.train()
            perm = torch.randperm(len(Xt), generator=gen)
            for start in range(0, len(Xt), self.batch_size):
                idx = perm[start:start + self.batch_size]
                loss = F.cross_entropy(head(Xt[idx]), yt[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            head.eval()
            with torch.no_grad():
                val_loss = float(F.cross_entropy(head(Xv), yv))
            self.history_.append(val_loss)
            if val_loss < best_loss:
                best_loss, best_epoch, stale = val_loss, epoch, 0
                best_state = copy.deepcopy(head.state_dict())
            else:
                stale += 1
                if stale >= self.patience:
                    break
        head.load_state_dict(best_state)
        head.eval()
        self.head_ = head
        self.best_epoch_ = best_epoch
        self.best_val_loss_ = best_loss
        self.val_accuracy_ = float((self._logits(X_val).argmax(1).numpy() == yv.numpy()).mean())
        return self

    def _logits(self, X):
        with torch.no_grad():
            return self.head_(torch.as_tensor(X, dtype=torch.float32))

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, probe expects {self.n_features_in_}")
        return self._logits(X).numpy()

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=1).numpy()

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


def flatten_latents(latents: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(latents.reshape(len(latents), -1), dtype=np.float32)


def extract_features(model: Optional[Autoencoder], images, batch_size: int = 256) -> np.ndarray:
    """Flattened latent codes, or flattened pixels when ``model`` is None."""
    if model is None:
        return flatten_latents(check_images(images))
    out = []
    for i in range(0, len(images), 2048):
        out.append(flatten_latents(encode(model, images[i:i + 2048], batch_size)))
    return np.concatenate(out)


def _resolve_encoder(encoder):
    if encoder is None or isinstance(encoder, Autoencoder):
        return encoder
    model, _ = load_checkpoint(encoder)
    return model


def probe_features(encoder, splits: ProbeSplits, config: ProbeConfig = ProbeConfig()) -> MetricsRecord:
    """Run the seeded probe protocol on an already-frozen encoder (or pixels when None)."""
    model = _resolve_encoder(encoder)
    before = None if model is None else parameter_checksum(model)
    F_train = extract_features(model, splits.X_train)
    F_val = extract_features(model, splits.X_val)
    F_test = extract_features(model, splits.X_test)
    if model is not None and parameter_checksum(model) != before:
        raise EncoderDriftError("encoder parameters changed during feature extraction")

    record = MetricsRecord([], [])
    for seed in config.seeds:
        clf = LinearProbeClassifier(config.learning_rate, config.weight_decay, config.batch_size,
                                    config.max_epochs, config.patience, random_state=seed)
        clf.fit(F_train, splits.y_train, F_val, splits.y_val)
        acc = float(clf.score(F_test, splits.y_test))
        record.seeds.append(int(seed))
        record.test_accuracies.append(acc)
        record.val_accuracies.append(clf.val_accuracy_)
        record.best_epochs.append(clf.best_epoch_)
        logger.info("probe seed %d: test accuracy %.4f (best epoch %d)", seed, acc, clf.best_epoch_)
    if model is not None and parameter_checksum(model) != before:
        raise EncoderDriftError("encoder parameters changed during probe training")
    return record


def train_linear_probe(encoder, splits: ProbeSplits, config: ProbeConfig = ProbeConfig()) -> MetricsRecord:
    """Linear probe on a frozen encoder (an :class:`Autoencoder` or checkpoint path)."""
    if encoder is None:
        raise ValueError("train_linear_probe needs an encoder; use pixel_probe_baseline for raw pixels")
    return probe_features(encoder, splits, config)


def pixel_probe_baseline(splits: ProbeSplits, config: ProbeConfig = ProbeConfig()) -> MetricsRecord:
    return probe_features(None, splits, config)


def zscore(R, ddof: int = 1, tol: float = ZERO_VARIANCE_TOL):
    """Z-score columns across rows; returns ``(Z, n_dropped)`` with constant columns removed."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2:
        raise ValueError(f"expected an n x d matrix, got shape {R.shape}")
    if R.shape[0] < 2:
        raise ValueError("need at least two samples")
    std = R.std(axis=0, ddof=ddof)
    keep = std >= tol
    Z = (R[:, keep] - R[:, keep].mean(axis=0)) / std[keep]
    return Z, int((~keep).sum())


def covariance_offdiagonal(R, return_dropped: bool = False):
    """Sum of squared off-diagonal entries of the correlation matrix of ``R`` (n x d).

    Columns are z-scored with the sample standard deviation, so the
    covariance ``Z^T Z / (n - 1)`` has a unit diagonal. The sum is obtained
    from the n x n Gram matrix: ``||Z Z^T||_F^2 / (n - 1)^2 - d``.
    Columns with zero variance are dropped.
    """
    Z, dropped = zscore(R)
    n, d = Z.shape
    gram = Z @ Z.T
    c = float(np.sum(gram * gram) / (n - 1) ** 2 - d)
    c = max(c, 0.0)
    return (c, dropped) if return_dropped else c


def covariance_offdiagonal_dense(R) -> float:
    """Reference computation through the explicit d x d covariance matrix."""
    Z, _ = zscore(R)
    n = Z.shape[0]
    C = Z.T @ Z / (n - 1)
    off = C - np.diag(np.diag(C))
    return float(np.sum(off * off))


def latent_covariance(model: Autoencoder, images) -> float:
    return covariance_offdiagonal(extract_features(model, images))


def reconstruction_error(model: Autoencoder, images, plan: MaskPlan, confidences=None,
                         foreground_only: bool = False, seed: int = 0, batch_size: int = 128):
    """Mean masked reconstruction loss over ``images`` under ``plan``.

    Sample ``i`` draws its mask from ``default_rng([seed, i])``. With
    ``foreground_only`` the weights are multiplied by the confidence maps and
    samples left without support are skipped. Returns ``(error, n_skipped)``.
    """
    if foreground_only and confidences is None:
        raise ValueError("foreground_only needs confidence maps")
    X = check_images(images)
    total, count, skipped = 0.0, 0, 0
    for start in range(0, len(X), batch_size):
        inputs, weights = [], []
        for i in range(start, min(start + batch_size, len(X))):
            conf = None if confidences is None else np.asarray(confidences[i], dtype=np.float32)
            m, w = apply_mask(X[i], plan, np.random.default_rng([seed, i]), confidence=conf)
            if foreground_only:
                w = w * conf
            inputs.append(m)
            weights.append(w)
        inputs, weights = np.stack(inputs), np.stack(weights)
        keep = weights.reshape(len(weights), -1).sum(axis=1) > 0
        skipped += int((~keep).sum())
        if not keep.any():
            continue
        pred = reconstruct(model, inputs[keep], batch_size)
        report = masked_reconstruction_loss(pred, X[start:start + len(keep)][keep], weights[keep])
        total += float(report.per_sample_values.sum())
        count += int(keep.sum())
    if count == 0:
        raise ValueError("no sample has a non-empty loss support")
    return total / count, skipped


def write_metrics(path, rows: Sequence[dict]):
    """Write ``metrics.csv``; missing columns are left empty."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRICS_COLUMNS})


def read_metrics(path) -> List[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v in ("", None):
                    parsed[k] = None
                elif k == "plan_id":
                    parsed[k] = v
                elif k in ("checkpoint_epoch", "seed"):
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v)
            out.append(parsed)
    return out


def summarize(rows: Sequence[dict]) -> dict:
    """Mean and std of every numeric metric, grouped by checkpoint epoch."""
    groups = {}
    for row in rows:
        groups.setdefault(row.get("checkpoint_epoch"), []).append(row)
    summary = {}
    for epoch, group in sorted(groups.items(), key=lambda kv: (kv[0] is None, kv[0])):
        entry = {}
        for key in ("test_accuracy", "covariance_offdiag", "reconstruction_error"):
            vals = [r[key] for r in group if r.get(key) is not None]
            if vals:
                entry[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        summary[str(epoch)] = entry
    return summary


def write_summary(path, rows: Sequence[dict]):
    Path(path).write_text(json.dumps(summarize(rows), indent=2))
