"""Area-normalized masked reconstruction loss and foreground weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class DegenerateWeightsError(ValueError):
    """A sample's weight map sums to zero, so its loss is undefined."""

    def __init__(self, samples):
        self.samples = list(samples)
        super().__init__(f"weight map sums to zero for samples {self.samples}")


@dataclass
class LossReport:
    value: torch.Tensor
    support_area: torch.Tensor
    per_sample_values: torch.Tensor

    def item(self) -> float:
        return float(self.value.detach())


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x))


def masked_reconstruction_loss(pred, target, weights, channels_last: bool = True) -> LossReport:
    """Weighted squared error normalized by the weighted area of each sample.

    Per sample: ``sum_p sum_c w(p) (pred - target)^2 / (C * sum_p w(p))``;
    the batch value is the unweighted mean over samples.

    Args:
        pred, target: ``N x H x W x C`` (or ``N x C x H x W`` with
            ``channels_last=False``) arrays or tensors.
        weights: ``N x H x W`` loss-weight maps in [0, 1].
    """
    pred, target, weights = _as_tensor(pred), _as_tensor(target), _as_tensor(weights)
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.dim() == 3:
        pred, target = pred[None], target[None]
    if weights.dim() == 2:
        weights = weights[None]
    if channels_last:
        n, h, w, c = pred.shape
        wmap = weights.to(pred.dtype)[..., None]
    else:
        n, c, h, w = pred.shape
        wmap = weights.to(pred.dtype)[:, None]
    if tuple(weights.shape) != (n, h, w):
        raise ValueError(f"weights must have shape {(n, h, w)}, got {tuple(weights.shape)}")

    area = weights.to(pred.dtype).reshape(n, -1).sum(dim=1)
    bad = torch.nonzero(area <= 0).flatten().tolist()
    if bad:
        raise DegenerateWeightsError(bad)
    sq = (pred - target.to(pred.dtype)) ** 2
    per_sample = (wmap * sq).reshape(n, -1).sum(dim=1) / (c * area)
    return LossReport(per_sample.mean(), area, per_sample)


def apply_foreground_weighting(weights, confidence):
    """Pointwise product of loss weights and foreground confidence.

    Raises :class:`DegenerateWeightsError` for samples whose product is
    identically zero; callers skip and count those.
    """
    w = np.asarray(weights, dtype=np.float32)
    conf = np.asarray(confidence, dtype=np.float32)
    if w.shape != conf.shape:
        raise ValueError(f"weights {w.shape} and confidence {conf.shape} differ in extent")
    out = w * conf
    flat = out.reshape(-1, *out.shape[-2:]) if out.ndim >= 2 else out[None]
    bad = [i for i, m in enumerate(flat) if not m.any()]
    if bad:
        raise DegenerateWeightsError(bad)
    return out


def foreground_weighted_batch(weights, confidence):
    """Vectorized product for a batch; returns ``(weights, keep_mask)`` without raising."""
    out = np.asarray(weights, dtype=np.float32) * np.asarray(confidence, dtype=np.float32)
    keep = out.reshape(len(out), -1).sum(axis=1) > 0
    return out, keep
