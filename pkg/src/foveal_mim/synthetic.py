"""Procedural labeled image corpus written in the STL-10 binary layout.

Each image shows one of ten shape classes with random color, size,
position, rotation and surface texture over a smooth textured background.
The shape's soft silhouette doubles as a foreground-confidence map. A small
share of images get a washed-out silhouette so the segmentability filter
has something to discard.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from foveal_mim.dataio import STL10_SIZE, write_confidence_mask, write_stl10

SHAPES = ("disk", "square", "triangle", "ring", "cross", "ellipse", "star", "diamond", "crescent", "half_disk")


def _polygon(r, phi, radius, sides, theta):
    sector = 2 * math.pi / sides
    local = np.mod(phi - theta, sector) - sector / 2
    return r * np.cos(local) - radius * math.cos(math.pi / sides)


def shape_sdf(name: str, y, x, radius: float, theta: float) -> np.ndarray:
    """Approximate signed distance (negative inside) of a centered shape."""
    r = np.hypot(y, x)
    phi = np.arctan2(y, x)
    ct, st = math.cos(theta), math.sin(theta)
    u, v = ct * x + st * y, -st * x + ct * y
    if name == "disk":
        return r - radius
    if name == "square":
        return _polygon(r, phi, radius, 4, theta + math.pi / 4)
    if name == "triangle":
        return _polygon(r, phi, radius, 3, theta)
    if name == "diamond":
        return _polygon(r, phi, radius, 4, theta)
    if name == "ring":
        return np.abs(r - 0.7 * radius) - 0.3 * radius
    if name == "cross":
        arm = 0.3 * radius
        a = np.maximum(np.abs(u) - radius, np.abs(v) - arm)
        b = np.maximum(np.abs(v) - radius, np.abs(u) - arm)
        return np.minimum(a, b)
    if name == "ellipse":
        return (np.hypot(u / radius, v / (0.45 * radius)) - 1.0) * 0.45 * radius
    if name == "star":
        return r - radius * (0.62 + 0.38 * np.cos(5 * (phi - theta)))
    if name == "crescent":
        inner = np.hypot(u - 0.45 * radius, v) - 0.8 * radius
        return np.maximum(r - radius, -inner)
    if name == "half_disk":
        return np.maximum(r - radius, v)
    raise ValueError(f"unknown shape {name!r}")


def _smooth_noise(rng, size, cells):
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def render(label: int, rng, size: int = STL10_SIZE, washed_out: bool = False):
    """One ``(uint8 image, float confidence map)`` pair for class ``label``."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    bg_a, bg_b = rng.random(3), rng.random(3)
    g = _smooth_noise(rng, size, 3)[..., None]
    bg = bg_a * g + bg_b * (1 - g)
    bg += 0.15 * (_smooth_noise(rng, size, 12)[..., None] - 0.5)

    radius = rng.uniform(14, 30)
    cy = size / 2 + rng.uniform(-14, 14)
    cx = size / 2 + rng.uniform(-14, 14)
    theta = rng.uniform(-0.35, 0.35)
    sdf = shape_sdf(SHAPES[label], yy - cy, xx - cx, radius, theta)
    alpha = np.clip(0.5 - sdf, 0.0, 1.0)

    base = rng.random(3)
    period = rng.uniform(4, 12)
    angle = rng.uniform(0, math.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / period)
    fg = base * (0.75 + 0.25 * stripes[..., None])

    img = alpha[..., None] * fg + (1 - alpha[..., None]) * bg
    img += rng.normal(0, 0.03, img.shape)
    img = np.clip(img, 0, 1)
    conf = alpha * (rng.uniform(0.3, 0.7) if washed_out else 1.0)
    return np.rint(img * 255).astype(np.uint8), conf.astype(np.float32)


def generate(n: int, seed: int, washed_out_fraction: float = 0.08, labels=None):
    """``n`` images with balanced labels; returns ``(images, labels, confidences)``."""
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = np.arange(n) % len(SHAPES)
        labels = labels[rng.permutation(n)]
    images = np.empty((n, STL10_SIZE, STL10_SIZE, 3), dtype=np.uint8)
    confs = np.empty((n, STL10_SIZE, STL10_SIZE), dtype=np.float32)
    washed = rng.random(n) < washed_out_fraction
    for i in range(n):
        images[i], confs[i] = render(int(labels[i]), rng, washed_out=bool(washed[i]))
    return images, np.asarray(labels, dtype=np.int64), confs


def write_corpus(root, unlabeled: int = 1000, train: int = 5000, test: int = 8000, seed: int = 0,
                 confidence_dir=None):
    """Write all three splits to ``root`` and the unlabeled confidence maps as PNGs.

    The generated arrays are returned so callers can skip re-reading them.
    """
    root = Path(root)
    out = {}
    for offset, (split, n) in enumerate((("unlabeled", unlabeled), ("train", train), ("test", test))):
        if n <= 0:
            continue
        images, labels, confs = generate(n, seed * 1000 + offset)
        write_stl10(root, split, images, None if split == "unlabeled" else labels)
        out[split] = (images, labels, confs)
        if confidence_dir is not None:
            cdir = Path(confidence_dir) / split if split != "unlabeled" else Path(confidence_dir)
            for i, c in enumerate(confs):
                write_confidence_mask(cdir, i, c)
    return out
