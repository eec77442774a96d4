"""Input validation helpers shared by the transforms and estimators."""

from __future__ import annotations

import numpy as np


def check_image(img, name: str = "img") -> np.ndarray:
    """Validate a single ``H x W x C`` image in [0, 1].

    uint8 input is rescaled by 1/255; other dtypes are converted to float32
    unless already floating point.
    """
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be H x W x C, got shape {arr.shape}")
    if min(arr.shape) <= 0:
        raise ValueError(f"{name} has an empty axis: {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_images(X, name: str = "X", shape=None) -> np.ndarray:
    """Validate a batch ``N x H x W x C`` of images; returns float32."""
    arr = np.asarray(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32, copy=False)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must be N x H x W x C, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise ValueError(f"{name} images must have shape {tuple(shape)}, got {arr.shape[1:]}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must be finite and lie in [0, 1]")
    return arr


def check_weight_maps(W, n: int, hw, name: str = "weights") -> np.ndarray:
    arr = np.asarray(W, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape != (n, *hw):
        raise ValueError(f"{name} must have shape {(n, *hw)}, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
