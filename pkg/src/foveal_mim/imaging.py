"""Masking transforms for masked image modeling.

Every transform takes a single ``H x W x C`` float image in [0, 1] and returns
the image shown to the encoder together with a ``H x W`` loss-weight map that
marks where reconstruction error is counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.ndimage import gaussian_filter
from scipy.optimize import brentq

from foveal_mim.validation import check_image

STRATEGIES = (
    "random_patches",
    "masked_periphery",
    "blurry_patches",
    "blurry_periphery",
    "foveal_filter",
    "none",
)
PATCH_STRATEGIES = ("random_patches", "blurry_patches")
CIRCLE_STRATEGIES = ("masked_periphery", "blurry_periphery", "foveal_filter")
BLUR_STRATEGIES = ("blurry_patches", "blurry_periphery")

FOVEAL_LEVELS = 6
BLUR_TRUNCATE = 3.0


@dataclass(frozen=True)
class Attention:
    """Second circular aperture restored to full resolution.

    ``center`` is ``(row, col)`` in continuous pixel coordinates (pixel ``i``
    spans ``[i, i + 1)``). When ``center`` is None it is drawn per call
    according to ``placement`` ("random" or "object"). A None ``radius``
    means "same as the fovea".
    """

    center: Optional[Tuple[float, float]] = None
    radius: Optional[float] = None
    placement: str = "random"

    def __post_init__(self):
        if self.radius is not None and not self.radius > 0:
            raise ValueError(f"attention radius must be > 0, got {self.radius}")
        if self.placement not in ("random", "object"):
            raise ValueError(f"unknown attention placement {self.placement!r}")


@dataclass(frozen=True)
class MaskPlan:
    strategy: str = "none"
    ratio: float = 0.0
    patch_size: int = 8
    fixed_layout: Optional[Tuple[int, ...]] = None
    blur_sigma: float = 8.0
    attention: Optional[Attention] = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")
        if self.strategy in BLUR_STRATEGIES and not self.blur_sigma > 0:
            raise ValueError(f"blur_sigma must be > 0, got {self.blur_sigma}")
        if self.fixed_layout is not None:
            object.__setattr__(self, "fixed_layout", tuple(int(i) for i in self.fixed_layout))

    def with_(self, **changes) -> "MaskPlan":
        return replace(self, **changes)


@dataclass(frozen=True)
class FixationSpec:
    center: Tuple[float, float]
    fovea_radius: float

    def __post_init__(self):
        if not self.fovea_radius > 0:
            raise ValueError(f"fovea_radius must be > 0, got {self.fovea_radius}")


def mean_color(img) -> np.ndarray:
    """Per-channel mean over all pixels, shape ``(C,)``."""
    img = check_image(img)
    return img.reshape(-1, img.shape[-1]).mean(axis=0, dtype=np.float64).astype(img.dtype)


def _fill(img, region, fill):
    return np.where(region[..., None], fill, img).astype(img.dtype, copy=False)


def _rng(plan: MaskPlan, rng):
    return np.random.default_rng(plan.seed) if rng is None else rng


def patch_grid(shape, patch_size: int) -> Tuple[int, int]:
    h, w = shape[:2]
    if h % patch_size or w % patch_size:
        raise ValueError(f"patch size {patch_size} does not tile a {h}x{w} image")
    return h // patch_size, w // patch_size


def num_masked_patches(ratio: float, num_patches: int) -> int:
    # Python's round() breaks ties to even
    return int(round(ratio * num_patches))


def sample_patch_layout(shape, plan: MaskPlan, rng=None) -> Tuple[int, ...]:
    """Indices (row-major over the patch grid) of the patches to mask."""
    gh, gw = patch_grid(shape, plan.patch_size)
    n = gh * gw
    k = num_masked_patches(plan.ratio, n)
    chosen = _rng(plan, rng).permutation(n)[:k]
    return tuple(sorted(int(i) for i in chosen))


def patch_region(shape, plan: MaskPlan, rng=None) -> np.ndarray:
    """Boolean ``H x W`` map of masked patches."""
    gh, gw = patch_grid(shape, plan.patch_size)
    layout = plan.fixed_layout
    if layout is None:
        layout = sample_patch_layout(shape, plan, rng)
    grid = np.zeros(gh * gw, dtype=bool)
    grid[list(layout)] = True
    p = plan.patch_size
    return np.repeat(np.repeat(grid.reshape(gh, gw), p, axis=0), p, axis=1)


def clipped_disk_area(shape, radius: float) -> float:
    """Area of the image rectangle covered by a centered circle of ``radius``."""
    h, w = shape[:2]
    if radius <= 0:
        return 0.0
    lim = min(radius, h / 2.0)
    area, _ = quad(lambda y: min(w, 2.0 * math.sqrt(max(radius * radius - y * y, 0.0))), -lim, lim,
                   points=[p for p in (-w / 2.0, w / 2.0) if -lim < p < lim], limit=200)
    return area


def periphery_radius(shape, ratio: float) -> float:
    """Radius of the centered circle leaving a ``1 - ratio`` area fraction visible.

    This is ``sqrt((1 - ratio) * H * W / pi)`` while the circle fits inside
    the image. Larger circles are clipped by the border, so the radius is
    then solved so that the clipped area matches instead.
    """
    h, w = shape[:2]
    target = (1.0 - ratio) * h * w
    r = math.sqrt(target / math.pi)
    if r <= min(h, w) / 2.0:
        return r
    corner = math.hypot(h, w) / 2.0
    if target >= h * w:
        return corner
    return brentq(lambda x: clipped_disk_area(shape, x) - target, min(h, w) / 2.0, corner, xtol=1e-9)


def disk(shape, center, radius: float) -> np.ndarray:
    """Pixels whose centers lie strictly closer than ``radius`` to ``center``."""
    h, w = shape[:2]
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    d2 = (rows[:, None] - center[0]) ** 2 + (cols[None, :] - center[1]) ** 2
    return d2 < radius * radius


def image_center(shape) -> Tuple[float, float]:
    return shape[0] / 2.0, shape[1] / 2.0


def periphery_region(shape, ratio: float) -> np.ndarray:
    """Boolean ``H x W`` map of the masked periphery (outside the central circle)."""
    return ~disk(shape, image_center(shape), periphery_radius(shape, ratio))


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur with a 3-sigma kernel and reflect padding."""
    if not sigma > 0:
        raise ValueError(f"blur sigma must be > 0, got {sigma}")
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect", truncate=BLUR_TRUNCATE)


def apply_random_patch_mask(img, plan: MaskPlan, rng=None):
    """Replace ``round(ratio * num_patches)`` patches with the mean color."""
    img = check_image(img)
    if plan.strategy != "random_patches":
        raise ValueError(f"expected random_patches plan, got {plan.strategy!r}")
    region = patch_region(img.shape, plan, rng)
    return _fill(img, region, mean_color(img)), region.astype(np.float32)


def apply_peripheral_mask(img, plan: MaskPlan, rng=None):
    img = check_image(img)
    if plan.strategy != "masked_periphery":
        raise ValueError(f"expected masked_periphery plan, got {plan.strategy!r}")
    region = periphery_region(img.shape, plan.ratio)
    return _fill(img, region, mean_color(img)), region.astype(np.float32)


def apply_blur_variant(img, plan: MaskPlan, rng=None):
    """Blurry counterpart of the patch or periphery mask.

    The blur is computed on the whole image and then composited into the
    region, so the region geometry and weight map equal the opaque variant.
    """
    img = check_image(img)
    if plan.strategy == "blurry_patches":
        region = patch_region(img.shape, plan, rng)
    elif plan.strategy == "blurry_periphery":
        region = periphery_region(img.shape, plan.ratio)
    else:
        raise ValueError(f"expected a blurry strategy, got {plan.strategy!r}")
    blurred = np.clip(gaussian_blur(img, plan.blur_sigma), 0.0, 1.0)
    out = np.where(region[..., None], blurred, img).astype(img.dtype, copy=False)
    return out, region.astype(np.float32)


def default_fixation(shape, plan: MaskPlan) -> FixationSpec:
    """Central fixation whose fovea leaves ``1 - ratio`` of the image sharp."""
    r = periphery_radius(shape, plan.ratio)
    return FixationSpec(center=image_center(shape), fovea_radius=max(r, 1e-6))


def foveal_levels(img, levels: int = FOVEAL_LEVELS) -> np.ndarray:
    """Stack of progressively blurred copies; level 0 is the input, level k has sigma 2**(k-1)."""
    stack = [img]
    for k in range(1, levels):
        stack.append(gaussian_blur(img, 2.0 ** (k - 1)))
    return np.stack(stack)


def eccentricity_level(shape, fixation: FixationSpec, levels: int = FOVEAL_LEVELS) -> np.ndarray:
    """Continuous pyramid level per pixel: 0 at the fovea edge, ``levels - 1`` at the farthest corner."""
    h, w = shape[:2]
    cy, cx = fixation.center
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    ecc = np.hypot(rows[:, None] - cy, cols[None, :] - cx)
    corners = [(0.5, 0.5), (0.5, w - 0.5), (h - 0.5, 0.5), (h - 0.5, w - 0.5)]
    far = max(math.hypot(r - cy, c - cx) for r, c in corners)
    span = max(far - fixation.fovea_radius, 1e-12)
    return (levels - 1) * np.clip((ecc - fixation.fovea_radius) / span, 0.0, 1.0)


def apply_foveal_filter(img, fixation: Optional[FixationSpec] = None, plan: Optional[MaskPlan] = None, rng=None):
    """Eccentricity-dependent blur around a sharp fovea.

    Each pixel blends the two blur levels adjacent to its continuous level,
    so blur grows monotonically with distance from the fixation point.
    """
    img = check_image(img)
    plan = plan or MaskPlan(strategy="foveal_filter")
    if plan.strategy != "foveal_filter":
        raise ValueError(f"expected foveal_filter plan, got {plan.strategy!r}")
    if fixation is None:
        fixation = default_fixation(img.shape, plan)
    h, w = img.shape[:2]
    cy, cx = fixation.center
    if not (0 <= cy <= h and 0 <= cx <= w):
        raise ValueError(f"fixation {fixation.center} lies outside the {h}x{w} image")

    fovea = disk(img.shape, fixation.center, fixation.fovea_radius)
    level = eccentricity_level(img.shape, fixation)
    stack = foveal_levels(img)
    lo = np.floor(level).astype(int)
    hi = np.minimum(lo + 1, FOVEAL_LEVELS - 1)
    t = (level - lo)[..., None]
    r, c = np.indices((h, w))
    blended = (1.0 - t) * stack[lo, r, c] + t * stack[hi, r, c]
    out = np.where(fovea[..., None], img, np.clip(blended, 0.0, 1.0)).astype(img.dtype, copy=False)
    return out, (~fovea).astype(np.float32)


def attention_radius(shape, plan: MaskPlan) -> float:
    if plan.attention is not None and plan.attention.radius is not None:
        return float(plan.attention.radius)
    return periphery_radius(shape, plan.ratio)


def confidence_centroid(confidence) -> Tuple[float, float]:
    conf = np.asarray(confidence, dtype=np.float64)
    total = conf.sum()
    if total <= 0:
        return image_center(conf.shape)
    r, c = np.indices(conf.shape)
    return float(((r + 0.5) * conf).sum() / total), float(((c + 0.5) * conf).sum() / total)


def place_attention(shape, radius: float, rng, placement: str = "random", confidence=None):
    """Center for the covert-attention aperture.

    "random" draws uniformly among centers keeping the circle inside the
    image (falling back to the image center when it cannot fit); "object"
    uses the foreground-confidence centroid.
    """
    h, w = shape[:2]
    if placement == "object":
        if confidence is None:
            raise ValueError("object placement needs a confidence map")
        return confidence_centroid(confidence)
    lo_r, hi_r = radius, h - radius
    lo_c, hi_c = radius, w - radius
    cy = rng.uniform(lo_r, hi_r) if hi_r > lo_r else h / 2.0
    cx = rng.uniform(lo_c, hi_c) if hi_c > lo_c else w / 2.0
    return float(cy), float(cx)


def _circle_touches_image(shape, center, radius) -> bool:
    h, w = shape[:2]
    ny = min(max(center[0], 0.0), float(h))
    nx = min(max(center[1], 0.0), float(w))
    return math.hypot(ny - center[0], nx - center[1]) < radius


def add_covert_attention(img, base: MaskPlan, rng=None, confidence=None):
    """Masked periphery plus a second full-resolution aperture.

    Pixels inside the attention circle are restored from the input and
    dropped from the weight map.
    """
    img = check_image(img)
    if base.strategy != "masked_periphery":
        raise ValueError(f"covert attention needs a masked_periphery base, got {base.strategy!r}")
    if base.attention is None:
        raise ValueError("plan has no attention field")
    radius = attention_radius(img.shape, base)
    center = base.attention.center
    if center is None:
        center = place_attention(img.shape, radius, _rng(base, rng), base.attention.placement, confidence)
    if not _circle_touches_image(img.shape, center, radius):
        raise ValueError(f"attention circle at {center} with radius {radius} lies outside the image")
    out, weights = apply_peripheral_mask(img, base.with_(attention=None))
    aperture = disk(img.shape, center, radius)
    out = np.where(aperture[..., None], img, out).astype(img.dtype, copy=False)
    weights = np.where(aperture, 0.0, weights).astype(np.float32)
    return out, weights


def apply_mask(img, plan: MaskPlan, rng=None, confidence=None, fixation=None):
    """Dispatch ``plan`` to its transform; returns ``(image, weight_map)``.

    ``rng`` defaults to a generator seeded from ``plan.seed`` so the same
    plan always produces the same output.
    """
    img = check_image(img)
    s = plan.strategy
    if s == "none":
        return img.copy(), np.ones(img.shape[:2], dtype=np.float32)
    if s == "random_patches":
        return apply_random_patch_mask(img, plan, rng)
    if s == "masked_periphery":
        if plan.attention is not None:
            return add_covert_attention(img, plan, rng, confidence)
        return apply_peripheral_mask(img, plan)
    if s in BLUR_STRATEGIES:
        return apply_blur_variant(img, plan, rng)
    return apply_foveal_filter(img, fixation, plan)


def mask_batch(images, plan: MaskPlan, seeds: Sequence, confidences=None):
    """Mask a batch with one generator per sample seeded from ``seeds[i]``."""
    out = np.empty_like(images)
    weights = np.empty(images.shape[:3], dtype=np.float32)
    for i, img in enumerate(images):
        conf = None if confidences is None else confidences[i]
        out[i], weights[i] = apply_mask(img, plan, np.random.default_rng(seeds[i]), conf)
    return out, weights
