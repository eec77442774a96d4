"""Independent reference computations used as test oracles.

The loop oracles are deliberately naive and share no code with the package.
The gradient check compares autograd against central differences.
"""

import math

import numpy as np
import torch

from foveal_mim.model import ArchitectureSpec, build_autoencoder
from foveal_mim.objective import masked_reconstruction_loss


def mean_color_loop(img):
    h, w, c = len(img), len(img[0]), len(img[0][0])
    sums = [0.0] * c
    for i in range(h):
        for j in range(w):
            for k in range(c):
                sums[k] += float(img[i][j][k])
    return [s / (h * w) for s in sums]


def masked_loss_loop(pred, target, weights):
    """Per-sample area-normalized weighted squared error, averaged over the batch."""
    per_sample = []
    for p, t, w in zip(pred, target, weights):
        h, wd, c = len(p), len(p[0]), len(p[0][0])
        num = 0.0
        area = 0.0
        for i in range(h):
            for j in range(wd):
                area += float(w[i][j])
                for k in range(c):
                    d = float(p[i][j][k]) - float(t[i][j][k])
                    num += float(w[i][j]) * d * d
        per_sample.append(num / (c * area))
    return sum(per_sample) / len(per_sample), per_sample


def count_disk_pixels(h, w, cy, cx, r):
    """Pixels with centers strictly inside a circle, clipped to the image."""
    n = 0
    for i in range(h):
        for j in range(w):
            if (i + 0.5 - cy) ** 2 + (j + 0.5 - cx) ** 2 < r * r:
                n += 1
    return n


def offdiag_loop(R):
    """Sum of squared off-diagonal correlations via explicit loops (sample std)."""
    n, d = len(R), len(R[0])
    cols = []
    for j in range(d):
        col = [float(R[i][j]) for i in range(n)]
        mu = sum(col) / n
        sd = math.sqrt(sum((x - mu) ** 2 for x in col) / (n - 1))
        cols.append([(x - mu) / sd for x in col])
    total = 0.0
    for a in range(d):
        for b in range(d):
            if a != b:
                cab = sum(cols[a][i] * cols[b][i] for i in range(n)) / (n - 1)
                total += cab * cab
    return total


def laplacian_energy(gray):
    """Response of the 3x3 discrete Laplacian (valid region) as a nested list."""
    h, w = len(gray), len(gray[0])
    out = [[0.0] * w for _ in range(h)]
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            out[i][j] = (gray[i - 1][j] + gray[i + 1][j] + gray[i][j - 1] + gray[i][j + 1] - 4 * gray[i][j])
    return out


def gradient_check(num_params=240, eps=1e-6, seed=0):
    """Max relative error between autograd and central differences on a float64 reduced model."""
    spec = ArchitectureSpec.reduced(image_size=16, base_channels=4)
    model = build_autoencoder(spec, seed=seed).double()
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    y = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    w = (torch.rand(2, 16, 16, generator=g, dtype=torch.float64) > 0.4).double()

    def loss():
        return masked_reconstruction_loss(model(x), y, w, channels_last=False).value

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=num_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            p = params[k].view(-1)
            i = int(f - offsets[k])
            analytic = params[k].grad.view(-1)[i].item()
            orig = p[i].item()
            p[i] = orig + eps
            up = loss().item()
            p[i] = orig - eps
            down = loss().item()
            p[i] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
