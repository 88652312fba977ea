"""Synthetic two-domain data for smoke runs: green-tinted vs pink-tinted textures."""

from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

GREEN = (0.30, 0.62, 0.38)
PINK = (0.86, 0.38, 0.66)


def make_domain(n, color, size=64, seed=0):
    """``n`` images (N x 3 x size x size, in [-1, 1]) of smooth blobs in ``color``
    on a near-white background."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3, size, size), dtype=np.float32)
    color = np.asarray(color, dtype=np.float32)[:, None, None]
    for i in range(n):
        t = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16, mode="wrap")
        t = (t - t.min()) / (np.ptp(t) + 1e-8)
        t = np.clip(1.6 * t - 0.3, 0.0, 1.0)
        img = (1.0 - t) * 0.94 + t * color
        img = img + 0.02 * rng.standard_normal(img.shape)
        out[i] = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    return torch.from_numpy(out)


def make_toy_domains(n=64, size=64, seed=0):
    return make_domain(n, GREEN, size, seed), make_domain(n, PINK, size, seed + 1)


def channel_distance(a, b, levels=256):
    """Mean over channels of the 1-D Wasserstein distance between pixel-value
    distributions of two image batches."""
    qs = np.linspace(0.0, 1.0, levels)
    a = a.detach().cpu().double().numpy()
    b = b.detach().cpu().double().numpy()
    dists = []
    for c in range(a.shape[1]):
        qa = np.quantile(a[:, c].ravel(), qs)
        qb = np.quantile(b[:, c].ravel(), qs)
        dists.append(np.abs(qa - qb).mean())
    return float(np.mean(dists))
