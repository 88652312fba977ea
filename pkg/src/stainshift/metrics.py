"""FID and KID between embedding sets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, LoadError, NumericError


@dataclass
class EmbeddingSet:
    features: np.ndarray
    extractor: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"embeddings must be N x d, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise NumericError("embedding set holds non-finite entries")

    def __len__(self):
        return self.features.shape[0]

    def save(self, path):
        np.savez(path, features=self.features, extractor=np.array(self.extractor))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["features"], str(z["extractor"]))


@dataclass
class MetricReport:
    fid: float
    kid_mean: float
    kid_std: float
    n_generated: int
    n_reference: int
    extractor: str
    config_hash: str
    kid_units: str = "x1e3"

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# --- extractors ---------------------------------------------------------------------

class TinyExtractor(nn.Module):
    """Fixed-seed random conv embedder for tests and toy runs."""

    def __init__(self, seed=0, dim=64):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 16, 3, 2, 1), nn.ReLU(),
                nn.Conv2d(16, 32, 3, 2, 1), nn.ReLU(),
                nn.Conv2d(32, dim, 3, 2, 1), nn.ReLU(),
            )
        self.extractor_id = f"tiny-seed{seed}-d{dim}"
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net(x).mean(dim=(2, 3))


class InceptionExtractor(nn.Module):
    """Inception-v3 2048-d pool features; weights loaded from a local file."""

    extractor_id = "inception-v3-pool3"

    def __init__(self, checkpoint):
        super().__init__()
        import torchvision

        if checkpoint is None or not Path(checkpoint).is_file():
            raise LoadError(f"inception weights not found: {checkpoint}")
        net = torchvision.models.inception_v3(weights=None, aux_logits=False, init_weights=False)
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        net.load_state_dict({k: v for k, v in state.items() if not k.startswith("AuxLogits")})
        net.fc = nn.Identity()
        self.net = net
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        x = F.interpolate((x + 1) / 2, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net((x - self.mean) / self.std)


def build_extractor(name="tiny", checkpoint=None, seed=0):
    if name == "tiny":
        return TinyExtractor(seed)
    if name == "inception":
        return InceptionExtractor(checkpoint)
    raise ConfigError(f"unknown extractor {name!r}")


@torch.no_grad()
def embed(images, extractor, batch_size=32) -> EmbeddingSet:
    """``images``: tensor N x 3 x H x W in [-1, 1] or an iterable of C x H x W tensors."""
    if isinstance(images, torch.Tensor):
        chunks = images.split(batch_size)
    else:
        images = list(images)
        chunks = [torch.stack(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    feats = [extractor(c).double().cpu().numpy() for c in chunks]
    if not feats:
        raise DataError("no images to embed")
    return EmbeddingSet(np.concatenate(feats), extractor.extractor_id)


# --- metrics ------------------------------------------------------------------------

def _sym_sqrt(mat):
    w, v = np.linalg.eigh(mat)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(sigma_a, sigma_b, eps=1e-6):
    """Tr((sigma_a sigma_b)^{1/2}) via the symmetric form sqrt(A) B sqrt(A)."""
    for jitter in (0.0, eps):
        a = sigma_a + jitter * np.eye(len(sigma_a))
        b = sigma_b + jitter * np.eye(len(sigma_b))
        try:
            root = _sym_sqrt(a)
            m = root @ b @ root
            w = np.linalg.eigvalsh((m + m.T) / 2)
        except np.linalg.LinAlgError:
            continue
        if np.isfinite(w).all():
            return float(np.sqrt(np.clip(w, 0, None)).sum())
    raise NumericError("covariance square root did not converge; "
                       "try more samples or regularise the covariances")


def fid(a: EmbeddingSet, b: EmbeddingSet) -> float:
    fa, fb = a.features, b.features
    if len(fa) < 2 or len(fb) < 2:
        raise DataError("FID needs at least two samples per set")
    if fa.shape[1] != fb.shape[1]:
        raise DataError(f"embedding widths differ: {fa.shape[1]} vs {fb.shape[1]}")
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    sa = np.atleast_2d(np.cov(fa, rowvar=False))
    sb = np.atleast_2d(np.cov(fb, rowvar=False))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * trace_sqrt_product(sa, sb))


def polynomial_kernel(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x, y):
    m, n = len(x), len(y)
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def kid(a: EmbeddingSet, b: EmbeddingSet, subset_size=1000, n_subsets=100, seed=0):
    """Mean and std of unbiased MMD^2 over random subsets (raw units)."""
    fa, fb = a.features, b.features
    if subset_size > min(len(fa), len(fb)):
        raise DataError(f"subset size {subset_size} exceeds set sizes {len(fa)}, {len(fb)}")
    if subset_size < 2:
        raise DataError("KID subsets need at least two samples")
    rng = np.random.default_rng(seed)
    vals = np.empty(n_subsets)
    for i in range(n_subsets):
        ia = rng.choice(len(fa), subset_size, replace=False)
        ib = rng.choice(len(fb), subset_size, replace=False)
        vals[i] = mmd2_unbiased(fa[ia], fb[ib])
    return float(vals.mean()), float(vals.std())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def report(generated: EmbeddingSet, reference: EmbeddingSet, subset_size=1000, n_subsets=100,
           seed=0) -> MetricReport:
    subset = min(subset_size, len(generated), len(reference))
    km, ks = kid(generated, reference, subset, n_subsets, seed)
    settings = {"extractor": generated.extractor, "subset_size": subset,
                "n_subsets": n_subsets, "seed": seed}
    return MetricReport(
        fid=fid(generated, reference),
        kid_mean=km * 1e3,
        kid_std=ks * 1e3,
        n_generated=len(generated),
        n_reference=len(reference),
        extractor=generated.extractor,
        config_hash=config_hash(settings),
    )
