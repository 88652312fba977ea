"""Adversarial, cycle, identity and reconstruction objectives."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, LoadError, NumericError


@dataclass
class LossWeights:
    lambda_1: float = 1.0
    lambda_p_cyc: float = 10.0
    lambda_p_idt: float = 1.0
    lambda_adv: float = 0.5
    lambda_cyc: float = 1.0
    lambda_idt: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not isinstance(v, (int, float)) or v < 0 or not math.isfinite(v):
                raise ConfigError(f"loss weight {k} must be a finite number >= 0, got {v!r}")


@dataclass
class LossBundle:
    adv_g: float
    adv_d: float
    cyc: float
    idt: float
    total: float
    terms: dict = field(default_factory=dict)

    CSV_FIELDS = ("adv_g", "adv_d", "cyc", "idt", "total")

    def row(self):
        return [getattr(self, k) for k in self.CSV_FIELDS]


# --- perceptual distance -------------------------------------------------------

class TinyPerceptualNet(nn.Module):
    def __init__(self, widths=(16, 32, 32)):
        super().__init__()
        self.stages = nn.ModuleList()
        prev = 3
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            self.stages.append(nn.Sequential(nn.Conv2d(prev, w, 3, stride, 1), nn.ReLU()))
            prev = w

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class VGGFeatures(nn.Module):
    """VGG16 taps at relu1_2, relu2_2, relu3_3, relu4_3, relu5_3."""

    TAPS = (3, 8, 15, 22, 29)

    def __init__(self, checkpoint):
        super().__init__()
        import torchvision

        vgg = torchvision.models.vgg16()
        if checkpoint is None or not Path(checkpoint).is_file():
            raise LoadError(f"VGG16 weights not found: {checkpoint}")
        vgg.load_state_dict(torch.load(checkpoint, map_location="cpu", weights_only=True))
        self.features = vgg.features[: self.TAPS[-1] + 1]
        self.register_buffer("shift", torch.tensor([-0.030, -0.088, -0.188]).view(1, 3, 1, 1))
        self.register_buffer("scale", torch.tensor([0.458, 0.448, 0.450]).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x - self.shift) / self.scale
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.TAPS:
                feats.append(x)
        return feats


@dataclass
class PerceptualConfig:
    network: str = "tiny"
    checkpoint: str | None = None
    lin_checkpoint: str | None = None
    seed: int = 0


class PerceptualDistance(nn.Module):
    """LPIPS-form distance: channel-normalised features, squared difference,
    non-negative per-channel weights, spatial mean, summed over layers."""

    def __init__(self, cfg: PerceptualConfig | None = None):
        super().__init__()
        cfg = cfg or PerceptualConfig()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            if cfg.network == "tiny":
                self.net = TinyPerceptualNet()
            elif cfg.network == "vgg16":
                self.net = VGGFeatures(cfg.checkpoint)
            else:
                raise ConfigError(f"unknown perceptual network {cfg.network!r}")
        with torch.no_grad():
            chans = [f.shape[1] for f in self.net(torch.zeros(1, 3, 32, 32))]
        self.lin = nn.ParameterList([nn.Parameter(torch.ones(1, c, 1, 1)) for c in chans])
        if cfg.lin_checkpoint:
            self._load_lin(cfg.lin_checkpoint)
        self.requires_grad_(False)
        self.eval()

    def _load_lin(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        keys = sorted(k for k in state if k.endswith("weight"))
        if len(keys) != len(self.lin):
            raise LoadError(f"{path}: expected {len(self.lin)} linear layers, found {len(keys)}")
        for p, k in zip(self.lin, keys):
            p.data.copy_(state[k].view_as(p).clamp_min(0))

    def forward(self, a, b):
        total = 0.0
        for fa, fb, w in zip(self.net(a), self.net(b), self.lin):
            na = F.normalize(fa, dim=1, eps=1e-10)
            nb = F.normalize(fb, dim=1, eps=1e-10)
            total = total + ((na - nb).pow(2) * w).sum(1).mean(dim=(1, 2))
        return total.mean()


# --- losses ---------------------------------------------------------------------

def reconstruction_terms(a, b, perceptual):
    if a.shape != b.shape:
        raise ValueError(f"reconstruction inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    l1 = (a - b).abs().mean()
    lp = perceptual(a, b) if perceptual is not None else a.new_zeros(())
    return l1, lp


def reconstruction_loss(a, b, lambda_1, lambda_p, perceptual=None):
    """lambda_1 * mean|a - b| + lambda_p * perceptual(a, b)."""
    l1, lp = reconstruction_terms(a, b, perceptual if lambda_p else None)
    return lambda_1 * l1 + lambda_p * lp


def _bce(logits, target):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def generator_adversarial_loss(d_x, d_y, fake_x, fake_y):
    """Non-saturating: each generator wants its fakes scored real."""
    return _bce(d_y(fake_y), 1.0) + _bce(d_x(fake_x), 1.0)


def discriminator_adversarial_loss(d_x, d_y, x, y, fake_x, fake_y):
    """Real scored 1, detached fakes scored 0; real/fake averaged per direction."""
    loss_y = 0.5 * (_bce(d_y(y), 1.0) + _bce(d_y(fake_y.detach()), 0.0))
    loss_x = 0.5 * (_bce(d_x(x), 1.0) + _bce(d_x(fake_x.detach()), 0.0))
    return loss_y + loss_x


def adversarial_losses(d_x, d_y, x, y, fake_x, fake_y):
    gen = generator_adversarial_loss(d_x, d_y, fake_x, fake_y)
    disc = discriminator_adversarial_loss(d_x, d_y, x, y, fake_x, fake_y)
    for name, t in (("adversarial generator term", gen), ("adversarial discriminator term", disc)):
        if not torch.isfinite(t):
            raise NumericError(f"non-finite {name}")
    return gen, disc


def cycle_loss(g_x, g_y, x, y, weights: LossWeights, perceptual=None, fakes=None):
    """Round trips X->Y->X and Y->X->Y. ``fakes=(fake_x, fake_y)`` reuses
    already computed translations."""
    fake_x, fake_y = fakes if fakes is not None else (g_x(y), g_y(x))
    rec_x = g_x(fake_y)
    rec_y = g_y(fake_x)
    return (reconstruction_loss(rec_x, x, weights.lambda_1, weights.lambda_p_cyc, perceptual)
            + reconstruction_loss(rec_y, y, weights.lambda_1, weights.lambda_p_cyc, perceptual))


def identity_loss(g_x, g_y, x, y, weights: LossWeights, perceptual=None):
    return (reconstruction_loss(g_x(x), x, weights.lambda_1, weights.lambda_p_idt, perceptual)
            + reconstruction_loss(g_y(y), y, weights.lambda_1, weights.lambda_p_idt, perceptual))


def total_loss(adv, cyc, idt, weights: LossWeights):
    return weights.lambda_adv * adv + weights.lambda_cyc * cyc + weights.lambda_idt * idt
