"""Realism critics: a frozen pre-trained vision backbone with a small trainable
head, or a patch discriminator trained from scratch."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, LoadError, check_finite

KINDS = ("pathology_vl", "generic_vl", "conv_patch", "tiny_random")
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

_DEFAULT_INPUT = {
    "pathology_vl": (448, CLIP_MEAN, CLIP_STD),
    "generic_vl": (224, CLIP_MEAN, CLIP_STD),
    "tiny_random": (None, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
    "conv_patch": (None, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
}
_DEFAULT_HEAD_HIDDEN = {"pathology_vl": 256, "generic_vl": 256, "tiny_random": 32, "conv_patch": 0}

HEAD_FRACTION_LIMIT = 0.05


@dataclass
class DiscConfig:
    backbone: str = "tiny_random"
    checkpoint: str | None = None
    image_size: int | None = None
    mean: tuple | None = None
    std: tuple | None = None
    layers: list = field(default_factory=lambda: ["final"])
    head_hidden: int | None = None
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in KINDS:
            raise ConfigError(f"disc.backbone must be one of {KINDS}, got {self.backbone!r}")
        bad = set(self.layers) - {"final", "intermediate"}
        if bad or not self.layers:
            raise ConfigError(f"disc.layers entries must be 'final'/'intermediate', got {self.layers}")


class TinyVisionBackbone(nn.Module):
    """Random-weight conv feature extractor for tests."""

    def __init__(self, width=32, embed_dim=128):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(3, width, 3, 2, 1), nn.GELU(),
                                    nn.Conv2d(width, 2 * width, 3, 2, 1), nn.GELU())
        self.block2 = nn.Sequential(nn.Conv2d(2 * width, 4 * width, 3, 2, 1), nn.GELU(),
                                    nn.Conv2d(4 * width, embed_dim, 3, 1, 1))

    def forward(self, x, layers=("final",)):
        mid = self.block1(x)
        out = self.block2(mid)
        feats = []
        if "intermediate" in layers:
            feats.append(mid.mean(dim=(2, 3)))
        if "final" in layers:
            feats.append(out.mean(dim=(2, 3)))
        return torch.cat(feats, dim=1)


class TorchScriptBackbone(nn.Module):
    """Exported image encoder: normalised image batch -> embedding (B, d)."""

    def __init__(self, module):
        super().__init__()
        self.module = module

    def forward(self, x, layers=("final",)):
        if "intermediate" in layers:
            raise ConfigError("TorchScript backbones only expose the final embedding")
        out = self.module(x)
        if isinstance(out, (tuple, list)):
            out = out[0]
        return out.flatten(1) if out.dim() > 2 else out


class HFVisionBackbone(nn.Module):
    """Hugging Face vision tower (CLIP-style); CLS embedding per requested layer."""

    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, x, layers=("final",)):
        out = self.model(pixel_values=x, output_hidden_states="intermediate" in layers)
        feats = []
        if "intermediate" in layers:
            hs = out.hidden_states
            feats.append(hs[len(hs) // 2][:, 0])
        if "final" in layers:
            feats.append(out.pooler_output)
        return torch.cat(feats, dim=1)


def load_vision_backbone(path):
    if path is None or not Path(path).exists():
        raise LoadError(f"discriminator backbone checkpoint missing: {path}")
    path = Path(path)
    try:
        if path.is_dir():
            from transformers import AutoConfig, CLIPVisionModel, AutoModel

            cfg = AutoConfig.from_pretrained(path)
            model_cls = CLIPVisionModel if "clip" in cfg.model_type else AutoModel
            return HFVisionBackbone(model_cls.from_pretrained(path))
        return TorchScriptBackbone(torch.jit.load(str(path), map_location="cpu"))
    except LoadError:
        raise
    except Exception as exc:
        raise LoadError(f"cannot load discriminator backbone from {path}: {exc}") from exc


class PatchGAN(nn.Module):
    """70x70-style patch discriminator; outputs a logit map."""

    def __init__(self, in_channels=3, ndf=64, n_layers=3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2**n, 8)
            layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, 2, 1),
                       nn.InstanceNorm2d(ndf * mult, affine=True), nn.LeakyReLU(0.2)]
        prev, mult = mult, min(2**n_layers, 8)
        layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, 1, 1),
                   nn.InstanceNorm2d(ndf * mult, affine=True), nn.LeakyReLU(0.2)]
        self.trunk = nn.Sequential(*layers)
        self.out_channels = ndf * mult

    def forward(self, x, layers=("final",)):
        return self.trunk(x)


def _head(in_dim, hidden, spatial):
    if spatial:
        return nn.Conv2d(in_dim, 1, 4, 1, 1)
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 1))


def diff_augment(x):
    """Brightness, contrast and translation jitter; differentiable in ``x``."""
    b = x.shape[0]
    x = x + (torch.rand(b, 1, 1, 1, device=x.device) - 0.5)
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    x = (x - mean) * (torch.rand(b, 1, 1, 1, device=x.device) + 0.5) + mean
    shift = max(1, x.shape[-1] // 8)
    dx, dy = torch.randint(-shift, shift + 1, (2,)).tolist()
    return torch.roll(x, shifts=(dy, dx), dims=(2, 3))


class Discriminator(nn.Module):
    """D(x) = head(backbone(preprocess(x)))."""

    def __init__(self, cfg: DiscConfig):
        super().__init__()
        self.cfg = cfg
        self.kind = cfg.backbone
        size, mean, std = _DEFAULT_INPUT[cfg.backbone]
        self.image_size = cfg.image_size if cfg.image_size is not None else size
        self.register_buffer("mean", torch.tensor(cfg.mean or mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(cfg.std or std).view(1, 3, 1, 1), persistent=False)
        self.layers = tuple(cfg.layers)
        self.frozen = cfg.backbone != "conv_patch"

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            if cfg.backbone == "tiny_random":
                self.backbone = TinyVisionBackbone()
            elif cfg.backbone == "conv_patch":
                self.backbone = PatchGAN()
            else:
                self.backbone = load_vision_backbone(cfg.checkpoint)
            if self.frozen:
                self.backbone.requires_grad_(False)
                self.backbone.eval()
            probe_size = self.image_size or 64
            with torch.no_grad():
                feat = self.backbone(torch.zeros(1, 3, probe_size, probe_size), self.layers)
            spatial = feat.dim() == 4
            hidden = cfg.head_hidden or _DEFAULT_HEAD_HIDDEN[cfg.backbone]
            self.head = _head(feat.shape[1], hidden, spatial)

        if self.frozen:
            n_head = sum(p.numel() for p in self.head.parameters())
            n_backbone = sum(p.numel() for p in self.backbone.parameters())
            if n_head >= HEAD_FRACTION_LIMIT * n_backbone:
                raise ConfigError(
                    f"classifier head has {n_head} parameters, not below "
                    f"{HEAD_FRACTION_LIMIT:.0%} of the backbone's {n_backbone}; lower disc.head_hidden"
                )

    def train(self, mode=True):
        super().train(mode)
        if self.frozen:
            self.backbone.eval()
        return self

    def preprocess(self, x):
        x = (x + 1.0) / 2.0
        if self.image_size is not None and tuple(x.shape[-2:]) != (self.image_size, self.image_size):
            x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bilinear",
                              align_corners=False)
        return (x - self.mean) / self.std

    def forward(self, x):
        if self.cfg.augment and self.training:
            x = diff_augment(x)
        logits = self.head(self.backbone(self.preprocess(x), self.layers))
        return check_finite(logits, f"{self.kind} discriminator logits")

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_state(self):
        if self.frozen:
            return {f"head.{k}": v for k, v in self.head.state_dict().items()}
        return self.state_dict()


def score(x, d: Discriminator):
    return d(x)


def build_discriminator(cfg: DiscConfig | dict) -> Discriminator:
    if isinstance(cfg, dict):
        cfg = DiscConfig(**cfg)
    return Discriminator(cfg)
