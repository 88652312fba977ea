"""One-step latent diffusion backbone: VAE encoder/decoder, noise predictor,
prompt encoder and the single-step scheduler.

Two loaders share one structural contract:

* ``tiny-random`` builds small randomly initialised networks from a seed. The
  test suite and the toy runs use it, and it doubles as the "initialized
  generator" ablation.
* ``pretrained`` restores the same architecture from a backbone checkpoint
  written by :func:`save_backbone`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, LoadError

BACKBONE_FORMAT = "stainshift-backbone"
BACKBONE_VERSION = 1


@dataclass
class BackboneArch:
    image_channels: int = 3
    latent_channels: int = 4
    enc_channels: tuple = (16, 32, 32)
    dec_channels: tuple = (32, 32, 16)
    unet_channels: int = 32
    text_width: int = 32
    text_length: int = 8
    groups: int = 4
    scaling_factor: float = 1.0
    num_train_timesteps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.dec_channels = tuple(self.dec_channels)
        if len(self.enc_channels) != len(self.dec_channels):
            raise ConfigError("encoder and decoder need the same number of stages")
        for c in self.enc_channels + self.dec_channels + (self.unet_channels,):
            if c % self.groups:
                raise ConfigError(f"channel count {c} not divisible by groups={self.groups}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.enc_channels)

    def to_dict(self):
        return dataclasses.asdict(self)


def _conv(cin, cout, k=3, stride=1):
    # replicate padding keeps constant images constant, so patch and whole-image
    # encodings of a uniform input agree exactly
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="replicate")


class ResBlock(nn.Module):
    def __init__(self, cin, cout, groups, temb_dim=None):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = _conv(cin, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = _conv(cout, cout)
        self.temb_proj = nn.Linear(temb_dim, cout) if temb_dim else None
        self.shortcut = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb_proj is not None and temb is not None:
            h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class EncoderStage(nn.Module):
    def __init__(self, cin, cout, groups):
        super().__init__()
        self.block = ResBlock(cin, cout, groups)
        self.down = _conv(cout, cout, 3, stride=2)

    def forward(self, x):
        return self.down(self.block(x))


class EncoderLast(nn.Module):
    """Projects the deepest intermediate feature to the latent (mean of the
    posterior, times the scaling factor)."""

    def __init__(self, cin, latent_channels, groups, scaling_factor):
        super().__init__()
        self.norm = nn.GroupNorm(groups, cin)
        self.conv_out = _conv(cin, 2 * latent_channels)
        self.quant_conv = nn.Conv2d(2 * latent_channels, 2 * latent_channels, 1)
        self.latent_channels = latent_channels
        self.scaling_factor = scaling_factor

    def forward(self, h):
        moments = self.quant_conv(self.conv_out(F.silu(self.norm(h))))
        mean = moments[:, : self.latent_channels]
        return mean * self.scaling_factor


class Encoder(nn.Module):
    def __init__(self, arch: BackboneArch):
        super().__init__()
        chans = arch.enc_channels
        self.conv_in = _conv(arch.image_channels, chans[0])
        self.stages = nn.ModuleList()
        prev = chans[0]
        for c in chans:
            self.stages.append(EncoderStage(prev, c, arch.groups))
            prev = c
        self.last = EncoderLast(prev, arch.latent_channels, arch.groups, arch.scaling_factor)
        self.downsample_factor = arch.downsample_factor

    def features(self, x):
        """Per-stage outputs, shallow to deep."""
        f = self.downsample_factor
        if x.shape[-2] % f or x.shape[-1] % f:
            raise DimensionError(
                f"input {tuple(x.shape[-2:])} not divisible by the encoder downsampling factor {f}"
            )
        h = self.conv_in(x)
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x):
        return self.last(self.features(x)[-1])


class DecoderStage(nn.Module):
    def __init__(self, cin, cout, groups, upsample):
        super().__init__()
        self.upsample = upsample
        self.conv = _conv(cin, cout) if upsample else nn.Identity()
        self.block = ResBlock(cout if upsample else cin, cout, groups)

    def forward(self, h):
        if self.upsample:
            h = self.conv(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.block(h)


class Decoder(nn.Module):
    def __init__(self, arch: BackboneArch):
        super().__init__()
        chans = arch.dec_channels
        self.post_quant_conv = nn.Conv2d(arch.latent_channels, arch.latent_channels, 1)
        self.conv_in = _conv(arch.latent_channels, chans[0])
        self.stages = nn.ModuleList()
        prev = chans[0]
        for i, c in enumerate(chans):
            self.stages.append(DecoderStage(prev, c, arch.groups, upsample=i > 0))
            prev = c
        self.norm_out = nn.GroupNorm(arch.groups, prev)
        self.conv_out = _conv(prev, arch.image_channels)
        self.scaling_factor = arch.scaling_factor

    def forward(self, z, skips=None, return_features=False):
        """Decode ``z``. ``skips[l]`` (already passed through its zero conv) is
        added to the output of decoder stage ``l``."""
        h = self.conv_in(self.post_quant_conv(z / self.scaling_factor))
        feats = []
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if skips is not None and skips[i] is not None:
                h = h + skips[i]
            feats.append(h)
        h = F.interpolate(h, scale_factor=2.0, mode="nearest")
        out = self.conv_out(F.silu(self.norm_out(h)))
        if return_features:
            return out, feats
        return out


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class CrossAttention(nn.Module):
    def __init__(self, dim, context_dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        self.context_dim = context_dim

    def forward(self, h, context):
        b, c, hh, ww = h.shape
        tokens = h.flatten(2).transpose(1, 2)
        q = self.to_q(self.norm(tokens))
        k = self.to_k(context)
        v = self.to_v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.to_out(attn @ v)
        return h + out.transpose(1, 2).reshape(b, c, hh, ww)


class UNet(nn.Module):
    """Small text-conditioned noise predictor with one down/up level."""

    def __init__(self, arch: BackboneArch):
        super().__init__()
        c = arch.unet_channels
        g = arch.groups
        self.temb_dim = c
        self.time_mlp = nn.Sequential(nn.Linear(c, 2 * c), nn.SiLU(), nn.Linear(2 * c, 2 * c))
        self.conv_in = nn.Conv2d(arch.latent_channels, c, 3, padding=1)
        self.res_in = ResBlock(c, c, g, temb_dim=2 * c)
        self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.res_mid = ResBlock(2 * c, 2 * c, g, temb_dim=2 * c)
        self.attn = CrossAttention(2 * c, arch.text_width)
        self.up = nn.Conv2d(2 * c, c, 3, padding=1)
        self.res_out = ResBlock(c, c, g, temb_dim=2 * c)
        self.norm_out = nn.GroupNorm(g, c)
        self.conv_out = nn.Conv2d(c, arch.latent_channels, 3, padding=1)
        self.cross_attention_dim = arch.text_width

    def forward(self, z, t, context):
        if context.shape[-1] != self.cross_attention_dim:
            raise DimensionError(
                f"prompt embedding width {context.shape[-1]} != cross-attention width "
                f"{self.cross_attention_dim}"
            )
        if t.dim() == 0:
            t = t.expand(z.shape[0])
        if context.shape[0] == 1 and z.shape[0] > 1:
            context = context.expand(z.shape[0], -1, -1)
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim))
        h0 = self.res_in(self.conv_in(z), temb)
        h = self.res_mid(self.down(h0), temb)
        h = self.attn(h, context)
        h = self.up(F.interpolate(h, size=h0.shape[-2:], mode="nearest"))
        h = self.res_out(h + h0, temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class TextEncoder(nn.Module):
    """Byte-level prompt encoder."""

    def __init__(self, arch: BackboneArch):
        super().__init__()
        self.length = arch.text_length
        self.embed = nn.Embedding(258, arch.text_width)
        self.pos = nn.Parameter(torch.randn(arch.text_length, arch.text_width) * 0.02)
        self.proj = nn.Linear(arch.text_width, arch.text_width)
        self.norm = nn.LayerNorm(arch.text_width)

    def tokenize(self, prompt: str):
        ids = [b + 1 for b in prompt.encode("utf-8")][: self.length - 1] + [257]
        ids += [0] * (self.length - len(ids))
        return torch.tensor([ids], dtype=torch.long)

    def forward(self, ids):
        h = self.embed(ids) + self.pos
        return self.norm(h + F.gelu(self.proj(h)))

    @torch.no_grad()
    def encode(self, prompt: str):
        return self(self.tokenize(prompt))


@dataclass(frozen=True)
class SchedulerSpec:
    """Single-step update from ``timestep`` straight to the clean latent.

    ``alpha``/``sigma`` are sqrt(alphas_cumprod[t]) and sqrt(1 - alphas_cumprod[t]).
    """

    timestep: int
    alpha: float
    sigma: float
    num_train_timesteps: int

    def step(self, z, eps):
        return (z - self.sigma * eps) / self.alpha


def alphas_cumprod(num_train_timesteps=1000, beta_start=0.00085, beta_end=0.012):
    # "scaled_linear" schedule
    betas = torch.linspace(beta_start**0.5, beta_end**0.5, num_train_timesteps, dtype=torch.float64) ** 2
    return torch.cumprod(1.0 - betas, dim=0)


def make_scheduler(arch: BackboneArch, timestep=None) -> SchedulerSpec:
    if timestep is None:
        timestep = arch.num_train_timesteps - 1
    if not 0 <= timestep < arch.num_train_timesteps:
        raise ConfigError(
            f"timestep {timestep} outside trained range [0, {arch.num_train_timesteps})"
        )
    ac = alphas_cumprod(arch.num_train_timesteps, arch.beta_start, arch.beta_end)[timestep].item()
    return SchedulerSpec(int(timestep), math.sqrt(ac), math.sqrt(1.0 - ac), arch.num_train_timesteps)


@dataclass
class Backbone:
    """Frozen pre-trained pieces shared by every generator built on top."""

    arch: BackboneArch
    encoder: Encoder
    decoder: Decoder
    unet: UNet
    text_encoder: TextEncoder
    kind: str = "tiny-random"
    source: dict = field(default_factory=dict)

    def modules(self):
        return {"encoder": self.encoder, "decoder": self.decoder,
                "unet": self.unet, "text_encoder": self.text_encoder}

    def freeze(self):
        for m in self.modules().values():
            m.requires_grad_(False)
            m.eval()
        return self


def build_tiny_backbone(arch: BackboneArch | None = None, seed: int = 0) -> Backbone:
    arch = arch or BackboneArch()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bb = Backbone(arch, Encoder(arch), Decoder(arch), UNet(arch), TextEncoder(arch),
                      kind="tiny-random", source={"seed": seed})
    return bb.freeze()


def save_backbone(backbone: Backbone, path):
    state = {name: m.state_dict() for name, m in backbone.modules().items()}
    torch.save({"format": BACKBONE_FORMAT, "version": BACKBONE_VERSION,
                "arch": backbone.arch.to_dict(), "state": state}, path)


def load_backbone(kind="tiny-random", path=None, arch=None, seed=0) -> Backbone:
    if kind == "tiny-random":
        if isinstance(arch, dict):
            arch = BackboneArch(**arch)
        return build_tiny_backbone(arch, seed)
    if kind != "pretrained":
        raise ConfigError(f"unknown backbone kind {kind!r}")
    if path is None or not Path(path).is_file():
        raise LoadError(f"backbone checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise LoadError(f"cannot read backbone checkpoint {path}: {exc}") from exc
    if blob.get("format") != BACKBONE_FORMAT or blob.get("version") != BACKBONE_VERSION:
        raise LoadError(f"{path} is not a version-{BACKBONE_VERSION} backbone checkpoint")
    arch = BackboneArch(**blob["arch"])
    bb = Backbone(arch, Encoder(arch), Decoder(arch), UNet(arch), TextEncoder(arch),
                  kind="pretrained", source={"path": str(path)})
    for name, m in bb.modules().items():
        m.load_state_dict(blob["state"][name])
    return bb.freeze()
