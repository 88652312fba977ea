"""One-step translation generator: encode, single denoising step, decode."""

from __future__ import annotations

import torch
import torch.nn as nn

from . import mff
from .backbone import Backbone, make_scheduler
from .errors import DimensionError, check_finite
from .lora import adapter_set, inject_adapters


def encode_with_features(x, enc):
    """Run ``enc`` and return (per-stage pyramid, pre-latent feature).

    The pre-latent feature is the deepest pyramid entry, the input of the
    encoder's last stage.
    """
    pyramid = mff.FeaturePyramid(enc.features(x), role="global")
    return pyramid, pyramid[-1]


def one_step_denoise(z_x, prompt_emb, unet, sched):
    check_finite(z_x, "z_x")
    t = torch.tensor(sched.timestep, dtype=torch.long)
    eps = unet(z_x, t, prompt_emb)
    z_y = sched.step(z_x, eps)
    return check_finite(z_y, "z_y (denoised latent)")


def _component_targets(targets, name):
    if isinstance(targets, dict):
        return targets.get(name, "all")
    return targets


class OneStepGenerator(nn.Module):
    """y = decode(step(encode_mff(x), unet(., prompt))) with fused skip connections.

    ``unet`` may be shared between generators; ``encoder``, ``local_encoder`` and
    ``decoder`` are adapter-carrying views over the frozen backbone.
    """

    def __init__(self, backbone: Backbone, prompt: str, unet, encoder, decoder, zero_convs,
                 local_encoder=None, mff_mode="each_layer", grid=(2, 2), timestep=None):
        super().__init__()
        mff.fused_layers(mff_mode, len(backbone.arch.enc_channels))
        self.arch = backbone.arch
        self.prompt = prompt
        self.unet = unet
        self.encoder = encoder
        self.local_encoder = local_encoder
        self.decoder = decoder
        self.zero_convs = zero_convs
        self.mff_mode = mff_mode
        self.grid = tuple(grid)
        self.scheduler = make_scheduler(backbone.arch, timestep)
        # the text encoder is frozen, so the embedding is computed once and the
        # encoder itself is not kept
        self.register_buffer("prompt_embedding", backbone.text_encoder.encode(prompt), persistent=False)

    def encode(self, x):
        """Returns (fused pyramid, z_x)."""
        global_p, _ = encode_with_features(x, self.encoder)
        if self.mff_mode == "not_used" or self.local_encoder is None:
            fused = mff.fuse(global_p, None, "not_used")
        else:
            grid = mff.patchify(x, *self.grid)
            local_feats = self.local_encoder.features(grid.stacked())
            local = mff.split_batched(local_feats, len(grid.patches))
            assembled = mff.assemble_local(local, grid.positions, grid.rows, grid.cols,
                                           expected=global_p)
            fused = mff.fuse(global_p, assembled, self.mff_mode)
        z_x = mff.project_latent(fused[-1], self.encoder.last)
        return fused, z_x

    def forward(self, x):
        if x.dim() != 4 or x.shape[0] == 0:
            raise DimensionError(f"expected a non-empty B x C x H x W batch, got {tuple(x.shape)}")
        fused, z_x = self.encode(x)
        z_y = one_step_denoise(z_x, self.prompt_embedding, self.unet, self.scheduler)
        y, _ = mff.route_to_decoder(fused, self.zero_convs, self.decoder, z_y)
        check_finite(y, "decoded image")
        return y.clamp(-1.0, 1.0)

    def manifest(self):
        unet_set = adapter_set(self.unet)
        return {
            "kind": "one-step",
            "prompt": self.prompt,
            "timestep": self.scheduler.timestep,
            "rank": unet_set.rank,
            "scaling": unet_set.scaling,
            "target_layers": {
                "unet": unet_set.target_layers,
                "encoder": adapter_set(self.encoder).target_layers,
                "decoder": adapter_set(self.decoder).target_layers,
                "local_encoder": (adapter_set(self.local_encoder).target_layers
                                  if self.local_encoder is not None else []),
            },
            "mff_mode": self.mff_mode,
            "grid": list(self.grid),
        }


class IdentityGenerator(nn.Module):
    """Test stub: ``x + w * x`` with ``w`` initialised to zero."""

    def __init__(self, prompt=""):
        super().__init__()
        self.prompt = prompt
        self.w = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return x + self.w * x

    def manifest(self):
        return {"kind": "identity", "prompt": self.prompt}


def build_generator(backbone: Backbone, prompt: str, rank=8, scaling=1.0, targets="all",
                    mff_mode="each_layer", grid=(2, 2), local_adapters=True, unet=None,
                    timestep=None, seed=0):
    """Wrap ``backbone`` with fresh adapters and zero convs.

    Pass ``unet`` to reuse an already adapted noise predictor.
    """
    if unet is None:
        unet = inject_adapters(backbone.unet, rank, scaling, _component_targets(targets, "unet"),
                               seed=seed)
    encoder = inject_adapters(backbone.encoder, rank, scaling,
                              _component_targets(targets, "encoder"), seed=seed + 1)
    decoder = inject_adapters(backbone.decoder, rank, scaling,
                              _component_targets(targets, "decoder"), seed=seed + 2)
    local = None
    if mff_mode != "not_used":
        if local_adapters:
            local = inject_adapters(backbone.encoder, rank, scaling,
                                    _component_targets(targets, "encoder"), seed=seed + 3)
        else:
            local = backbone.encoder
    zero_convs = mff.make_zero_convs(backbone.arch.enc_channels, backbone.arch.dec_channels)
    return OneStepGenerator(backbone, prompt, unet, encoder, decoder, zero_convs,
                            local_encoder=local, mff_mode=mff_mode, grid=grid, timestep=timestep)


def translate(x, g):
    return g(x)


def trainable_parameters(module):
    return [(n, p) for n, p in module.named_parameters() if p.requires_grad]


def unique_parameters(*modules):
    seen, out = set(), []
    for m in modules:
        for p in m.parameters():
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out
