"""Multi-scale feature fusion.

The image is tiled into a grid of patches, a local encoder runs on the patches,
the per-patch features are put back side by side at their grid positions and
the result is added to the whole-image (global) features layer by layer. The
fused pyramid feeds the decoder skip connections and, at its deepest layer, the
latent projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError, DimensionError, FusionShapeError

MODES = ("not_used", "last_layer", "each_layer")


@dataclass
class FeaturePyramid:
    """Per-stage feature maps. Encoder roles are ordered shallow to deep;
    the ``decoder`` role keeps decoder stage order (coarse to fine)."""

    features: list
    role: str = "global"

    def __post_init__(self):
        if self.role == "decoder":
            return
        dims = [f.shape[-2:] for f in self.features]
        for a, b in zip(dims, dims[1:]):
            if b[0] > a[0] or b[1] > a[1]:
                raise DimensionError(f"{self.role} pyramid spatial dims increase: {a} -> {b}")

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return self.features[i]

    def __iter__(self):
        return iter(self.features)

    @property
    def shapes(self):
        return [tuple(f.shape) for f in self.features]


@dataclass
class PatchGrid:
    patches: list
    rows: int
    cols: int
    positions: list = field(default_factory=list)

    @property
    def patch_size(self):
        return tuple(self.patches[0].shape[-2:])

    def stacked(self):
        """All patches as one batch, patch-major: index ``i * B + b``."""
        return torch.cat(self.patches, dim=0)


def patchify(x, rows: int, cols: int) -> PatchGrid:
    h, w = x.shape[-2:]
    if rows < 1 or cols < 1 or h % rows or w % cols:
        raise DimensionError(f"image {h}x{w} does not tile into a {rows}x{cols} grid")
    ph, pw = h // rows, w // cols
    patches, positions = [], []
    for r in range(rows):
        for c in range(cols):
            patches.append(x[..., r * ph:(r + 1) * ph, c * pw:(c + 1) * pw])
            positions.append((r, c))
    return PatchGrid(patches, rows, cols, positions)


def _place(tiles, positions, rows, cols):
    if sorted(positions) != [(r, c) for r in range(rows) for c in range(cols)]:
        raise DimensionError(f"positions do not form a complete {rows}x{cols} grid")
    order = sorted(range(len(tiles)), key=lambda i: positions[i])
    tiles = [tiles[i] for i in order]
    shape = tiles[0].shape
    if any(t.shape != shape for t in tiles):
        raise FusionShapeError("local features differ in shape across patches")
    stack = torch.stack(tiles, 0)  # (rows*cols, B, C, h, w)
    b, c, h, w = shape
    stack = stack.view(rows, cols, b, c, h, w).permute(2, 3, 0, 4, 1, 5)
    return stack.reshape(b, c, rows * h, cols * w)


def reassemble(grid: PatchGrid):
    return _place(grid.patches, grid.positions, grid.rows, grid.cols)


def split_batched(feats, n_patches):
    """Split features of a patch-major batched forward into per-patch pyramids."""
    per_layer = [f.chunk(n_patches, dim=0) for f in feats]
    return [FeaturePyramid([layer[i] for layer in per_layer], role="local")
            for i in range(n_patches)]


def assemble_local(pyramids, positions, rows, cols, expected=None) -> FeaturePyramid:
    """Place local features side by side by grid position, per layer.

    ``expected`` (a global pyramid) enables the per-layer shape check.
    """
    n_layers = len(pyramids[0])
    if any(len(p) != n_layers for p in pyramids):
        raise FusionShapeError("local pyramids have different depths")
    out = []
    for l in range(n_layers):
        tile = _place([p[l] for p in pyramids], positions, rows, cols)
        if expected is not None and tile.shape != expected[l].shape:
            raise FusionShapeError(
                f"layer {l}: assembled local feature {tuple(tile.shape)} != global "
                f"{tuple(expected[l].shape)}"
            )
        out.append(tile)
    return FeaturePyramid(out, role="assembled")


def fused_layers(mode, n_layers):
    if mode not in MODES:
        raise ConfigError(f"mff mode must be one of {MODES}, got {mode!r}")
    if mode == "each_layer":
        return set(range(n_layers))
    if mode == "last_layer":
        return {n_layers - 1}
    return set()


def fuse(global_p: FeaturePyramid, assembled_p, mode="each_layer") -> FeaturePyramid:
    layers = fused_layers(mode, len(global_p))
    if not layers:
        return FeaturePyramid(list(global_p.features), role="fused")
    if assembled_p is None or len(assembled_p) != len(global_p):
        raise FusionShapeError("assembled pyramid missing or of wrong depth")
    out = []
    for l, g in enumerate(global_p):
        if l in layers:
            a = assembled_p[l]
            if a.shape != g.shape:
                raise FusionShapeError(f"layer {l}: {tuple(a.shape)} vs global {tuple(g.shape)}")
            out.append(g + a)
        else:
            out.append(g)
    return FeaturePyramid(out, role="fused")


def make_zero_convs(enc_channels, dec_channels) -> nn.ModuleList:
    """One 1x1 conv per decoder stage, fed by the mirrored encoder stage."""
    convs = nn.ModuleList()
    n = len(enc_channels)
    for l, cout in enumerate(dec_channels):
        conv = nn.Conv2d(enc_channels[n - 1 - l], cout, 1)
        nn.init.zeros_(conv.weight)
        nn.init.zeros_(conv.bias)
        convs.append(conv)
    return convs


def route_to_decoder(fused: FeaturePyramid, zero_convs, decoder, z):
    """Decode ``z`` with skip terms zero_conv_l(F_fused^{L-l+1}) added to
    decoder stage l. Returns (image, decoder feature pyramid)."""
    n = len(fused)
    if zero_convs is None or len(zero_convs) != n:
        raise ConfigError(f"need {n} zero convs for {n} fused layers, got "
                          f"{0 if zero_convs is None else len(zero_convs)}")
    skips = [zero_convs[l](fused[n - 1 - l]) for l in range(n)]
    image, feats = decoder(z, skips=skips, return_features=True)
    return image, FeaturePyramid(feats, role="decoder")


def project_latent(pre_latent, enc_last):
    expected = enc_last.norm.num_channels
    if pre_latent.shape[1] != expected:
        raise DimensionError(f"pre-latent feature has {pre_latent.shape[1]} channels, "
                             f"last encoder stage expects {expected}")
    return enc_last(pre_latent)
