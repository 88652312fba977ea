import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import rand_image, randn
from stainshift import mff
from stainshift.backbone import build_tiny_backbone
from stainshift.errors import ConfigError, DimensionError, FusionShapeError
from stainshift.generator import build_generator


def random_local_pyramids(rows, cols, shapes, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [mff.FeaturePyramid([torch.randn(batch, c, h, w, generator=g) for c, h, w in shapes],
                               role="local")
            for _ in range(rows * cols)]


def positions(rows, cols):
    return [(r, c) for r in range(rows) for c in range(cols)]


# --- patchify ------------------------------------------------------------------------

def test_patchify_512_into_2x2():
    x = torch.zeros(1, 3, 512, 512)
    grid = mff.patchify(x, 2, 2)
    assert grid.positions == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert all(p.shape == (1, 3, 256, 256) for p in grid.patches)


def test_patchify_1x1_is_input():
    x = rand_image(1, 3, 16, 16)
    grid = mff.patchify(x, 1, 1)
    assert torch.equal(grid.patches[0], x)


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), ph=st.integers(1, 6), pw=st.integers(1, 6),
       seed=st.integers(0, 1000))
def test_patchify_round_trip(rows, cols, ph, pw, seed):
    x = randn(2, 3, rows * ph, cols * pw, seed=seed)
    assert torch.equal(mff.reassemble(mff.patchify(x, rows, cols)), x)


def test_patchify_rejects_bad_tiling():
    with pytest.raises(DimensionError):
        mff.patchify(torch.zeros(1, 3, 10, 10), 3, 3)


# --- assemble_local --------------------------------------------------------------------

def test_assemble_2x2_of_64_gives_128():
    pyrs = random_local_pyramids(2, 2, [(4, 64, 64)])
    out = mff.assemble_local(pyrs, positions(2, 2), 2, 2)
    assert out[0].shape == (2, 4, 128, 128)


def test_assemble_constant():
    pyrs = [mff.FeaturePyramid([torch.full((1, 2, 3, 3), 2.5)], role="local") for _ in range(4)]
    out = mff.assemble_local(pyrs, positions(2, 2), 2, 2)
    assert torch.all(out[0] == 2.5)


@pytest.mark.parametrize("rows,cols", [(1, 1), (2, 2), (4, 4)])
@pytest.mark.parametrize("seed", range(5))
def test_block_extraction_oracle(rows, cols, seed):
    shapes = [(3, 8, 8), (5, 4, 4), (7, 2, 2)]
    pyrs = random_local_pyramids(rows, cols, shapes, seed=seed)
    out = mff.assemble_local(pyrs, positions(rows, cols), rows, cols)
    for l, (_, h, w) in enumerate(shapes):
        for r in range(rows):
            for c in range(cols):
                block = out[l][..., r * h:(r + 1) * h, c * w:(c + 1) * w]
                assert torch.equal(block, pyrs[r * cols + c][l])


def test_assemble_accepts_shuffled_positions():
    pyrs = random_local_pyramids(2, 2, [(2, 4, 4)])
    pos = positions(2, 2)
    order = [3, 0, 2, 1]
    out = mff.assemble_local([pyrs[i] for i in order], [pos[i] for i in order], 2, 2)
    ref = mff.assemble_local(pyrs, pos, 2, 2)
    assert torch.equal(out[0], ref[0])


def test_assemble_shape_mismatch_names_layer():
    pyrs = random_local_pyramids(2, 2, [(2, 4, 4), (2, 2, 2)])
    expected = mff.FeaturePyramid([torch.zeros(2, 2, 8, 8), torch.zeros(2, 2, 5, 5)])
    with pytest.raises(FusionShapeError, match="layer 1"):
        mff.assemble_local(pyrs, positions(2, 2), 2, 2, expected=expected)


def test_assemble_incomplete_grid():
    pyrs = random_local_pyramids(1, 3, [(2, 4, 4)])
    with pytest.raises(DimensionError):
        mff.assemble_local(pyrs, [(0, 0), (0, 1), (0, 1)], 1, 3)


# --- fuse --------------------------------------------------------------------------

def _pyr(seed, role="global"):
    g = torch.Generator().manual_seed(seed)
    return mff.FeaturePyramid([torch.randn(2, 3, s, s, generator=g) for s in (8, 4, 2)], role=role)


@pytest.mark.parametrize("mode", mff.MODES)
def test_zero_assembled_gives_global(mode):
    glob = _pyr(0)
    zero = mff.FeaturePyramid([torch.zeros_like(f) for f in glob], role="assembled")
    fused = mff.fuse(glob, zero, mode)
    assert all(torch.equal(a, b) for a, b in zip(fused, glob))


def test_last_layer_mode_changes_only_deepest():
    glob, asm = _pyr(0), _pyr(1, "assembled")
    fused = mff.fuse(glob, asm, "last_layer")
    assert torch.equal(fused[0], glob[0]) and torch.equal(fused[1], glob[1])
    assert torch.equal(fused[2], glob[2] + asm[2])


def test_not_used_returns_global():
    glob = _pyr(0)
    fused = mff.fuse(glob, None, "not_used")
    assert all(a is b for a, b in zip(fused, glob))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), mode=st.sampled_from(mff.MODES))
def test_fusion_additivity(seed, mode):
    glob, a1, a2 = _pyr(seed), _pyr(seed + 1, "assembled"), _pyr(seed + 2, "assembled")
    both = mff.FeaturePyramid([x + y for x, y in zip(a1, a2)], role="assembled")
    lhs = mff.fuse(glob, both, mode)
    rhs = mff.fuse(glob, a1, mode)
    fused = mff.fused_layers(mode, 3)
    for l in range(3):
        expected = rhs[l] + a2[l] if l in fused else rhs[l]
        torch.testing.assert_close(lhs[l], expected)


def test_fuse_shape_mismatch():
    glob = _pyr(0)
    bad = mff.FeaturePyramid([torch.zeros(2, 3, 8, 8), torch.zeros(2, 3, 3, 3),
                              torch.zeros(2, 3, 2, 2)], role="assembled")
    with pytest.raises(FusionShapeError, match="layer 1"):
        mff.fuse(glob, bad, "each_layer")


def test_unknown_mode():
    with pytest.raises(ConfigError):
        mff.fuse(_pyr(0), _pyr(1), "sometimes")


def test_pyramid_rejects_growing_dims():
    with pytest.raises(DimensionError):
        mff.FeaturePyramid([torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 4, 4)])


def test_uniform_image_each_layer_doubles_global():
    bb = build_tiny_backbone(seed=0)
    g = build_generator(bb, "p", mff_mode="each_layer", grid=(2, 2), local_adapters=False)
    x = torch.ones(1, 3, 32, 32) * torch.tensor([0.3, -0.2, 0.5]).view(1, 3, 1, 1)
    with torch.no_grad():
        fused, _ = g.encode(x)
        glob = bb.encoder.features(x)
    for f, gl in zip(fused, glob):
        torch.testing.assert_close(f, 2 * gl, atol=1e-5, rtol=1e-5)


def test_degenerate_1x1_grid_doubles_deepest_feature():
    bb = build_tiny_backbone(seed=0)
    g = build_generator(bb, "p", mff_mode="each_layer", grid=(1, 1), local_adapters=False)
    x = rand_image(2, 3, 32, 32, seed=4)
    with torch.no_grad():
        _, z = g.encode(x)
        ref = bb.encoder.last(2 * bb.encoder.features(x)[-1])
    torch.testing.assert_close(z, ref, atol=1e-5, rtol=1e-5)


# --- route_to_decoder -----------------------------------------------------------------

def _fused_for(bb, x):
    return mff.FeaturePyramid(bb.encoder.features(x), role="fused")


def test_zero_convs_at_init_match_plain_decoder():
    bb = build_tiny_backbone(seed=0)
    x = rand_image(1, 3, 32, 32)
    convs = mff.make_zero_convs(bb.arch.enc_channels, bb.arch.dec_channels)
    with torch.no_grad():
        fused = _fused_for(bb, x)
        z = bb.encoder.last(fused[-1])
        img, feats = mff.route_to_decoder(fused, convs, bb.decoder, z)
        assert torch.equal(img, bb.decoder(z))
    assert all(w == 0 for c in convs for w in (c.weight.abs().sum(), c.bias.abs().sum()))


def test_zero_conv_shapes_match_decoder_stages():
    bb = build_tiny_backbone(seed=0)
    x = rand_image(1, 3, 32, 32)
    convs = mff.make_zero_convs(bb.arch.enc_channels, bb.arch.dec_channels)
    with torch.no_grad():
        fused = _fused_for(bb, x)
        _, feats = bb.decoder(bb.encoder.last(fused[-1]), return_features=True)
        n = len(fused)
        for l, conv in enumerate(convs):
            assert conv(fused[n - 1 - l]).shape == feats[l].shape


def test_identity_zero_conv_shifts_first_decoder_stage_by_fused():
    """Stage 0 has no upstream skip, so its output moves by exactly F_fused^L."""
    bb = build_tiny_backbone(seed=0)
    x = rand_image(1, 3, 32, 32, seed=8)
    convs = mff.make_zero_convs(bb.arch.enc_channels, bb.arch.dec_channels)
    with torch.no_grad():
        c = convs[0]
        assert c.in_channels == c.out_channels
        c.weight.copy_(torch.eye(c.in_channels).view_as(c.weight))
        fused = _fused_for(bb, x)
        z = bb.encoder.last(fused[-1])
        _, with_skip = mff.route_to_decoder(fused, convs, bb.decoder, z)
        _, base = bb.decoder(z, return_features=True)
        torch.testing.assert_close(with_skip[0] - base[0], fused[-1], atol=1e-5, rtol=1e-5)


def test_missing_zero_conv_is_config_error():
    bb = build_tiny_backbone(seed=0)
    convs = mff.make_zero_convs(bb.arch.enc_channels, bb.arch.dec_channels)[:2]
    fused = _fused_for(bb, torch.zeros(1, 3, 16, 16))
    with pytest.raises(ConfigError):
        mff.route_to_decoder(fused, convs, bb.decoder, torch.zeros(1, 4, 2, 2))


# --- project_latent -----------------------------------------------------------------

def test_project_latent_zero_local_is_plain_latent():
    bb = build_tiny_backbone(seed=0)
    x = rand_image(1, 3, 32, 32)
    with torch.no_grad():
        glob = mff.FeaturePyramid(bb.encoder.features(x))
        zero = mff.FeaturePyramid([torch.zeros_like(f) for f in glob], role="assembled")
        z = mff.project_latent(mff.fuse(glob, zero, "each_layer")[-1], bb.encoder.last)
        assert torch.equal(z, bb.encoder(x))


def test_project_latent_matches_standalone_last_stage():
    bb = build_tiny_backbone(seed=0)
    h = randn(1, 32, 4, 4, seed=2)
    last = bb.encoder.last
    with torch.no_grad():
        ref = torch.nn.functional.group_norm(h, last.norm.num_groups, last.norm.weight,
                                             last.norm.bias, last.norm.eps)
        ref = torch.nn.functional.pad(ref * torch.sigmoid(ref), (1, 1, 1, 1), mode="replicate")
        ref = torch.nn.functional.conv2d(ref, last.conv_out.weight, last.conv_out.bias)
        ref = torch.nn.functional.conv2d(ref, last.quant_conv.weight, last.quant_conv.bias)
        ref = ref[:, :4] * last.scaling_factor
        torch.testing.assert_close(mff.project_latent(h, last), ref, atol=1e-6, rtol=1e-5)


def test_project_latent_batch_equivariance():
    bb = build_tiny_backbone(seed=0)
    h = randn(2, 32, 4, 4, seed=3)
    with torch.no_grad():
        z = mff.project_latent(h, bb.encoder.last)
        zp = mff.project_latent(h.flip(0), bb.encoder.last)
    torch.testing.assert_close(zp, z.flip(0))


def test_project_latent_channel_mismatch():
    bb = build_tiny_backbone(seed=0)
    with pytest.raises(DimensionError):
        mff.project_latent(torch.zeros(1, 7, 4, 4), bb.encoder.last)


# --- full generator reduction ----------------------------------------------------------

def test_not_used_reduces_to_no_mff_generator():
    bb = build_tiny_backbone(seed=0)
    x = rand_image(2, 3, 32, 32, seed=9)
    g = build_generator(bb, "p", mff_mode="not_used", seed=3)
    with torch.no_grad():
        for conv in g.zero_convs:
            conv.weight.normal_()
        for p in g.parameters():
            if p.requires_grad:
                p.add_(0.01)
        fused, z = g.encode(x)
        y_ref = mff.route_to_decoder(
            mff.FeaturePyramid(g.encoder.features(x)), g.zero_convs, g.decoder,
            g.scheduler.step(g.encoder(x), g.unet(g.encoder(x), torch.tensor(g.scheduler.timestep),
                                                   g.prompt_embedding)))[0].clamp(-1, 1)
        assert torch.equal(g(x), y_ref)
    assert g.local_encoder is None
