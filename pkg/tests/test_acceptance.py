"""End-to-end acceptance checks. Each test prints one ``CRITERION n ... PASS|FAIL`` line."""

import contextlib
import csv
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import rand_image, toy_config
from stainshift import mff
from stainshift.backbone import alphas_cumprod, build_tiny_backbone, save_backbone
from stainshift.data import UnpairedLoader, save_image
from stainshift.generator import build_generator, translate
from stainshift.losses import (LossWeights, PerceptualDistance, adversarial_losses, cycle_loss,
                               identity_loss, reconstruction_loss, total_loss)
from stainshift.metrics import EmbeddingSet, fid, kid
from stainshift.toy import channel_distance, make_toy_domains
from stainshift.training import Trainer, changed, read_archive, run, snapshot


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def check(n, title):
        start = time.perf_counter()
        ok = False
        info = {}
        try:
            yield info
            ok = True
        finally:
            detail = f"; {info['detail']}" if "detail" in info else ""
            with capsys.disabled():
                print(f"\nCRITERION {n} {title}: {'PASS' if ok else 'FAIL'} "
                      f"({time.perf_counter() - start:.1f}s{detail})")
    return check


def oracle_alpha_sigma(t):
    betas = np.linspace(0.00085 ** 0.5, 0.012 ** 0.5, 1000) ** 2
    ac = np.cumprod(1.0 - betas)[t]
    return math.sqrt(ac), math.sqrt(1.0 - ac)


def plain_pipeline(bb, x, prompt, t):
    a, s = oracle_alpha_sigma(t)
    z = bb.encoder(x)
    eps = bb.unet(z, torch.tensor(t), bb.text_encoder.encode(prompt))
    return bb.decoder((z - s * eps) / a).clamp(-1, 1)


# --- 1. initialization identity --------------------------------------------------------------

def test_criterion_1_initialization_identity(criterion):
    with criterion(1, "initialization identity"):
        start = time.perf_counter()
        bb = build_tiny_backbone(seed=0)
        x = rand_image(20, 3, 32, 32, seed=1)
        with torch.no_grad():
            for t in (0, 999):
                g = build_generator(bb, "paraffin section", mff_mode="not_used", timestep=t)
                dev = (translate(x, g) - plain_pipeline(bb, x, "paraffin section", t)).abs().max()
                assert dev <= 1e-6, (t, dev)
            # with fusion on, only the latent sees the fused deepest feature at init
            g = build_generator(bb, "paraffin section", mff_mode="each_layer", timestep=999)
            glob = bb.encoder.features(x)[-1]
            q = [bb.encoder.features(x[..., r * 16:(r + 1) * 16, c * 16:(c + 1) * 16])[-1]
                 for r in range(2) for c in range(2)]
            local = torch.cat([torch.cat(q[:2], -1), torch.cat(q[2:], -1)], -2)
            z = bb.encoder.last(glob + local)
            a, s = oracle_alpha_sigma(999)
            eps = bb.unet(z, torch.tensor(999), bb.text_encoder.encode("paraffin section"))
            ref = bb.decoder((z - s * eps) / a).clamp(-1, 1)
            assert (g(x) - ref).abs().max() <= 1e-5
        assert torch.allclose(alphas_cumprod().double()[999],
                              torch.tensor(oracle_alpha_sigma(999)[0] ** 2, dtype=torch.float64))
        assert time.perf_counter() - start < 60


# --- 2. MFF algebra ----------------------------------------------------------------------------

def test_criterion_2_mff_algebra(criterion):
    with criterion(2, "MFF algebra"):
        start = time.perf_counter()
        gen = torch.Generator().manual_seed(0)
        shapes = [(3, 8, 8), (5, 4, 4), (7, 2, 2)]
        glob = mff.FeaturePyramid([torch.randn(2, c, h, w, generator=gen) for c, h, w in shapes])
        zero = mff.FeaturePyramid([torch.zeros_like(f) for f in glob], role="assembled")
        for mode in mff.MODES:
            fused = mff.fuse(glob, zero, mode)
            assert all(torch.equal(a, b) for a, b in zip(fused, glob))
        for rows, cols in ((1, 1), (2, 2), (4, 4)):
            for _ in range(3):
                pyrs = [mff.FeaturePyramid([torch.randn(2, c, h, w, generator=gen)
                                            for c, h, w in shapes], role="local")
                        for _ in range(rows * cols)]
                pos = [(r, c) for r in range(rows) for c in range(cols)]
                out = mff.assemble_local(pyrs, pos, rows, cols)
                for l, (_, h, w) in enumerate(shapes):
                    for r, c in pos:
                        block = out[l][..., r * h:(r + 1) * h, c * w:(c + 1) * w]
                        assert torch.equal(block, pyrs[r * cols + c][l])
        bb = build_tiny_backbone(seed=0)
        x = rand_image(2, 3, 32, 32, seed=9)
        g = build_generator(bb, "p", mff_mode="not_used", seed=3)
        with torch.no_grad():
            for conv in g.zero_convs:
                conv.weight.normal_()
            for p in g.parameters():
                if p.requires_grad:
                    p.add_(0.01)
            z = g.encoder(x)
            eps = g.unet(z, torch.tensor(g.scheduler.timestep), g.prompt_embedding)
            ref = mff.route_to_decoder(mff.FeaturePyramid(g.encoder.features(x)), g.zero_convs,
                                       g.decoder, g.scheduler.step(z, eps))[0].clamp(-1, 1)
            assert torch.equal(g(x), ref)
        assert time.perf_counter() - start < 60


# --- 3. frozen-parameter audit ----------------------------------------------------------------

def test_criterion_3_frozen_parameter_audit(criterion):
    with criterion(3, "frozen-parameter audit"):
        start = time.perf_counter()
        tr = Trainer(toy_config())
        x, y = make_toy_domains(16, 32, seed=2)
        loader = UnpairedLoader(x, y, 1, seed=0)
        params = tr.all_parameters()
        before = snapshot(params)
        frozen_buffers = {n: b.clone() for n, b in
                          [("g_x.prompt", tr.g_x.prompt_embedding), ("g_y.prompt", tr.g_y.prompt_embedding)]}
        text_before = snapshot({f"text.{n}": p for n, p in tr.backbone.text_encoder.named_parameters()})
        for _ in range(10):
            tr.train_step(*next(loader))
        diff = changed(before, params)
        allowed = [n for n in diff if ".lora_" in n or ".zero_convs." in n
                   or n.startswith(("d_x.head.", "d_y.head."))]
        assert diff and allowed == diff, sorted(set(diff) - set(allowed))
        assert not changed(text_before, {f"text.{n}": p
                                         for n, p in tr.backbone.text_encoder.named_parameters()})
        assert torch.equal(frozen_buffers["g_x.prompt"], tr.g_x.prompt_embedding)
        assert torch.equal(frozen_buffers["g_y.prompt"], tr.g_y.prompt_embedding)
        n_backbone = sum(1 for n in params if n.startswith("backbone."))
        assert n_backbone > 0
        assert time.perf_counter() - start < 300


# --- 4. loss oracles -------------------------------------------------------------------------

class _ConstDisc(torch.nn.Module):
    def __init__(self, real_logit, fake_logit):
        super().__init__()
        self.r, self.f = real_logit, fake_logit

    def forward(self, x):
        is_real = x.mean(dim=(1, 2, 3)) >= 0.5
        return torch.where(is_real, torch.tensor(self.r), torch.tensor(self.f))[:, None]


def test_criterion_4_loss_oracles(criterion):
    with criterion(4, "loss oracles"):
        real, fake = torch.ones(2, 3, 8, 8), torch.zeros(2, 3, 8, 8)
        d = _ConstDisc(0.0, 0.0)
        gen, disc = adversarial_losses(d, d, real, real, fake, fake)
        assert abs(gen.item() / 2 - math.log(2)) <= 1e-6
        assert abs(disc.item() / 2 - 0.6931) <= 1e-4
        d = _ConstDisc(2.0, -1.0)
        gen, disc = adversarial_losses(d, d, real, real, fake, fake)
        sp = lambda v: math.log1p(math.exp(v))  # noqa: E731  BCE(l, 1) = softplus(-l)
        assert abs(gen.item() - 2 * sp(1.0)) <= 1e-6
        assert abs(disc.item() - (sp(-2.0) + sp(-1.0))) <= 1e-6
        assert total_loss(1.0, 2.0, 3.0, LossWeights()) == 5.5

        p = PerceptualDistance()
        a, b = rand_image(2, 3, 16, 16, seed=1), rand_image(2, 3, 16, 16, seed=2)
        with torch.no_grad():
            ref = (a - b).abs().mean() + 10 * p(a, b)
            assert abs(reconstruction_loss(a, b, 1.0, 10.0, p).item() - ref.item()) <= 1e-6
            bb = build_tiny_backbone(seed=0)
            g_x = build_generator(bb, "frozen section", seed=1, timestep=0)
            g_y = build_generator(bb, "paraffin section", unet=g_x.unet, seed=11, timestep=0)
            for g in (g_x, g_y):
                for c in g.zero_convs:
                    c.weight.normal_(0, 0.05)
            x, y = rand_image(1, 3, 32, 32, seed=3), rand_image(1, 3, 32, 32, seed=4)
            w = LossWeights()
            cyc_ref = (reconstruction_loss(g_x(g_y(x)), x, 1.0, 10.0, p)
                       + reconstruction_loss(g_y(g_x(y)), y, 1.0, 10.0, p))
            assert abs(cycle_loss(g_x, g_y, x, y, w, p).item() - cyc_ref.item()) <= 1e-6
            idt_ref = (reconstruction_loss(g_x(x), x, 1.0, 1.0, p)
                       + reconstruction_loss(g_y(y), y, 1.0, 1.0, p))
            assert abs(identity_loss(g_x, g_y, x, y, w, p).item() - idt_ref.item()) <= 1e-6

        pd = PerceptualDistance().double()
        a = rand_image(1, 3, 8, 8, seed=5).double().requires_grad_(True)
        b = rand_image(1, 3, 8, 8, seed=6).double()
        assert torch.autograd.gradcheck(lambda t: reconstruction_loss(t, b, 1.0, 10.0, pd), (a,),
                                        eps=1e-6, atol=1e-8, rtol=1e-3)


# --- 5. metric oracles -------------------------------------------------------------------------

def _brute_mmd2(x, y):
    d = x.shape[1]
    k = lambda u, v: (float(u @ v) / d + 1.0) ** 3  # noqa: E731
    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sxy = sum(k(u, v) for u in x for v in y) / (m * n)
    return sxx + syy - 2 * sxy


def test_criterion_5_metric_oracles(criterion):
    with criterion(5, "metric oracles"):
        rng = np.random.default_rng(0)
        a = EmbeddingSet(rng.standard_normal((500, 16)), "t")
        assert fid(a, a) < 1e-3
        mu = np.array([1.0, 2.0, 0.0, -1.0, 0.5])
        g1 = EmbeddingSet(rng.standard_normal((5000, 5)), "t")
        g2 = EmbeddingSet(rng.standard_normal((5000, 5)) + mu, "t")
        assert abs(fid(g1, g2) - mu @ mu) <= 0.05 * (mu @ mu)
        for n in range(2, 11):
            x, y = rng.standard_normal((n, 4)), rng.standard_normal((n, 4)) + 0.5
            mean, _ = kid(EmbeddingSet(x, "t"), EmbeddingSet(y, "t"), subset_size=n, n_subsets=2)
            assert abs(mean - _brute_mmd2(x, y)) <= 1e-9


# --- 6. toy end-to-end -------------------------------------------------------------------------

def test_criterion_6_toy_end_to_end(criterion):
    with criterion(6, "toy end-to-end") as info:
        start = time.perf_counter()
        x, y = make_toy_domains(64, 64)
        x_val, y_val = make_toy_domains(32, 64, seed=100)
        tr = Trainer(toy_config(steps=500))
        loader = UnpairedLoader(x, y, 1, seed=0)

        def distance():
            tr.g_y.eval()
            with torch.no_grad():
                return channel_distance(tr.g_y(x_val), y_val)

        d0 = distance()
        cyc = [tr.train_step(*next(loader)).cyc for _ in range(500)]
        d1 = distance()
        means = [round(float(np.mean(cyc[i:i + 100])), 3) for i in range(0, 500, 100)]
        info["detail"] = f"channel distance {d0:.4f} -> {d1:.4f}, cycle means {means}"
        assert d1 <= 0.5 * d0, (d0, d1)
        assert all(b < a for a, b in zip(means, means[1:])), means
        assert time.perf_counter() - start < 2 * 3600


# --- 7. determinism and resume ----------------------------------------------------------------

def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_criterion_7_determinism_and_resume(criterion, tmp_path):
    with criterion(7, "determinism and resume"):
        x, y = make_toy_domains(8, 32, seed=7)
        mk = lambda: UnpairedLoader(x, y, 1, seed=0)  # noqa: E731
        a = run(toy_config(tmp_path / "a", steps=6, checkpoint_every=3), data=mk())
        b = run(toy_config(tmp_path / "b", steps=6, checkpoint_every=3), data=mk())
        assert open(a.loss_csv, "rb").read() == open(b.loss_csv, "rb").read()
        c = run(toy_config(tmp_path / "c", steps=6), data=mk(),
                resume=tmp_path / "a" / "run" / "step_000003.ckpt")
        assert c.steps_run == 3
        assert _rows(a.loss_csv)[4:] == _rows(c.loss_csv)[1:]
        _, pa = read_archive(tmp_path / "a" / "run" / "final.ckpt")
        _, pc = read_archive(tmp_path / "c" / "run" / "final.ckpt")
        for k, v in pa["trainable"].items():
            assert torch.equal(v, pc["trainable"][k]), k


# --- 8. ablation reachability -----------------------------------------------------------------

class _Encoder(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = torch.nn.Conv2d(3, 256, 4, 4)
        self.proj = torch.nn.Linear(256, 256)

    def forward(self, x):
        return self.proj(F.relu(self.conv(x)).mean(dim=(2, 3)))


@pytest.fixture(scope="module")
def ablation_assets(tmp_path_factory):
    from transformers import CLIPVisionConfig, CLIPVisionModel

    root = tmp_path_factory.mktemp("ablation")
    torch.manual_seed(0)
    CLIPVisionModel(CLIPVisionConfig(hidden_size=64, intermediate_size=128, num_hidden_layers=2,
                                     num_attention_heads=2, image_size=32, patch_size=8)
                    ).save_pretrained(root / "clip")
    torch.jit.script(_Encoder()).save(str(root / "pathology.pt"))
    save_backbone(build_tiny_backbone(seed=0), root / "backbone.pt")
    for name, imgs in zip(("x", "y"), make_toy_domains(4, 32, seed=3)):
        (root / name).mkdir()
        for i, im in enumerate(imgs):
            save_image(im, root / name / f"{i}.png")
    return root


ABLATIONS = [
    ("initialized", "pathology", "each_layer"),
    ("pretrained", "patch", "each_layer"),
    ("pretrained", "generic", "each_layer"),
    ("pretrained", "pathology", "each_layer"),
    ("pretrained", "pathology", "not_used"),
    ("pretrained", "pathology", "last_layer"),
]


def test_criterion_8_ablation_reachability(criterion, ablation_assets, tmp_path):
    root = ablation_assets
    disc = {
        "patch": {"backbone": "conv_patch"},
        "generic": {"backbone": "generic_vl", "checkpoint": str(root / "clip"),
                    "image_size": 32, "head_hidden": 16},
        "pathology": {"backbone": "pathology_vl", "checkpoint": str(root / "pathology.pt"),
                      "image_size": 32, "head_hidden": 8},
    }
    with criterion(8, "ablation reachability"):
        for i, (gen, d, mode) in enumerate(ABLATIONS):
            generator = {"timestep": 0}
            if gen == "pretrained":
                generator.update(backbone="pretrained", checkpoint=str(root / "backbone.pt"))
            cfg = toy_config(tmp_path / str(i), steps=2, generator=generator, disc=disc[d],
                             mff__mode=mode, data__dir_x=str(root / "x"),
                             data__dir_y=str(root / "y"))
            report = run(cfg)
            assert report.steps_run == 2, (gen, d, mode)
            assert all(math.isfinite(float(v)) for r in _rows(report.loss_csv)[1:] for v in r)
