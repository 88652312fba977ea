"""Dual-mapping adversarial training with shared noise predictor."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import metrics
from .backbone import load_backbone
from .config import TrainConfig
from .data import UnpairedLoader, build_loader, list_images, load_image
from .discriminator import build_discriminator
from .errors import CheckpointError, ConfigError, NumericError
from .generator import IdentityGenerator, build_generator, unique_parameters
from .losses import (LossBundle, PerceptualDistance, cycle_loss, discriminator_adversarial_loss,
                     generator_adversarial_loss, identity_loss, total_loss)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stainshift-checkpoint"
SCHEMA_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def build_dual_generators(cfg: TrainConfig, backbone=None):
    """G_X (Y -> X, prompt c_x) and G_Y (X -> Y, prompt c_y) sharing one adapted UNet."""
    gcfg = cfg.generator
    if gcfg.backbone == "identity":
        return IdentityGenerator(cfg.prompts.c_x), IdentityGenerator(cfg.prompts.c_y), None
    if backbone is None:
        backbone = load_backbone(gcfg.backbone, gcfg.checkpoint, gcfg.arch or None, gcfg.backbone_seed)
    common = dict(rank=gcfg.rank, scaling=gcfg.scaling, targets=gcfg.targets,
                  mff_mode=cfg.mff.mode, grid=cfg.mff.grid, local_adapters=gcfg.local_adapters,
                  timestep=gcfg.timestep)
    g_x = build_generator(backbone, cfg.prompts.c_x, seed=cfg.seed * 100 + 1, **common)
    g_y = build_generator(backbone, cfg.prompts.c_y, unet=g_x.unet, seed=cfg.seed * 100 + 11, **common)
    return g_x, g_y, backbone


def _named_trainable(module, prefix, skip=()):
    out = {}
    for name, p in module.named_parameters():
        if p.requires_grad and not any(name.startswith(s) for s in skip):
            out[f"{prefix}{name}"] = p
    return out


def _first_nonfinite(terms):
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            return name
    return None


class Trainer:
    def __init__(self, cfg: TrainConfig, backbone=None):
        self.cfg = cfg
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        self.g_x, self.g_y, self.backbone = build_dual_generators(cfg, backbone)
        self.d_x = build_discriminator({**cfg.disc.__dict__, "seed": cfg.disc.seed})
        self.d_y = build_discriminator({**cfg.disc.__dict__, "seed": cfg.disc.seed + 1})
        self.perceptual = PerceptualDistance(cfg.perceptual)
        o = cfg.optimizer
        self.gen_params = unique_parameters(self.g_x, self.g_y)
        self.disc_params = unique_parameters(self.d_x, self.d_y)
        self.opt_g = torch.optim.Adam(self.gen_params, lr=o.lr, betas=(o.beta1, o.beta2))
        self.opt_d = torch.optim.Adam(self.disc_params, lr=o.disc_lr or o.lr, betas=(o.beta1, o.beta2))
        self.step = 0
        self.last_grad_norm = None
        self.device = torch.device("cpu")

    def to(self, device):
        self.device = torch.device(device)
        for m in (self.g_x, self.g_y, self.d_x, self.d_y, self.perceptual):
            m.to(device)
        return self

    # -- parameters ------------------------------------------------------------

    def trainable_tensors(self):
        """Name -> tensor for everything a checkpoint stores."""
        out = {}
        shared_unet = isinstance(getattr(self.g_x, "unet", None), torch.nn.Module)
        if shared_unet:
            out.update(_named_trainable(self.g_x.unet, "unet."))
        skip = ("unet.",) if shared_unet else ()
        out.update(_named_trainable(self.g_x, "g_x.", skip))
        out.update(_named_trainable(self.g_y, "g_y.", skip))
        for tag, d in (("d_x.", self.d_x), ("d_y.", self.d_y)):
            out.update({f"{tag}{k}": v for k, v in d.trainable_state().items()})
        return out

    def all_parameters(self):
        """Every distinct parameter tensor in the system with one canonical name."""
        seen, out = set(), {}
        groups = [("g_x.", self.g_x), ("g_y.", self.g_y), ("d_x.", self.d_x), ("d_y.", self.d_y)]
        if self.backbone is not None:
            groups = [(f"backbone.{k}.", m) for k, m in self.backbone.modules().items()] + groups
        for prefix, module in groups:
            for name, p in module.named_parameters(remove_duplicate=False):
                if id(p) not in seen:
                    seen.add(id(p))
                    out[prefix + name] = p
        return out

    # -- one iteration -----------------------------------------------------------

    def _set_disc_grad(self, flag):
        for p in self.disc_params:
            p.requires_grad_(flag)

    def train_step(self, x, y) -> LossBundle:
        w = self.cfg.loss
        self.g_x.train()
        self.g_y.train()
        self.d_x.train()
        self.d_y.train()

        # generator update, discriminators held fixed
        self._set_disc_grad(False)
        fake_y = self.g_y(x)
        fake_x = self.g_x(y)
        adv_g = generator_adversarial_loss(self.d_x, self.d_y, fake_x, fake_y)
        cyc = cycle_loss(self.g_x, self.g_y, x, y, w, self.perceptual, fakes=(fake_x, fake_y))
        idt = identity_loss(self.g_x, self.g_y, x, y, w, self.perceptual)
        total = total_loss(adv_g, cyc, idt, w)
        bad = _first_nonfinite({"adv_g": adv_g, "cyc": cyc, "idt": idt, "total": total})
        if bad:
            self._set_disc_grad(True)
            raise NumericError(f"step {self.step + 1}: non-finite loss term {bad}")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        grads = [p.grad for p in self.gen_params if p.grad is not None]
        self.last_grad_norm = (torch.linalg.vector_norm(torch.stack([g.norm() for g in grads])).item()
                               if grads else 0.0)
        self.opt_g.step()

        # discriminator update on detached fakes
        self._set_disc_grad(True)
        adv_d = discriminator_adversarial_loss(self.d_x, self.d_y, x, y, fake_x, fake_y)
        if not torch.isfinite(adv_d):
            raise NumericError(f"step {self.step + 1}: non-finite loss term adv_d")
        if self.disc_params:
            self.opt_d.zero_grad(set_to_none=True)
            adv_d.backward()
            self.opt_d.step()

        self.step += 1
        return LossBundle(adv_g=adv_g.item(), adv_d=adv_d.item(), cyc=cyc.item(), idt=idt.item(),
                          total=total.item())

    # -- checkpointing -------------------------------------------------------------

    def manifest(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "schema_version": SCHEMA_VERSION,
            "step": self.step,
            "config_hash": self.cfg.model_hash(),
            "config": self.cfg.to_dict(),
            "generators": {"g_x": self.g_x.manifest(), "g_y": self.g_y.manifest()},
        }

    def state_payload(self, loader=None):
        return {
            "trainable": {k: v.detach().cpu().clone() for k, v in self.trainable_tensors().items()},
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "loader": loader.state_dict() if loader is not None else None,
        }

    def save(self, path, loader=None):
        buf = io.BytesIO()
        torch.save(self.state_payload(loader), buf)
        write_archive(path, self.manifest(), buf.getvalue())
        return Path(path)

    def load_payload(self, payload, loader=None, weights_only=False):
        tensors = self.trainable_tensors()
        stored = payload["trainable"]
        if set(stored) != set(tensors):
            missing = sorted(set(tensors) - set(stored))[:3]
            extra = sorted(set(stored) - set(tensors))[:3]
            raise CheckpointError(f"checkpoint tensors do not match the model "
                                  f"(missing {missing}, unexpected {extra})")
        with torch.no_grad():
            for k, t in tensors.items():
                if t.shape != stored[k].shape:
                    raise CheckpointError(f"{k}: shape {tuple(stored[k].shape)} != {tuple(t.shape)}")
                t.copy_(stored[k])
        if weights_only:
            return
        self.opt_g.load_state_dict(payload["opt_g"])
        self.opt_d.load_state_dict(payload["opt_d"])
        torch.set_rng_state(payload["torch_rng"])
        if loader is not None and payload.get("loader") is not None:
            loader.load_state_dict(payload["loader"])

    @classmethod
    def from_checkpoint(cls, path, cfg=None, loader=None, backbone=None, weights_only=False):
        manifest, payload = read_archive(path)
        from .config import config_from_dict

        stored_cfg = config_from_dict(manifest["config"])
        cfg = cfg or stored_cfg
        if cfg.model_hash() != manifest["config_hash"]:
            raise CheckpointError(f"{path}: config hash {manifest['config_hash']} does not match "
                                  f"the current configuration ({cfg.model_hash()})")
        trainer = cls(cfg, backbone)
        trainer.load_payload(payload, loader, weights_only=weights_only)
        trainer.step = manifest["step"]
        return trainer


def write_archive(path, manifest, state_bytes):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name, data in (("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode()),
                           ("state.pt", state_bytes)):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    tmp.replace(path)


def read_archive(path):
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            state = zf.read("state.pt")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a training checkpoint")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {manifest.get('schema_version')} "
                              f"unsupported (expected {SCHEMA_VERSION})")
    try:
        payload = torch.load(io.BytesIO(state), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint state in {path}: {exc}") from exc
    return manifest, payload


def checkpoint_save(trainer, path, loader=None):
    return trainer.save(path, loader)


def checkpoint_load(path, cfg=None, loader=None):
    return Trainer.from_checkpoint(path, cfg, loader)


# --- run loop ---------------------------------------------------------------------------

CSV_HEADER = ("step",) + LossBundle.CSV_FIELDS


@dataclass
class TrainReport:
    steps_run: int
    final_step: int
    loss_csv: str
    checkpoints: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    best_checkpoint: str | None = None


def _truncate_csv(path, upto_step):
    rows = []
    if path.is_file():
        with path.open() as fh:
            rows = [r for r in csv.reader(fh)][1:]
    rows = [r for r in rows if int(r[0]) <= upto_step]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)


@torch.no_grad()
def validate(trainer, cfg: TrainConfig, extractor=None):
    v = cfg.validation
    xs = list_images(cfg.data.val_dir_x)[: v.max_images]
    ys = list_images(cfg.data.val_dir_y)[: v.max_images]
    extractor = extractor or metrics.build_extractor(v.extractor, v.extractor_checkpoint)
    trainer.g_y.eval()
    device = trainer.device
    extractor = extractor.to(device)
    fakes = [trainer.g_y(load_image(p, cfg.data.image_size)[None].to(device))[0] for p in xs]
    ref = [load_image(p, cfg.data.image_size).to(device) for p in ys]
    rep = metrics.report(metrics.embed(fakes, extractor), metrics.embed(ref, extractor),
                         v.kid_subset_size, v.kid_subsets, cfg.seed)
    return {"step": trainer.step, "fid": rep.fid, "kid_mean": rep.kid_mean, "kid_std": rep.kid_std}


def run(cfg: TrainConfig, data: UnpairedLoader | None = None, resume=None, backbone=None,
        device="cpu") -> TrainReport:
    """Train for ``cfg.steps`` total steps (continuing from ``resume`` if given)."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        if not (cfg.data.dir_x and cfg.data.dir_y):
            raise ConfigError("data.dir_x and data.dir_y are required")
        data = build_loader(cfg.data.dir_x, cfg.data.dir_y, cfg.batch_size, cfg.seed, cfg.data.image_size)
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, cfg, data, backbone)
    else:
        trainer = Trainer(cfg, backbone)
    trainer.to(device)
    csv_path = out / "losses.csv"
    _truncate_csv(csv_path, trainer.step)
    report = TrainReport(0, trainer.step, str(csv_path))
    do_val = bool(cfg.data.val_dir_x and cfg.data.val_dir_y)
    best = math.inf

    def save(name):
        path = trainer.save(out / name, data)
        report.checkpoints.append(str(path))
        return path

    try:
        with csv_path.open("a", newline="") as fh:
            writer = csv.writer(fh)
            while trainer.step < cfg.steps:
                x, y = next(data)
                x, y = x.to(device), y.to(device)
                bundle = trainer.train_step(x, y)
                row = [trainer.step] + bundle.row()
                writer.writerow(row)
                fh.flush()
                report.losses.append(row)
                report.steps_run += 1
                if trainer.step % 50 == 0 or trainer.step == cfg.steps:
                    log.info("step %d total %.4f cyc %.4f idt %.4f adv_g %.4f adv_d %.4f",
                             trainer.step, bundle.total, bundle.cyc, bundle.idt, bundle.adv_g, bundle.adv_d)
                if trainer.step % cfg.checkpoint_every == 0:
                    save(f"step_{trainer.step:06d}.ckpt")
                if do_val and trainer.step % cfg.validation.every == 0:
                    val = validate(trainer, cfg)
                    report.validation.append(val)
                    log.info("validation step %d: FID %.3f KID %.3f x1e-3", trainer.step,
                             val["fid"], val["kid_mean"])
                    if val["fid"] < best:
                        best = val["fid"]
                        path = save("best.ckpt")
                        report.best_checkpoint = str(path)
    except BaseException:
        # optimizer steps only run on finite losses, so the current state is sound
        save("interrupted.ckpt")
        raise
    final = save("final.ckpt")
    report.final_step = trainer.step
    log.info("finished at step %d; final checkpoint %s", trainer.step, final)
    return report


def load_generators(path):
    """(G_X, G_Y, config) from a checkpoint archive, for inference only.

    Discriminators are not rebuilt, so their backbone files need not exist.
    """
    from .config import config_from_dict

    manifest, payload = read_archive(path)
    cfg = config_from_dict(manifest["config"])
    if cfg.model_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: manifest config does not match its hash")
    g_x, g_y, _ = build_dual_generators(cfg)
    expected = {}
    shared = isinstance(getattr(g_x, "unet", None), torch.nn.Module)
    if shared:
        expected.update(_named_trainable(g_x.unet, "unet."))
    skip = ("unet.",) if shared else ()
    expected.update(_named_trainable(g_x, "g_x.", skip))
    expected.update(_named_trainable(g_y, "g_y.", skip))
    stored = {k: v for k, v in payload["trainable"].items() if not k.startswith(("d_x.", "d_y."))}
    if set(stored) != set(expected):
        raise CheckpointError(f"{path}: generator tensors do not match the manifest configuration")
    with torch.no_grad():
        for k, t in expected.items():
            if t.shape != stored[k].shape:
                raise CheckpointError(f"{path}: {k} has shape {tuple(stored[k].shape)}, "
                                      f"expected {tuple(t.shape)}")
            t.copy_(stored[k])
    for gen, key in ((g_x, "g_x"), (g_y, "g_y")):
        if manifest["generators"][key] != json.loads(json.dumps(gen.manifest())):
            raise CheckpointError(f"{path}: {key} manifest does not match the rebuilt generator")
        gen.eval()
    return g_x, g_y, cfg


def snapshot(params):
    return {k: v.detach().clone() for k, v in params.items()}


def changed(before, after_params):
    return sorted(k for k, v in after_params.items() if not torch.equal(before[k], v.detach()))
