"""Command-line entry points: extract-patches, train, translate, evaluate.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import torch
import yaml

from .errors import (CheckpointError, ConfigError, DataError, LoadError, NumericError,
                     StainShiftError)

log = logging.getLogger("stainshift")

COMMAND_SECTIONS = ("extract", "translate", "evaluate")


@dataclass
class CommandResult:
    code: int
    summary: str
    artifacts: list = field(default_factory=list)


class UsageError(StainShiftError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_config(path):
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _section(args, name):
    """Command defaults from the config file section ``name``."""
    return _read_config(args.config).get(name) or {}


def _pick(flag, section, key, default=None):
    if flag is not None:
        return flag
    return section.get(key, default)


# --- commands -------------------------------------------------------------------------

def cmd_extract(args) -> CommandResult:
    from .data import PatchSpec, extract_directory

    sec = _section(args, "extract")
    input_dir = _pick(args.input_dir, sec, "input_dir")
    output_dir = _pick(args.output_dir, sec, "output_dir")
    if not input_dir or not Path(input_dir).is_dir():
        raise UsageError(f"input directory does not exist: {input_dir}")
    if not output_dir:
        raise UsageError("--output-dir is required")
    spec = PatchSpec(
        patch_size=_pick(args.patch_size, sec, "patch_size", 512),
        magnification=_pick(args.magnification, sec, "magnification", 20.0),
        level=_pick(args.level, sec, "level"),
        tissue_threshold=_pick(args.tissue_threshold, sec, "tissue_threshold", 0.5),
    )
    try:
        manifest, sets = extract_directory(input_dir, output_dir, spec,
                                           workers=_pick(args.workers, sec, "workers", 1))
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    n = sum(len(s.patches) for s in sets)
    return CommandResult(0, f"extracted {n} patches from {len(sets)} slides", [str(manifest)])


def cmd_train(args) -> CommandResult:
    from .config import config_from_dict, parse_override, save_config, _set_dotted
    from .training import run

    data = {k: v for k, v in _read_config(args.config).items() if k not in COMMAND_SECTIONS}
    for text in args.set or []:
        key, value = parse_override(text)
        _set_dotted(data, key, value)
    if args.steps is not None:
        data["steps"] = args.steps
    if args.output_dir is not None:
        data["output_dir"] = args.output_dir
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = config_from_dict(data)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    save_config(cfg, Path(cfg.output_dir) / "config.yaml")
    report = run(cfg, resume=args.resume, device=args.device)
    return CommandResult(0, f"trained to step {report.final_step} ({report.steps_run} steps this run)",
                         [report.loss_csv] + report.checkpoints)


def cmd_translate(args) -> CommandResult:
    from .data import list_images, load_image, save_image
    from .training import load_generators

    sec = _section(args, "translate")
    checkpoint = _pick(args.checkpoint, sec, "checkpoint")
    input_dir = _pick(args.input_dir, sec, "input_dir")
    output_dir = _pick(args.output_dir, sec, "output_dir")
    direction = _pick(args.direction, sec, "direction", "x2y")
    if not checkpoint or not Path(checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    if not input_dir or not Path(input_dir).is_dir():
        raise UsageError(f"input directory does not exist: {input_dir}")
    if not output_dir:
        raise UsageError("--output-dir is required")
    if direction not in ("x2y", "y2x"):
        raise UsageError(f"--direction must be x2y or y2x, got {direction}")
    g_x, g_y, _ = load_generators(checkpoint)
    gen = (g_y if direction == "x2y" else g_x).to(args.device)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with torch.no_grad():
        for path in list_images(input_dir):
            x = load_image(path)[None].to(args.device)
            target = out / (path.stem + ".png")
            save_image(gen(x)[0], target)
            written.append(str(target))
    return CommandResult(0, f"translated {len(written)} images ({direction})", written)


def _embedding_source(path, extractor, device):
    from .data import list_images, load_image
    from .metrics import EmbeddingSet, embed

    path = Path(path)
    if path.is_file() and path.suffix == ".npz":
        es = EmbeddingSet.load(path)
        if es.extractor != extractor.extractor_id:
            raise UsageError(f"{path} was embedded with {es.extractor!r}, "
                             f"but --extractor gives {extractor.extractor_id!r}")
        return es
    if not path.is_dir():
        raise UsageError(f"not a directory or .npz embedding file: {path}")
    try:
        images = [load_image(p) for p in list_images(path)]
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    extractor = extractor.to(device)
    return embed([im.to(device) for im in images], extractor)


def cmd_evaluate(args) -> CommandResult:
    from .metrics import build_extractor, report

    sec = _section(args, "evaluate")
    generated = _pick(args.generated, sec, "generated")
    reference = _pick(args.reference, sec, "reference")
    out = _pick(args.out, sec, "out")
    if not (generated and reference and out):
        raise UsageError("--generated, --reference and --out are required")
    seed = _pick(args.seed, sec, "seed", 0)
    extractor = build_extractor(_pick(args.extractor, sec, "extractor", "tiny"),
                                _pick(args.extractor_checkpoint, sec, "extractor_checkpoint"))
    gen = _embedding_source(generated, extractor, args.device)
    ref = _embedding_source(reference, extractor, args.device)
    rep = report(gen, ref, _pick(args.kid_subset_size, sec, "kid_subset_size", 1000),
                 _pick(args.kid_subsets, sec, "kid_subsets", 100), seed)
    rep.to_json(out)
    return CommandResult(0, f"FID {rep.fid:.4f}  KID {rep.kid_mean:.4f} x1e-3", [str(out)])


# --- parser ------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="stainshift", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    p.add_argument("--device", default="cpu", help="torch device, e.g. cpu or cuda")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("extract-patches", help="tile slides into tissue patches")
    e.add_argument("--input-dir")
    e.add_argument("--output-dir")
    e.add_argument("--patch-size", type=int)
    e.add_argument("--level", type=int)
    e.add_argument("--magnification", type=float)
    e.add_argument("--tissue-threshold", type=float)
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="run adversarial fine-tuning")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. --set mff.mode=last_layer")
    t.add_argument("--steps", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--resume", help="checkpoint archive to continue from")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate a directory of patches")
    tr.add_argument("--checkpoint")
    tr.add_argument("--input-dir")
    tr.add_argument("--output-dir")
    tr.add_argument("--direction", choices=("x2y", "y2x"))
    tr.set_defaults(func=cmd_translate)

    ev = sub.add_parser("evaluate", help="FID/KID between two image sets")
    ev.add_argument("--generated")
    ev.add_argument("--reference")
    ev.add_argument("--out")
    ev.add_argument("--extractor", choices=("tiny", "inception"))
    ev.add_argument("--extractor-checkpoint")
    ev.add_argument("--kid-subset-size", type=int)
    ev.add_argument("--kid-subsets", type=int)
    ev.set_defaults(func=cmd_evaluate)
    return p


def execute(argv=None) -> CommandResult:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        result = args.func(args)
    except SystemExit as exc:
        # --help
        return CommandResult(int(exc.code or 0), "")
    except (UsageError, ConfigError, DataError) as exc:
        return CommandResult(1, f"error: {exc}")
    except (NumericError, CheckpointError, LoadError, StainShiftError, OSError, RuntimeError) as exc:
        return CommandResult(2, f"error: {exc}")
    return result


def main(argv=None):
    result = execute(argv)
    if result.summary:
        print(result.summary, file=sys.stderr)
    for path in result.artifacts if result.code == 0 else []:
        log.debug("wrote %s", path)
    return result.code


if __name__ == "__main__":
    sys.exit(main())
