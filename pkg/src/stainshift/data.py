"""Whole-slide patch extraction, tissue filtering and unpaired loading."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DataError, LoadError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
OPENSLIDE_SUFFIXES = (".svs", ".ndpi", ".mrxs", ".scn", ".vms", ".vmu", ".bif")


# --- normalisation ----------------------------------------------------------------

def normalize(img: np.ndarray) -> torch.Tensor:
    """uint8 H x W x 3 -> float C x H x W in [-1, 1]."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise DataError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    t = torch.from_numpy(np.array(arr[..., :3])).permute(2, 0, 1).float()
    return t / 127.5 - 1.0


def denormalize(t: torch.Tensor) -> np.ndarray:
    """float C x H x W in [-1, 1] -> uint8 H x W x 3."""
    arr = ((t.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def load_image(path, size=None) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BICUBIC)
        return normalize(np.asarray(im))


def save_image(t: torch.Tensor, path):
    Image.fromarray(denormalize(t)).save(path)


# --- slides -----------------------------------------------------------------------

class ImageSlide:
    """Slide backed by an ordinary image file; multi-resolution TIFFs expose
    their pyramid pages as levels. Objective power comes from an optional
    ``<name>.json`` sidecar ({"objective_power": 40})."""

    def __init__(self, path):
        self.path = Path(path)
        self.slide_id = self.path.stem
        self._levels = self._open_levels()
        self.level_dimensions = [(a.shape[1], a.shape[0]) for a in self._levels]
        w0 = self.level_dimensions[0][0]
        self.level_downsamples = [w0 / w for w, _ in self.level_dimensions]
        self.objective_power = None
        sidecar = self.path.with_suffix(".json")
        if sidecar.is_file():
            self.objective_power = json.loads(sidecar.read_text()).get("objective_power")

    def _open_levels(self):
        try:
            if self.path.suffix.lower() in (".tif", ".tiff"):
                import tifffile

                with tifffile.TiffFile(self.path) as tf:
                    series = tf.series[0]
                    levels = [lvl.asarray() for lvl in series.levels]
            else:
                Image.MAX_IMAGE_PIXELS = None
                with Image.open(self.path) as im:
                    levels = [np.asarray(im.convert("RGB"))]
        except Exception as exc:
            raise LoadError(f"unreadable slide {self.path}: {exc}") from exc
        out = []
        for a in levels:
            if a.ndim == 2:
                a = np.repeat(a[..., None], 3, axis=-1)
            out.append(np.ascontiguousarray(a[..., :3]).astype(np.uint8, copy=False))
        return out

    @property
    def level_count(self):
        return len(self._levels)

    def read_region(self, level, x, y, w, h):
        """(x, y) are in the coordinates of ``level`` itself."""
        return self._levels[level][y:y + h, x:x + w]


class OpenSlideSlide:
    def __init__(self, path):
        try:
            import openslide
        except ImportError as exc:
            raise LoadError(f"{path}: reading this format needs the openslide package") from exc
        try:
            self._slide = openslide.OpenSlide(str(path))
        except Exception as exc:
            raise LoadError(f"unreadable slide {path}: {exc}") from exc
        self.path = Path(path)
        self.slide_id = self.path.stem
        self.level_dimensions = list(self._slide.level_dimensions)
        self.level_downsamples = list(self._slide.level_downsamples)
        power = self._slide.properties.get("openslide.objective-power")
        self.objective_power = float(power) if power else None

    @property
    def level_count(self):
        return self._slide.level_count

    def read_region(self, level, x, y, w, h):
        ds = self.level_downsamples[level]
        region = self._slide.read_region((int(x * ds), int(y * ds)), level, (w, h))
        return np.asarray(region.convert("RGB"))


def open_slide(path):
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"slide not found: {path}")
    if path.suffix.lower() in OPENSLIDE_SUFFIXES:
        return OpenSlideSlide(path)
    return ImageSlide(path)


# --- extraction -------------------------------------------------------------------

@dataclass
class PatchSpec:
    patch_size: int = 512
    magnification: float | None = 20.0
    level: int | None = None
    tissue_threshold: float = 0.5
    saturation_threshold: float = 0.07
    min_hole_area: int = 64
    image_format: str = "png"

    def __post_init__(self):
        if self.patch_size <= 0:
            raise ConfigError(f"patch size must be positive, got {self.patch_size}")
        if not 0.0 <= self.tissue_threshold <= 1.0:
            raise ConfigError(f"tissue threshold must be in [0, 1], got {self.tissue_threshold}")
        if self.magnification is not None and self.magnification <= 0:
            raise ConfigError(f"magnification must be positive, got {self.magnification}")


@dataclass
class PatchRecord:
    name: str
    row: int
    col: int
    tissue_fraction: float


@dataclass
class PatchSet:
    slide_id: str
    level: int
    grid: tuple
    patches: list = field(default_factory=list)


def tissue_mask(rgb: np.ndarray, saturation_threshold=0.07, min_hole_area=64) -> np.ndarray:
    """HSV-saturation foreground mask with small background holes filled."""
    from skimage.morphology import remove_small_holes

    arr = rgb.astype(np.float32) / 255.0
    vmax = arr.max(axis=-1)
    vmin = arr.min(axis=-1)
    sat = np.where(vmax > 0, (vmax - vmin) / np.maximum(vmax, 1e-8), 0.0)
    # near-black pixels are scanner border, not tissue
    mask = (sat > saturation_threshold) & (vmax > 0.1)
    if min_hole_area > 0 and mask.any():
        mask = remove_small_holes(mask, area_threshold=min_hole_area)
    return mask


def tissue_fraction(rgb, spec: PatchSpec) -> float:
    return float(tissue_mask(rgb, spec.saturation_threshold, spec.min_hole_area).mean())


def resolve_level(slide, spec: PatchSpec) -> int:
    if spec.level is not None:
        if not 0 <= spec.level < slide.level_count:
            raise LoadError(f"{slide.slide_id}: level {spec.level} absent "
                            f"(slide has {slide.level_count})")
        return spec.level
    if spec.magnification is None or slide.objective_power is None:
        return 0
    want = slide.objective_power / spec.magnification
    for i, ds in enumerate(slide.level_downsamples):
        if abs(ds - want) <= 0.05 * want:
            return i
    raise LoadError(f"{slide.slide_id}: no level at {spec.magnification}x "
                    f"(objective {slide.objective_power}x, downsamples {slide.level_downsamples})")


def extract_patches(slide, spec: PatchSpec, out_dir=None) -> PatchSet:
    """Tile the slide into non-overlapping patches and keep tissue-rich ones."""
    if isinstance(slide, (str, Path)):
        slide = open_slide(slide)
    level = resolve_level(slide, spec)
    w, h = slide.level_dimensions[level]
    size = spec.patch_size
    rows, cols = h // size, w // size
    result = PatchSet(slide.slide_id, level, (rows, cols))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for r in range(rows):
        for c in range(cols):
            rgb = slide.read_region(level, c * size, r * size, size, size)
            frac = tissue_fraction(rgb, spec)
            if frac < spec.tissue_threshold or frac == 0.0:
                continue
            name = f"{slide.slide_id}_r{r:04d}_c{c:04d}.{spec.image_format}"
            if out_dir is not None:
                Image.fromarray(np.ascontiguousarray(rgb)).save(Path(out_dir) / name)
            result.patches.append(PatchRecord(name, r, c, frac))
    return result


def list_slides(input_dir):
    suffixes = IMAGE_SUFFIXES + OPENSLIDE_SUFFIXES
    return sorted(p for p in Path(input_dir).iterdir() if p.suffix.lower() in suffixes)


def _extract_one(args):
    path, spec, out_dir = args
    return extract_patches(path, spec, out_dir)


def extract_directory(input_dir, output_dir, spec: PatchSpec, workers=1):
    """Extract every slide in ``input_dir``; writes patches and ``manifest.txt``.
    Returns the manifest path and the per-slide patch sets."""
    slides = list_slides(input_dir)
    if not slides:
        raise DataError(f"no slides found in {input_dir}")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(p, spec, output_dir) for p in slides]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            sets = list(pool.map(_extract_one, jobs))
    else:
        sets = [_extract_one(j) for j in jobs]
    names = sorted(rec.name for s in sets for rec in s.patches)
    manifest = output_dir / "manifest.txt"
    write_manifest(manifest, names)
    for s in sets:
        log.info("%s: level %d, grid %s, kept %d", s.slide_id, s.level, s.grid, len(s.patches))
    return manifest, sets


# --- manifests & loading ------------------------------------------------------------

def write_manifest(path, names):
    Path(path).write_text("".join(f"{n}\n" for n in names))


def read_manifest(path):
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def write_split_manifests(names, out_dir, n_train, n_val, n_test, seed=0):
    """Shuffle ``names`` and write train/val/test manifests of the given sizes."""
    names = sorted(names)
    if n_train + n_val + n_test > len(names):
        raise DataError(f"split {n_train}/{n_val}/{n_test} exceeds {len(names)} files")
    order = np.random.default_rng(seed).permutation(len(names))
    picked = [names[i] for i in order]
    out = {}
    start = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        path = Path(out_dir) / f"{split}.txt"
        write_manifest(path, sorted(picked[start:start + n]))
        out[split] = path
        start += n
    return out


def list_images(directory, manifest=None):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    manifest = Path(manifest) if manifest else directory / "manifest.txt"
    if manifest.is_file():
        files = [directory / n for n in read_manifest(manifest)]
    else:
        files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images in {directory}")
    return files


class _DomainStream:
    def __init__(self, n, seed_seq):
        self.n = n
        self.rng = np.random.Generator(np.random.PCG64(seed_seq))
        self.order = self.rng.permutation(n)
        self.pos = 0
        self.epoch = 0

    def take(self, k):
        out = []
        for _ in range(k):
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
                self.epoch += 1
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out

    def state_dict(self):
        return {"rng": self.rng.bit_generator.state, "order": self.order.tolist(),
                "pos": self.pos, "epoch": self.epoch}

    def load_state_dict(self, s):
        self.rng.bit_generator.state = s["rng"]
        self.order = np.asarray(s["order"], dtype=np.int64)
        self.pos = s["pos"]
        self.epoch = s["epoch"]


class UnpairedLoader:
    """Endless (x, y) batches drawn independently from the two domains.

    Each domain walks its own seeded permutation per epoch, so every sample is
    visited once per epoch; the two streams use separate child seeds.
    """

    def __init__(self, x_items, y_items, batch_size=1, seed=0, load_fn=None):
        if not len(x_items) or not len(y_items):
            raise DataError("both domains need at least one sample")
        self.x_items = list(x_items)
        self.y_items = list(y_items)
        self.batch_size = batch_size
        self.seed = seed
        self.load_fn = load_fn or (lambda item: item)
        sx, sy = np.random.SeedSequence(seed).spawn(2)
        self.x_stream = _DomainStream(len(self.x_items), sx)
        self.y_stream = _DomainStream(len(self.y_items), sy)

    def __iter__(self):
        return self

    def __next__(self):
        xi = self.x_stream.take(self.batch_size)
        yi = self.y_stream.take(self.batch_size)
        x = torch.stack([self.load_fn(self.x_items[i]) for i in xi])
        y = torch.stack([self.load_fn(self.y_items[i]) for i in yi])
        return x, y

    def state_dict(self):
        return {"x": self.x_stream.state_dict(), "y": self.y_stream.state_dict()}

    def load_state_dict(self, s):
        self.x_stream.load_state_dict(s["x"])
        self.y_stream.load_state_dict(s["y"])


def build_loader(dir_x, dir_y, batch_size=1, seed=0, image_size=None):
    fx = list_images(dir_x)
    fy = list_images(dir_y)
    return UnpairedLoader(fx, fy, batch_size, seed, load_fn=lambda p: load_image(p, image_size))
