"""Synthetic shape corpora with a controlled domain gap, and PNG directory I/O.

Source-domain images are clean and high contrast. Target-domain images render
the same kind of geometry with lower contrast, additive Gaussian noise and a
blurred boundary. Degradation only ever touches the image; the mask is the
exact rasterised geometry.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw

from .errors import GenerationError, IngestionError, InputError
from .model import PromptSpec

SHAPES = ("ellipse", "polygon", "blob")
MANIFEST_NAME = "manifest.tsv"


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W) or (H, W, 3), float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str
    split: str = "train"
    domain: str = "source"
    instances: np.ndarray | None = None  # (K, H, W) per-shape masks, generated data only

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise InputError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise InputError(f"{self.id}: mask is not binary")


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 200
    n_test: int = 50
    image_size: int = 64
    shapes: tuple = SHAPES
    source_contrast: float = 0.6
    target_contrast: float = 0.2
    target_noise_std: float = 0.1
    target_blur: float = 1.0
    target_noise_corr: float = 0.7  # spatial correlation (px) of the target noise field
    min_radius: float = 5.0
    max_radius: float = 14.0
    n_source_test: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.n_train <= 0 or self.n_test <= 0 or self.n_source_test < 0:
            raise GenerationError("sample counts must be positive")
        if not 0 <= self.target_contrast <= self.source_contrast <= 1:
            raise GenerationError("need 0 <= target_contrast <= source_contrast <= 1")
        if self.target_noise_std < 0 or self.target_blur < 0:
            raise GenerationError("noise std and blur must be nonnegative")
        if not self.shapes or set(self.shapes) - set(SHAPES):
            raise GenerationError(f"shapes must be a nonempty subset of {SHAPES}")
        if not 0 < self.min_radius <= self.max_radius:
            raise GenerationError("need 0 < min_radius <= max_radius")
        if 2 * self.max_radius + 2 > self.image_size:
            raise GenerationError(
                f"shapes of radius {self.max_radius} do not fit a {self.image_size}px image"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        return d


# --------------------------------------------------------------------------- geometry

_STREAMS = {("source", "train"): 0, ("target", "train"): 1, ("target", "test"): 2, ("source", "test"): 3}


def _draw_shape(kind: str, rng: np.random.Generator, spec: CorpusSpec) -> np.ndarray:
    n = spec.image_size
    r = rng.uniform(spec.min_radius, spec.max_radius)
    margin = r + 1
    cy, cx = rng.uniform(margin, n - 1 - margin, size=2)
    if kind == "ellipse":
        ry = r
        rx = r * rng.uniform(0.5, 1.0)
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=(n, n), rotation=rng.uniform(0, np.pi))
    else:
        if kind == "polygon":
            k = int(rng.integers(3, 8))
            theta = np.sort(rng.uniform(0, 2 * np.pi, size=k))
            radii = r * rng.uniform(0.6, 1.0, size=k)
        else:
            theta = np.linspace(0, 2 * np.pi, 48, endpoint=False)
            radii = np.ones_like(theta)
            for harmonic in range(2, 5):
                radii += rng.uniform(0, 0.25) * np.cos(harmonic * theta + rng.uniform(0, 2 * np.pi))
            radii *= r / radii.max()
        rr, cc = draw.polygon(cy + radii * np.sin(theta), cx + radii * np.cos(theta), shape=(n, n))
    mask = np.zeros((n, n), dtype=np.uint8)
    mask[rr, cc] = 1
    return mask


def render_geometry(spec: CorpusSpec, stream: int, index: int):
    """Mask, per-shape layers and background for one sample; depends only on (seed, stream, index)."""
    rng = np.random.default_rng([spec.seed, stream, index, 0])
    for _ in range(100):
        count = int(rng.integers(1, 4))
        layers = [_draw_shape(rng.choice(spec.shapes), rng, spec) for _ in range(count)]
        mask = np.maximum.reduce(layers)
        if mask.any():
            background = rng.uniform(0.15, 0.35)
            gradient = rng.uniform(-0.05, 0.05, size=2)
            return mask, np.stack([l for l in layers if l.any()]), background, gradient
    raise GenerationError(f"could not draw a nonempty mask for sample {index}")


def render_image(spec: CorpusSpec, mask, background, gradient, domain: str, stream: int, index: int):
    n = spec.image_size
    rows, cols = np.mgrid[0:n, 0:n] / (n - 1) - 0.5
    base = background + gradient[0] * rows + gradient[1] * cols
    if domain == "source":
        img = base + spec.source_contrast * mask
    else:
        img = spec.target_contrast * mask.astype(np.float64)
        if spec.target_blur > 0:
            img = ndimage.gaussian_filter(img, spec.target_blur, mode="nearest")
        img = base + img
        if spec.target_noise_std > 0:
            rng = np.random.default_rng([spec.seed, stream, index, 1])
            noise = rng.normal(0.0, 1.0, size=img.shape)
            if spec.target_noise_corr > 0:
                noise = ndimage.gaussian_filter(noise, spec.target_noise_corr, mode="wrap")
                noise /= noise.std()
            img = img + spec.target_noise_std * noise
    # 8-bit quantisation so PNG round trips are exact
    return (np.round(np.clip(img, 0.0, 1.0) * 255) / 255).astype(np.float32)


def make_sample(spec: CorpusSpec, domain: str, split: str, index: int, geometry_stream=None) -> ImageSample:
    stream = _STREAMS[(domain, split)]
    geo_stream = stream if geometry_stream is None else geometry_stream
    mask, layers, bg, grad = render_geometry(spec, geo_stream, index)
    image = render_image(spec, mask, bg, grad, domain, stream, index)
    return ImageSample(image, mask, f"{domain}-{split}-{index:04d}", split, domain, layers)


def generate_corpus(spec: CorpusSpec | None = None) -> list[ImageSample]:
    """Source-train, target-train and target-test samples (plus optional source-test)."""
    spec = spec or CorpusSpec()
    spec.validate()
    plan = [("source", "train", spec.n_train), ("target", "train", spec.n_train),
            ("target", "test", spec.n_test), ("source", "test", spec.n_source_test)]
    return [make_sample(spec, d, s, i) for d, s, count in plan for i in range(count)]


def select(samples, domain=None, split=None) -> list[ImageSample]:
    return [s for s in samples
            if (domain is None or s.domain == domain) and (split is None or s.split == split)]


# --------------------------------------------------------------------------- ground truth prompts


@dataclass
class GroundTruthPromptCounter:
    """Counts every prompt constructed from a ground-truth mask."""

    count: int = 0
    by_kind: dict = field(default_factory=dict)

    def record(self, kind: str) -> None:
        self.count += 1
        self.by_kind[kind] = self.by_kind.get(kind, 0) + 1


GT_PROMPT_COUNTER = GroundTruthPromptCounter()


def gt_box(mask) -> tuple[int, int, int, int]:
    """Tight inclusive bounding box (row_min, col_min, row_max, col_max)."""
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise InputError("gt_box of an empty mask")
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def gt_box_prompt(mask) -> PromptSpec:
    GT_PROMPT_COUNTER.record("box")
    return PromptSpec.at_box(*gt_box(mask))


def gt_point(mask, strategy: str = "center", seed=None) -> PromptSpec:
    """A foreground point prompt drawn from the ground-truth mask.

    ``random`` samples a foreground pixel uniformly; ``center`` picks the
    foreground pixel nearest the foreground centroid (first in raster order on
    ties). ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    mask = np.asarray(mask)
    fg = np.argwhere(mask > 0)
    if fg.size == 0:
        raise InputError("gt_point of an empty mask")
    if strategy == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        r, c = fg[rng.integers(len(fg))]
    elif strategy == "center":
        d2 = ((fg - fg.mean(axis=0)) ** 2).sum(axis=1)
        r, c = fg[int(np.argmin(d2))]
    else:
        raise InputError(f"unknown point strategy {strategy!r}")
    GT_PROMPT_COUNTER.record(f"point-{strategy}")
    return PromptSpec.at_point(r, c, label=1)


# --------------------------------------------------------------------------- disk layout


def _to_uint8(arr) -> np.ndarray:
    return np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)


def write_corpus(samples, out_dir) -> Path:
    """Write ``images/<id>.png``, ``masks/<id>.png`` (0/255) and a TSV manifest.

    Per-shape masks of generated samples go to ``instances/<id>.npy``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = ["id\timage\tmask\tsplit\tdomain"]
    for s in samples:
        img_rel, mask_rel = f"images/{s.id}.png", f"masks/{s.id}.png"
        Image.fromarray(_to_uint8(s.image)).save(out / img_rel)
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(out / mask_rel)
        if s.instances is not None:
            (out / "instances").mkdir(exist_ok=True)
            np.save(out / "instances" / f"{s.id}.npy", s.instances.astype(np.uint8), allow_pickle=False)
        lines.append("\t".join([s.id, img_rel, mask_rel, s.split, s.domain]))
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def _read_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    levels = np.unique(arr)
    if len(levels) > 2 or (len(levels) == 2 and not (levels[0] <= 127 < levels[1])):
        raise IngestionError(f"{path}: mask has gray levels {levels.tolist()}, not binarizable")
    return (arr > 127).astype(np.uint8)


def _read_image(path) -> np.ndarray:
    img = Image.open(path)
    mode = "RGB" if img.mode in ("RGB", "RGBA", "P") else "L"
    return (np.asarray(img.convert(mode)).astype(np.float32) / 255.0)


def read_corpus(root) -> list[ImageSample]:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise IngestionError(f"no {MANIFEST_NAME} in {root}")
    samples = []
    rows = manifest.read_text(encoding="utf-8").splitlines()[1:]
    for line in rows:
        if not line.strip():
            continue
        sid, img_rel, mask_rel, split, domain = line.split("\t")
        inst_path = root / "instances" / f"{sid}.npy"
        instances = np.load(inst_path, allow_pickle=False) if inst_path.exists() else None
        samples.append(ImageSample(_read_image(root / img_rel), _read_mask(root / mask_rel),
                                   sid, split, domain, instances))
    return samples


def _split_key(name: str) -> str:
    return hashlib.sha256(name.encode("utf-8")).hexdigest()


def load_directory(images_dir, masks_dir, split_ratio: float = 0.7, image_size: int = 64,
                   domain: str = "target") -> list[ImageSample]:
    """Pair images with masks by file stem, resize, and split deterministically.

    Files are ordered by a hash of their stem; the first ``round(ratio * n)`` go
    to train, the rest to test.
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    if not 0 < split_ratio <= 1:
        raise IngestionError("split_ratio must lie in (0, 1]")
    imgs = {p.stem: p for p in sorted(images_dir.iterdir()) if p.is_file()}
    masks = {p.stem: p for p in sorted(masks_dir.iterdir()) if p.is_file()}
    for stem in sorted(set(imgs) ^ set(masks)):
        where = "mask" if stem in imgs else "image"
        path = imgs.get(stem) or masks.get(stem)
        raise IngestionError(f"{path}: no matching {where} file")
    order = sorted(imgs, key=_split_key)
    n_train = int(round(split_ratio * len(order)))
    samples = []
    for rank, stem in enumerate(order):
        mask = _read_mask(masks[stem])
        image = _read_image(imgs[stem])
        if image.shape[:2] != (image_size, image_size):
            pil = Image.fromarray(_to_uint8(image))
            image = np.asarray(pil.resize((image_size, image_size), Image.BILINEAR)).astype(np.float32) / 255
            mask = np.asarray(Image.fromarray(mask * 255).resize((image_size, image_size), Image.NEAREST)) > 127
            mask = mask.astype(np.uint8)
        split = "train" if rank < n_train else "test"
        samples.append(ImageSample(image, mask, stem, split, domain))
    return sorted(samples, key=lambda s: s.id)


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """(B, H, W[, C]) images and (B, H, W) masks."""
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def corpus_digest(root, exclude=("run_manifest.json",)) -> str:
    """SHA-256 over relative paths and bytes of every file under ``root``."""
    h = hashlib.sha256()
    for dirpath, dirs, files in os.walk(root):
        dirs.sort()
        for name in sorted(files):
            if name in exclude:
                continue
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
