"""Dataset model, manifest I/O, synthetic long-tailed data and class statistics.

All boxes are stored in corner form ``(x_min, y_min, x_max, y_max)`` in pixel
units. COCO ``[x, y, w, h]`` boxes are converted once, at ingestion.

Internal manifest format (JSON lines, UTF-8, one JSON object per line):

* line 1, header: ``{"format": "ltpretrain-manifest", "version": 1,
  "num_classes": C, "categories": [names...]}``
* every following line is one image: ``{"image_id": int, "width": int,
  "height": int, "annotations": [{"category_id": int, "bbox": [x0, y0, x1, y1]}],
  "pixels": {"png_base64": str} | {"file": relative/path.png} | null}``

Keys are written sorted with compact separators, so saving a loaded manifest
reproduces the original bytes.
"""

from __future__ import annotations

import base64
import io
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    ConfigurationError,
    DomainError,
    ManifestFormatError,
    ManifestValidationError,
)

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "ltpretrain-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    def intersection_area(self, other: "BoundingBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def intersect(self, other: "BoundingBox") -> Optional["BoundingBox"]:
        x0, y0 = max(self.x_min, other.x_min), max(self.y_min, other.y_min)
        x1, y1 = min(self.x_max, other.x_max), min(self.y_max, other.y_max)
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def clip(self, width: float, height: float) -> Optional["BoundingBox"]:
        """Clip to ``[0, width] x [0, height]``; None if nothing is left."""
        return self.intersect(BoundingBox(0.0, 0.0, float(width), float(height)))

    def within(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    category_id: int


@dataclass
class ImageRecord:
    """One image. ``pixels`` is an H x W x 3 float32 array in [0, 1], or None
    when the manifest was loaded without image data."""

    image_id: int
    width: int
    height: int
    annotations: list[Annotation]
    pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.pixels is not None:
            if self.pixels.ndim != 3 or self.pixels.shape != (self.height, self.width, 3):
                raise ManifestValidationError(
                    f"image {self.image_id}: pixels shape {self.pixels.shape} does not match "
                    f"{(self.height, self.width, 3)}",
                    [self.image_id],
                )
        for ann in self.annotations:
            if not ann.box.within(self.width, self.height):
                raise ManifestValidationError(
                    f"image {self.image_id}: box {ann.box.as_tuple()} outside image bounds",
                    [self.image_id],
                )

    @property
    def category_ids(self) -> set[int]:
        return {a.category_id for a in self.annotations}


@dataclass
class DatasetManifest:
    images: list[ImageRecord]
    num_classes: int
    category_names: Optional[list[str]] = None
    # Annotations discarded at ingestion (zero or negative extent).
    num_dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ManifestValidationError("num_classes must be >= 1")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestValidationError(f"duplicate image ids {dupes}", dupes)
        bad = sorted(
            {a.category_id for im in self.images for a in im.annotations if not 0 <= a.category_id < self.num_classes}
        )
        if bad:
            raise ManifestValidationError(f"category ids outside [0, {self.num_classes}): {bad}", bad)
        if self.category_names is not None and len(self.category_names) != self.num_classes:
            raise ManifestValidationError("category_names length differs from num_classes")
        self._by_id = {im.image_id: im for im in self.images}

    def __len__(self):
        return len(self.images)

    def get(self, image_id: int) -> ImageRecord:
        return self._by_id[image_id]

    @property
    def image_ids(self) -> list[int]:
        return [im.image_id for im in self.images]

    def subset(self, image_ids: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest([self._by_id[i] for i in image_ids], self.num_classes, self.category_names)


def split_manifest(manifest: DatasetManifest, fractions: Sequence[float], seed: int) -> list[DatasetManifest]:
    """Randomly partition images into consecutive splits of the given fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    rng = np.random.default_rng(seed)
    order = [manifest.image_ids[i] for i in rng.permutation(len(manifest))]
    bounds = np.round(np.cumsum([0.0, *fractions]) * len(order)).astype(int)
    return [manifest.subset(sorted(order[a:b])) for a, b in zip(bounds[:-1], bounds[1:])]


# ---------------------------------------------------------------------------
# Class statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassStats:
    """Per-class image-level and instance-level frequency scores.

    Integer counts are kept so that downstream code can work with exact rationals.
    """

    image_counts: np.ndarray
    instance_counts: np.ndarray
    num_images: int
    num_instances: int

    @property
    def num_classes(self) -> int:
        return len(self.image_counts)

    @property
    def f_im(self) -> np.ndarray:
        return self.image_counts / self.num_images

    @property
    def f_in(self) -> np.ndarray:
        return self.instance_counts / self.num_instances

    def exact_f_im(self, c: int) -> Fraction:
        return Fraction(int(self.image_counts[c]), self.num_images)

    def exact_f_in(self, c: int) -> Fraction:
        return Fraction(int(self.instance_counts[c]), self.num_instances)


def compute_class_stats(manifest: DatasetManifest) -> ClassStats:
    if len(manifest) == 0:
        raise DomainError("cannot compute class statistics of an empty manifest")
    image_counts = np.zeros(manifest.num_classes, dtype=np.int64)
    instance_counts = np.zeros(manifest.num_classes, dtype=np.int64)
    for im in manifest.images:
        for c in im.category_ids:
            image_counts[c] += 1
        for a in im.annotations:
            instance_counts[a.category_id] += 1
    total = int(instance_counts.sum())
    if total == 0:
        raise DomainError("manifest contains no annotations")
    return ClassStats(image_counts, instance_counts, len(manifest), total)


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def _decode_json(text: str, what: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise ManifestFormatError(f"{what}: {e.msg}", byte_offset=offset) from None


def _read_png(path_or_bytes) -> np.ndarray:
    src = io.BytesIO(path_or_bytes) if isinstance(path_or_bytes, bytes) else path_or_bytes
    with Image.open(src) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _png_bytes(pixels: np.ndarray) -> bytes:
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def load_manifest(path, format: str = "auto", load_pixels: bool = True) -> DatasetManifest:
    """Load a COCO-style JSON file or an internal JSON-lines manifest.

    ``format`` is ``"coco-json"``, ``"internal"`` or ``"auto"`` (decided by the
    ``.jsonl`` suffix).
    """
    path = Path(path)
    if format == "auto":
        format = "internal" if path.suffix == ".jsonl" else "coco-json"
    if format == "coco-json":
        return _load_coco(path, load_pixels)
    if format == "internal":
        return _load_internal(path, load_pixels)
    raise ConfigurationError(f"unknown manifest format {format!r}")


def _load_coco(path: Path, load_pixels: bool) -> DatasetManifest:
    raw = path.read_bytes()
    doc = _decode_json(raw.decode("utf-8"), str(path))
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ManifestFormatError(f"{path}: missing top-level key {key!r}")

    cat_ids = sorted(int(c["id"]) for c in doc["categories"])
    if not cat_ids:
        raise ManifestValidationError(f"{path}: empty categories list")
    names_by_id = {int(c["id"]): str(c.get("name", c["id"])) for c in doc["categories"]}
    contiguous = {cid: i for i, cid in enumerate(cat_ids)}

    unknown = sorted({int(a["category_id"]) for a in doc["annotations"]} - set(contiguous))
    if unknown:
        raise ManifestValidationError(f"{path}: annotations reference unknown category ids {unknown}", unknown)

    meta = {int(im["id"]): im for im in doc["images"]}
    orphan = sorted({int(a["image_id"]) for a in doc["annotations"]} - set(meta))
    if orphan:
        raise ManifestValidationError(f"{path}: annotations reference unknown image ids {orphan}", orphan)

    per_image: dict[int, list[Annotation]] = {i: [] for i in meta}
    dropped = 0
    for a in doc["annotations"]:
        x, y, w, h = (float(v) for v in a["bbox"])
        im = meta[int(a["image_id"])]
        if w <= 0 or h <= 0:
            dropped += 1
            continue
        # boxes hanging over the border are clipped, like standard loaders do
        clipped = BoundingBox.from_xywh(x, y, w, h).clip(im["width"], im["height"])
        if clipped is None:
            dropped += 1
            continue
        per_image[int(a["image_id"])].append(Annotation(clipped, contiguous[int(a["category_id"])]))
    if dropped:
        logger.warning("%s: dropped %d degenerate annotations", path, dropped)

    images = []
    for image_id in sorted(meta):
        im = meta[image_id]
        pixels = None
        if load_pixels and im.get("file_name"):
            img_path = path.parent / im["file_name"]
            if img_path.exists():
                pixels = _read_png(img_path)
            else:
                logger.warning("image file %s not found; pixels left empty", img_path)
        images.append(ImageRecord(image_id, int(im["width"]), int(im["height"]), per_image[image_id], pixels))
    return DatasetManifest(images, len(cat_ids), [names_by_id[c] for c in cat_ids], num_dropped=dropped)


def _load_internal(path: Path, load_pixels: bool) -> DatasetManifest:
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    lines = text.split("\n")
    offsets = np.cumsum([0] + [len(line.encode("utf-8")) + 1 for line in lines])
    records = []
    for lineno, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            offset = int(offsets[lineno]) + len(line[: e.pos].encode("utf-8"))
            raise ManifestFormatError(f"{path}: line {lineno + 1}: {e.msg}", byte_offset=offset) from None
    if not records or records[0].get("format") != MANIFEST_FORMAT:
        raise ManifestFormatError(f"{path}: missing {MANIFEST_FORMAT} header", byte_offset=0)
    header = records[0]
    num_classes = int(header["num_classes"])
    bad = sorted(
        {
            int(a["category_id"])
            for r in records[1:]
            for a in r["annotations"]
            if not 0 <= int(a["category_id"]) < num_classes
        }
    )
    if bad:
        raise ManifestValidationError(f"{path}: unknown category ids {bad}", bad)

    images = []
    dropped = 0
    for r in records[1:]:
        anns = []
        for a in r["annotations"]:
            x0, y0, x1, y1 = (float(v) for v in a["bbox"])
            if x1 <= x0 or y1 <= y0:
                dropped += 1
                continue
            anns.append(Annotation(BoundingBox(x0, y0, x1, y1), int(a["category_id"])))
        pixels = None
        src = r.get("pixels")
        if load_pixels and src:
            if "png_base64" in src:
                pixels = _read_png(base64.b64decode(src["png_base64"]))
            else:
                pixels = _read_png(path.parent / src["file"])
        images.append(ImageRecord(int(r["image_id"]), int(r["width"]), int(r["height"]), anns, pixels))
    if dropped:
        logger.warning("%s: dropped %d degenerate annotations", path, dropped)
    return DatasetManifest(images, num_classes, header.get("categories"), num_dropped=dropped)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_to_jsonl(manifest: DatasetManifest, pixel_dir: Optional[Path] = None, base_dir: Optional[Path] = None) -> str:
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "num_classes": manifest.num_classes,
        "categories": manifest.category_names,
    }
    out = [_dump(header)]
    for im in manifest.images:
        pixels = None
        if im.pixels is not None:
            png = _png_bytes(im.pixels)
            if pixel_dir is None:
                pixels = {"png_base64": base64.b64encode(png).decode("ascii")}
            else:
                pixel_dir.mkdir(parents=True, exist_ok=True)
                target = pixel_dir / f"{im.image_id}.png"
                target.write_bytes(png)
                pixels = {"file": str(target.relative_to(base_dir)) if base_dir else str(target)}
        rec = {
            "image_id": im.image_id,
            "width": im.width,
            "height": im.height,
            "annotations": [{"category_id": a.category_id, "bbox": list(a.box.as_tuple())} for a in im.annotations],
            "pixels": pixels,
        }
        out.append(_dump(rec))
    return "\n".join(out) + "\n"


def save_manifest(manifest: DatasetManifest, path, embed_pixels: bool = True) -> Path:
    """Write the internal JSON-lines format. With ``embed_pixels=False`` images
    are written as PNG files under ``<stem>_images/`` and referenced relatively."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixel_dir = None if embed_pixels else path.parent / f"{path.stem}_images"
    path.write_text(manifest_to_jsonl(manifest, pixel_dir, path.parent), encoding="utf-8")
    return path


def save_coco(manifest: DatasetManifest, path, write_images: bool = True) -> Path:
    """Write annotations as a COCO-style JSON file; images with pixels are
    written as ``<image_id>.png`` next to it unless ``write_images`` is false."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if write_images:
        for im in manifest.images:
            if im.pixels is not None:
                (path.parent / f"{im.image_id}.png").write_bytes(_png_bytes(im.pixels))
    names = manifest.category_names or [str(c) for c in range(manifest.num_classes)]
    doc = {
        "images": [
            {"id": im.image_id, "width": im.width, "height": im.height, "file_name": f"{im.image_id}.png"}
            for im in manifest.images
        ],
        "annotations": [],
        "categories": [{"id": c, "name": names[c]} for c in range(manifest.num_classes)],
    }
    ann_id = 1
    for im in manifest.images:
        for a in im.annotations:
            doc["annotations"].append(
                {"id": ann_id, "image_id": im.image_id, "category_id": a.category_id, "bbox": a.box.to_xywh()}
            )
            ann_id += 1
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Synthetic long-tailed data
# ---------------------------------------------------------------------------

SHAPES = ("square", "circle", "triangle", "diamond", "cross", "ring")

PALETTE = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.25),
    "blue": (0.20, 0.35, 0.95),
    "yellow": (0.95, 0.85, 0.15),
    "magenta": (0.85, 0.20, 0.80),
    "cyan": (0.15, 0.85, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
}


@dataclass(frozen=True)
class SyntheticConfig:
    num_images: int
    num_classes: int
    zipf_exponent: float
    image_size: int = 64
    seed: int = 0
    min_objects: int = 1
    max_objects: int = 6
    min_shape_size: int = 8
    max_shape_size: int = 20
    noise_std: float = 0.03
    color_jitter: float = 0.08
    max_overlap_iou: float = 0.2


def class_identity(c: int, num_classes: int) -> tuple[str, str]:
    """Shape and color of synthetic class ``c``."""
    n_shapes = min(len(SHAPES), num_classes)
    return SHAPES[c % n_shapes], list(PALETTE)[c // n_shapes]


def _shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    x, y = np.meshgrid(xs, ys)
    r2 = x * x + y * y
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        return r2 <= 1.0
    if shape == "triangle":
        return np.abs(x) <= (y + 1) / 2 + 1.0 / w
    if shape == "diamond":
        return np.abs(x) + np.abs(y) <= 1.0
    if shape == "cross":
        return (np.abs(x) <= 0.34) | (np.abs(y) <= 0.34)
    if shape == "ring":
        return (r2 <= 1.0) & (r2 >= 0.3)
    raise ValueError(shape)


def _background(rng: np.random.Generator, size: int, noise_std: float) -> np.ndarray:
    base = rng.uniform(0.15, 0.45, size=3)
    gx, gy = rng.uniform(-0.15, 0.15, size=2)
    ramp = (np.linspace(-1, 1, size)[None, :] * gx + np.linspace(-1, 1, size)[:, None] * gy)[..., None]
    img = base[None, None, :] + ramp + rng.normal(0.0, noise_std, size=(size, size, 3))
    return img


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def zipf_probabilities(num_classes: int, exponent: float) -> np.ndarray:
    w = np.arange(1, num_classes + 1, dtype=np.float64) ** (-exponent)
    return w / w.sum()


def generate_synthetic(config: SyntheticConfig) -> DatasetManifest:
    """Images of colored shapes whose class frequencies follow a Zipf law.

    Class ``c`` has frequency rank ``c + 1``. Boxes are the exact pixel extents
    of the rendered shapes. Pixels are quantized to multiples of 1/255 so the
    internal manifest format round-trips them exactly.
    """
    C, S = config.num_classes, config.image_size
    if C < 1:
        raise ConfigurationError("num_classes must be >= 1")
    if C > len(SHAPES) * len(PALETTE):
        raise ConfigurationError(f"at most {len(SHAPES) * len(PALETTE)} synthetic classes are available")
    if config.num_images < C:
        raise ConfigurationError("num_images must be >= num_classes")
    if config.zipf_exponent < 0:
        raise ConfigurationError("zipf_exponent must be >= 0")
    if not 1 <= config.min_objects <= config.max_objects:
        raise ConfigurationError("need 1 <= min_objects <= max_objects")
    if config.min_shape_size < 3 or config.min_shape_size > config.max_shape_size:
        raise ConfigurationError("need 3 <= min_shape_size <= max_shape_size")
    if S < config.min_shape_size + 2:
        raise ConfigurationError(f"image_size {S} too small to place a shape of size {config.min_shape_size}")

    rng = np.random.default_rng(config.seed)
    probs = zipf_probabilities(C, config.zipf_exponent)
    max_size = min(config.max_shape_size, S - 2)
    identities = [class_identity(c, C) for c in range(C)]
    masks: dict[tuple[str, int, int], np.ndarray] = {}

    images = []
    for image_id in range(config.num_images):
        img = _background(rng, S, config.noise_std)
        n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
        classes = rng.choice(C, size=n_obj, p=probs)
        anns: list[Annotation] = []
        placed: list[tuple[int, int, int, int]] = []
        for c in classes:
            shape, color = identities[int(c)]
            for _ in range(30):
                w = int(rng.integers(config.min_shape_size, max_size + 1))
                h = int(np.clip(round(w * rng.uniform(0.75, 1.33)), config.min_shape_size, max_size))
                x0 = int(rng.integers(0, S - w + 1))
                y0 = int(rng.integers(0, S - h + 1))
                cand = (x0, y0, x0 + w, y0 + h)
                if all(_box_iou(cand, p) <= config.max_overlap_iou for p in placed):
                    break
            key = (shape, w, h)
            if key not in masks:
                masks[key] = _shape_mask(shape, w, h)
            mask = masks[key]
            rgb = np.clip(np.asarray(PALETTE[color]) + rng.uniform(-config.color_jitter, config.color_jitter, 3), 0, 1)
            region = img[y0 : y0 + h, x0 : x0 + w]
            region[mask] = rgb
            rows, cols = np.nonzero(mask)
            box = BoundingBox(
                float(x0 + cols.min()), float(y0 + rows.min()), float(x0 + cols.max() + 1), float(y0 + rows.max() + 1)
            )
            placed.append(cand)
            anns.append(Annotation(box, int(c)))
        pixels = (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
        images.append(ImageRecord(image_id, S, S, anns, pixels))

    names = [f"{color}_{shape}" for shape, color in identities]
    return DatasetManifest(images, C, names)


def rank_frequency_slope(instance_counts: Sequence[int]) -> float:
    """Least-squares slope of log(count) against log(rank) over nonzero counts."""
    counts = np.sort(np.asarray([c for c in instance_counts if c > 0], dtype=np.float64))[::-1]
    ranks = np.arange(1, len(counts) + 1, dtype=np.float64)
    slope, _ = np.polyfit(np.log(ranks), np.log(counts), 1)
    return float(slope)

