"""Synthetic detection data, base/novel splits, K-shot sampling and parsers.

Synthetic classes are ``shape-texture`` pairs drawn with anti-aliased edges
over a procedurally textured background. Image ``i`` of a dataset generated
with seed ``s`` is rendered from ``numpy.random.default_rng([s, i])`` alone,
so any image can be regenerated independently of the others.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, ParseError, SamplingError

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring")
TEXTURES = ("solid", "striped", "checker")
DEFAULT_CATALOGUE = (
    "circle-solid", "square-solid", "triangle-solid", "cross-solid",
    "circle-striped", "square-striped", "triangle-striped", "cross-striped",
)

DIOR_CLASSES = (
    "airplane", "airport", "baseball field", "basketball court", "bridge", "chimney", "dam",
    "expressway service area", "expressway toll station", "golf course", "ground track field",
    "harbor", "overpass", "ship", "stadium", "storage tank", "tennis court", "train station",
    "vehicle", "windmill",
)
# raw DIOR XML names -> catalogue names
DIOR_ALIASES = {
    "baseballfield": "baseball field", "basketballcourt": "basketball court",
    "expressway-service-area": "expressway service area", "expressway-toll-station": "expressway toll station",
    "golffield": "golf course", "groundtrackfield": "ground track field", "storagetank": "storage tank",
    "tenniscourt": "tennis court", "trainstation": "train station",
}
DIOR_NOVEL = {
    "dior-1": ("baseball field", "basketball court", "bridge", "chimney", "ship"),
    # "highway toll station", "port", "track field" in the usual split tables
    "dior-2": ("airplane", "airport", "expressway toll station", "harbor", "ground track field"),
    "dior-3": ("dam", "golf course", "storage tank", "tennis court", "vehicle"),
    # "service area", "viaduct"
    "dior-4": ("expressway service area", "overpass", "stadium", "train station", "windmill"),
}
# NWPU VHR-10 class ids 1..10 in order
NWPU_CLASSES = (
    "airplane", "ship", "storage tank", "baseball diamond", "tennis court",
    "basketball court", "ground track field", "harbor", "bridge", "vehicle",
)
NWPU_NOVEL = ("airplane", "baseball diamond", "tennis court")

SPLIT_IDS = tuple(DIOR_NOVEL) + ("nwpu", "synthetic")


@dataclass
class DatasetSpec:
    image_size: int = 128
    classes: List[str] = field(default_factory=lambda: list(DEFAULT_CATALOGUE))
    objects_per_image: List[int] = field(default_factory=lambda: [1, 4])
    scale_range: List[float] = field(default_factory=lambda: [8.0, 64.0])
    clutter: float = 0.5
    num_images: int = 300
    seed: int = 0

    def __post_init__(self):
        self.classes = list(self.classes)
        if len(self.classes) < 2:
            raise ConfigError(f"class catalogue needs at least 2 classes, got {len(self.classes)}")
        for name in self.classes:
            shape, _, texture = name.partition("-")
            if shape not in SHAPES or texture not in TEXTURES:
                raise ConfigError(f"unknown synthetic class {name!r}; use <shape>-<texture> from {SHAPES} x {TEXTURES}")
        lo, hi = self.scale_range
        if not 2 <= lo <= hi <= self.image_size:
            raise ConfigError(f"scale range {self.scale_range} must lie within [2, {self.image_size}]")
        a, b = self.objects_per_image
        if not 0 <= a <= b:
            raise ConfigError(f"objects_per_image range {self.objects_per_image} is invalid")
        if self.num_images < 0:
            raise ConfigError("num_images must be >= 0")


@dataclass
class AnnotatedImage:
    image: Optional[np.ndarray]  # (H, W, 3) uint8
    boxes: np.ndarray  # (n, 4) float, x1 y1 x2 y2
    classes: List[str]
    source_id: str
    ignore: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # masked instances
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.ignore = np.asarray(self.ignore, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes differ in length")


@dataclass
class Dataset:
    images: List[AnnotatedImage]
    catalogue: List[str]
    spec: Optional[DatasetSpec] = None

    def __len__(self):
        return len(self.images)

    def class_counts(self) -> Dict[str, int]:
        counts = {c: 0 for c in self.catalogue}
        for im in self.images:
            for c in im.classes:
                counts[c] = counts.get(c, 0) + 1
        return counts

    def subset(self, keep: Iterable[int]) -> "Dataset":
        return Dataset([self.images[i] for i in keep], self.catalogue, self.spec)


@dataclass(frozen=True)
class SplitSpec:
    base: tuple
    novel: tuple

    def __post_init__(self):
        both = set(self.base) & set(self.novel)
        if both:
            raise ConfigError(f"base and novel classes overlap: {sorted(both)}")


@dataclass(frozen=True)
class ShotConfig:
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")


# ---------------------------------------------------------------- rendering

_SS = 4  # supersampling factor for anti-aliased edges


def _shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Coverage in [0, 1] of ``shape`` filling a ``w x h`` box."""
    W, H = w * _SS, h * _SS
    im = Image.new("L", (W, H), 0)
    d = ImageDraw.Draw(im)
    if shape == "circle":
        d.ellipse([0, 0, W - 1, H - 1], fill=255)
    elif shape == "square":
        d.rectangle([0, 0, W - 1, H - 1], fill=255)
    elif shape == "triangle":
        d.polygon([(W / 2, 0), (W - 1, H - 1), (0, H - 1)], fill=255)
    elif shape == "cross":
        tw, th = W / 3, H / 3
        d.rectangle([tw, 0, 2 * tw, H - 1], fill=255)
        d.rectangle([0, th, W - 1, 2 * th], fill=255)
    elif shape == "diamond":
        d.polygon([(W / 2, 0), (W - 1, H / 2), (W / 2, H - 1), (0, H / 2)], fill=255)
    elif shape == "ring":
        d.ellipse([0, 0, W - 1, H - 1], fill=255)
        d.ellipse([W * 0.3, H * 0.3, W * 0.7, H * 0.7], fill=0)
    im = im.resize((w, h), Image.BOX)
    return np.asarray(im, dtype=np.float64) / 255.0


def _texture(texture: str, w: int, h: int, rng) -> np.ndarray:
    """Pattern in [0, 1]: 1 takes the primary colour, 0 the secondary."""
    if texture == "solid":
        return np.ones((h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    period = max(3.0, min(w, h) / 4.0)
    if texture == "striped":
        phase = rng.uniform(0, period)
        return (np.mod(xx + yy + phase, period) < period / 2).astype(np.float64)
    # checker
    return ((np.floor(xx / period) + np.floor(yy / period)) % 2 == 0).astype(np.float64)


def _background(size: int, clutter: float, rng) -> np.ndarray:
    base = rng.uniform(60, 160, size=3)
    coarse = rng.normal(0, 1, size=(6, 6, 3))
    smooth = np.asarray(
        Image.fromarray(((coarse - coarse.min()) / (np.ptp(coarse) + 1e-9) * 255).astype(np.uint8)).resize(
            (size, size), Image.BICUBIC),
        dtype=np.float64) / 255.0 - 0.5
    img = base + 40.0 * smooth + clutter * rng.normal(0, 12, size=(size, size, 3))
    # a few faint linear structures (roads / field edges)
    for _ in range(int(round(3 * clutter))):
        yy, xx = np.mgrid[0:size, 0:size]
        theta = rng.uniform(0, math.pi)
        rho = rng.uniform(0, size)
        dist = np.abs(xx * math.cos(theta) + yy * math.sin(theta) - rho)
        img += (dist < 1.5)[..., None] * rng.uniform(-25, 25)
    return img


def render_image(spec: DatasetSpec, index: int) -> AnnotatedImage:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    img = _background(size, spec.clutter, rng)
    n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    boxes, classes = [], []
    lo, hi = spec.scale_range
    for _ in range(n_obj):
        cls = spec.classes[int(rng.integers(len(spec.classes)))]
        for _attempt in range(50):
            side = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            aspect = math.exp(rng.uniform(-0.25, 0.25))
            w = int(np.clip(round(side * aspect), 2, size))
            h = int(np.clip(round(side / aspect), 2, size))
            x = int(rng.integers(0, size - w + 1))
            y = int(rng.integers(0, size - h + 1))
            cand = (x, y, x + w, y + h)
            if all(_overlap(cand, b) <= 0.1 for b in boxes):
                break
        else:
            continue
        shape, _, texture = cls.partition("-")
        alpha = _shape_mask(shape, w, h)[..., None]
        primary = rng.uniform(0, 255, size=3)
        secondary = 255.0 - primary
        pat = _texture(texture, w, h, rng)[..., None]
        fill = pat * primary + (1 - pat) * secondary
        patch = img[y:y + h, x:x + w]
        img[y:y + h, x:x + w] = patch * (1 - alpha) + fill * alpha
        boxes.append(cand)
        classes.append(cls)
    pixels = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return AnnotatedImage(pixels, np.asarray(boxes, dtype=np.float64), classes, f"{spec.seed}-{index:06d}")


def _overlap(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def generate_synthetic(spec: DatasetSpec, seed: Optional[int] = None) -> Dataset:
    if seed is not None:
        spec = replace(spec, seed=seed)
    return Dataset([render_image(spec, i) for i in range(spec.num_images)], list(spec.classes), spec)


def filter_classes(dataset: Dataset, allowed: Iterable[str]) -> Dataset:
    """Keep images whose every instance belongs to ``allowed``."""
    allowed = set(allowed)
    keep = [i for i, im in enumerate(dataset.images) if set(im.classes) <= allowed]
    return dataset.subset(keep)


# ------------------------------------------------------------------ splits

def make_split(split_id: str, catalogue: Optional[Sequence[str]] = None, num_novel: int = 2) -> SplitSpec:
    """Base/novel partition.

    ``dior-1..4`` and ``nwpu`` reproduce the standard few-shot splits over
    their datasets' class lists; ``synthetic`` takes the last ``num_novel``
    classes of ``catalogue`` as novel.
    """
    if split_id in DIOR_NOVEL:
        cat, novel = DIOR_CLASSES, DIOR_NOVEL[split_id]
    elif split_id == "nwpu":
        cat, novel = NWPU_CLASSES, NWPU_NOVEL
    elif split_id == "synthetic":
        cat = tuple(catalogue or DEFAULT_CATALOGUE)
        if not 1 <= num_novel < len(cat):
            raise ConfigError(f"num_novel must be in [1, {len(cat) - 1}] for a {len(cat)}-class catalogue")
        novel = cat[-num_novel:]
    else:
        raise ConfigError(f"unknown split {split_id!r}; options: {', '.join(SPLIT_IDS)}")
    return SplitSpec(tuple(c for c in cat if c not in novel), tuple(novel))


def sample_k_shot(dataset: Dataset, classes: Sequence[str], k: int, seed: int = 0) -> Dataset:
    """Greedy seeded selection of images until each class has exactly ``k`` instances.

    Images are visited in a seeded random order and taken when they hold a
    still-needed instance. Within a taken image, instances beyond the K-th of
    their class, and instances of classes not requested, move to the
    image's ``ignore`` list so they are neither positives nor negatives.
    """
    ShotConfig(k, seed)
    classes = list(classes)
    available = {c: 0 for c in classes}
    for im in dataset.images:
        for c in im.classes:
            if c in available:
                available[c] += 1
    short = {c: n for c, n in available.items() if n < k}
    if short:
        raise SamplingError(f"not enough instances for {k}-shot sampling: {short} (need {k} each)")

    rng = np.random.default_rng(seed)
    counts = {c: 0 for c in classes}
    chosen = []
    for idx in rng.permutation(len(dataset.images)):
        if all(n >= k for n in counts.values()):
            break
        im = dataset.images[int(idx)]
        if not any(c in counts and counts[c] < k for c in im.classes):
            continue
        keep_b, keep_c, masked = [], [], [im.ignore]
        for box, c in zip(im.boxes, im.classes):
            if c in counts and counts[c] < k:
                counts[c] += 1
                keep_b.append(box)
                keep_c.append(c)
            else:
                masked.append(box[None])
        chosen.append(replace(im, boxes=np.asarray(keep_b).reshape(-1, 4), classes=keep_c,
                              ignore=np.concatenate(masked, axis=0)))
    return Dataset(chosen, dataset.catalogue, dataset.spec)


# ----------------------------------------------------------------- parsers

def _xml_int(node, path: str, where: str) -> float:
    el = node.find(path)
    if el is None or el.text is None or not el.text.strip():
        raise ParseError(f"missing element {where}/{path}")
    try:
        return float(el.text.strip())
    except ValueError:
        raise ParseError(f"non-numeric value {el.text!r} at {where}/{path}") from None


def parse_voc_xml(source) -> AnnotatedImage:
    """Parse a VOC-style XML annotation (DIOR's format).

    ``source`` is a ``Path`` to read or the XML text itself.

    VOC pixel indices are 1-based and inclusive; the internal corner
    convention is 0-based with exclusive max, hence ``x1 = xmin - 1``,
    ``y1 = ymin - 1``, ``x2 = xmax``, ``y2 = ymax``.
    """
    text = source.read_text() if isinstance(source, Path) else source
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ParseError(f"malformed XML: {exc}") from None
    fname = root.findtext("filename", default="").strip()
    boxes, classes = [], []
    for i, obj in enumerate(root.findall("object")):
        where = f"annotation/object[{i}]"
        name = obj.findtext("name")
        if name is None or not name.strip():
            raise ParseError(f"missing element {where}/name")
        name = name.strip()
        name = DIOR_ALIASES.get(name.lower(), name)
        bb = obj.find("bndbox")
        if bb is None:
            raise ParseError(f"missing element {where}/bndbox")
        xmin, ymin, xmax, ymax = (_xml_int(bb, t, f"{where}/bndbox") for t in ("xmin", "ymin", "xmax", "ymax"))
        if xmax <= xmin or ymax <= ymin:
            raise ParseError(f"object {i} ({name!r}) has an empty box: ({xmin}, {ymin}, {xmax}, {ymax})")
        boxes.append([xmin - 1, ymin - 1, xmax, ymax])
        classes.append(name)
    return AnnotatedImage(None, np.asarray(boxes, dtype=np.float64).reshape(-1, 4), classes, fname)


_NWPU_LINE = re.compile(
    r"^\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)\s*,\s*"
    r"\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)\s*,\s*(\d+)\s*$"
)


def parse_nwpu(source, source_id: str = "") -> AnnotatedImage:
    """Parse an NWPU VHR-10 ground-truth file: ``(x1,y1),(x2,y2),class`` per line.

    ``source`` is a ``Path`` to read or the file's text.
    """
    path = source if isinstance(source, Path) else None
    text = path.read_text() if path is not None else source
    boxes, classes, ids = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        m = _NWPU_LINE.match(line.strip())
        if m is None:
            raise ParseError(f"line {lineno}: expected '(x1,y1),(x2,y2),class', got {line.strip()!r}")
        x1, y1, x2, y2 = (float(v) for v in m.groups()[:4])
        cid = int(m.group(5))
        if x2 <= x1:
            raise ParseError(f"line {lineno}: x2 <= x1 ({x2} <= {x1})")
        if y2 <= y1:
            raise ParseError(f"line {lineno}: y2 <= y1 ({y2} <= {y1})")
        if not 1 <= cid <= len(NWPU_CLASSES):
            raise ParseError(f"line {lineno}: class id {cid} outside 1..{len(NWPU_CLASSES)}")
        boxes.append([x1, y1, x2, y2])
        classes.append(NWPU_CLASSES[cid - 1])
        ids.append(cid)
    sid = source_id or (path.stem if path is not None else "")
    return AnnotatedImage(None, np.asarray(boxes).reshape(-1, 4), classes, sid, meta={"class_ids": ids})


# -------------------------------------------------------------- disk format

DATASET_FORMAT_VERSION = 1


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(dataset: Dataset, out_dir, name: str = "train", config: Optional[dict] = None) -> Path:
    """Write PNG images and ``<name>.json`` annotations; returns the JSON path.

    Schema: ``{"version", "name", "catalogue", "spec", "config",
    "images": [{"id", "file", "width", "height"}],
    "annotations": [{"image_id", "box", "class", "ignore"}]}``.
    """
    out = Path(out_dir)
    (out / name).mkdir(parents=True, exist_ok=True)
    images, anns = [], []
    for i, im in enumerate(dataset.images):
        rel = f"{name}/{im.source_id}.png"
        Image.fromarray(im.image).save(out / rel, format="PNG", optimize=False)
        images.append({"id": i, "source_id": im.source_id, "file": rel,
                       "height": int(im.image.shape[0]), "width": int(im.image.shape[1])})
        for box, cls in zip(im.boxes.tolist(), im.classes):
            anns.append({"image_id": i, "box": box, "class": cls, "ignore": False})
        for box in im.ignore.tolist():
            anns.append({"image_id": i, "box": box, "class": None, "ignore": True})
    doc = {
        "version": DATASET_FORMAT_VERSION, "name": name, "catalogue": list(dataset.catalogue),
        "spec": asdict(dataset.spec) if dataset.spec is not None else None,
        "config": config or {}, "images": images, "annotations": anns,
    }
    path = out / f"{name}.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("version") != DATASET_FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset version {doc.get('version')!r} in {path}")
    per_img = {im["id"]: ([], [], []) for im in doc["images"]}
    for a in doc["annotations"]:
        b, c, ig = per_img[a["image_id"]]
        if a["ignore"]:
            ig.append(a["box"])
        else:
            b.append(a["box"])
            c.append(a["class"])
    images = []
    for im in doc["images"]:
        pixels = np.asarray(Image.open(path.parent / im["file"]).convert("RGB"))
        b, c, ig = per_img[im["id"]]
        images.append(AnnotatedImage(pixels, np.asarray(b).reshape(-1, 4), c, im["source_id"],
                                     np.asarray(ig).reshape(-1, 4)))
    spec = DatasetSpec(**doc["spec"]) if doc.get("spec") else None
    return Dataset(images, doc["catalogue"], spec)


def write_manifest(out_dir, files: Sequence[Path], config: dict) -> Path:
    """Manifest with the resolved config and a SHA-256 per written file."""
    out = Path(out_dir)
    entries = {}
    for f in sorted(Path(p) for p in files):
        entries[str(f.relative_to(out))] = _sha256(f)
    manifest = {"config": config, "files": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path
