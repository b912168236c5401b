"""Synthetic detection scenes, stand-in proposals, dataset files and VOC XML annotations.

Scenes are small grayscale images holding one or two filled silhouettes. With
``context_cue`` on, classes come in pairs that share a silhouette and differ
only by a small marker drawn outside the object's box, so the class can only
be read from the surrounding context.
"""
from __future__ import annotations

import base64
import json
import logging
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import STRIDE
from .errors import ConfigError, ParseError, SchemaVersionError
from .geometry import BoundingBox, clip_boxes, iou_matrix

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SILHOUETTES = ("square", "disc", "triangle", "ring", "cross")
CUE_SILHOUETTES = ("square", "square", "ring", "ring", "triangle")
MARKERS = ("dot", "plus", "bar", "none")
MAX_PLACEMENT_TRIES = 50


@dataclass
class SceneConfig:
    image_size: int = 48
    K: int = 5
    objects_per_image: tuple = (1, 2)
    scale_range: tuple = (16, 22)
    clutter: int = 3
    context_cue: bool = False
    noise: float = 0.05
    seed: int = 0
    channels: int = 1
    marker_gap: tuple = (4, 8)
    jitter_per_gt: int = 16
    jitter_scales: tuple = (0.03, 0.08, 0.15, 0.25, 0.4)
    random_proposals: int = 16
    pair_markers: tuple = ("dot", "plus")

    def __post_init__(self):
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.scale_range = tuple(int(v) for v in self.scale_range)
        self.marker_gap = tuple(int(v) for v in self.marker_gap)
        self.jitter_scales = tuple(float(v) for v in self.jitter_scales)
        self.pair_markers = tuple(str(v) for v in self.pair_markers)
        self.validate()

    def validate(self, prefix="scene"):
        if self.K < 1:
            raise ConfigError(f"{prefix}.K", "must be >= 1")
        if self.scale_range[0] < 4 * STRIDE:
            raise ConfigError(f"{prefix}.scale_range", f"objects must be at least {4 * STRIDE} px")
        if self.scale_range[1] < self.scale_range[0] or self.scale_range[1] > self.image_size:
            raise ConfigError(f"{prefix}.scale_range", "needs min <= max <= image_size")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"{prefix}.objects_per_image", "needs 1 <= min <= max")
        if self.channels < 1:
            raise ConfigError(f"{prefix}.channels", "must be >= 1")
        if len(self.pair_markers) != 2 or any(m not in MARKERS for m in self.pair_markers):
            raise ConfigError(f"{prefix}.pair_markers", f"needs two kinds from {MARKERS}")
        if self.pair_markers[0] == self.pair_markers[1]:
            raise ConfigError(f"{prefix}.pair_markers", "the two kinds must differ")
        if self.noise < 0 or self.clutter < 0:
            raise ConfigError(f"{prefix}.noise", "noise and clutter must be non-negative")


@dataclass
class AnnotatedImage:
    id: str
    image: np.ndarray  # C x H x W in [0, 1]
    gts: list  # [(BoundingBox, object class)]
    proposals: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    markers: list = field(default_factory=list)  # [(BoundingBox, kind)], context-cue scenes only

    def gt_array(self):
        return np.array([b.as_array() for b, _ in self.gts]).reshape(-1, 4)

    def gt_labels(self):
        return np.array([c for _, c in self.gts], dtype=np.int64)


@dataclass
class Dataset:
    scene_config: SceneConfig
    images: list

    def __len__(self):
        return len(self.images)


# -- rendering --------------------------------------------------------------


def _silhouette_mask(kind, x1, y1, w, h, size):
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    u = (xs - (x1 + w / 2)) / (w / 2)
    v = (ys - (y1 + h / 2)) / (h / 2)
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if kind == "square":
        m = inside
    elif kind == "disc":
        m = u * u + v * v <= 1
    elif kind == "triangle":
        m = inside & (np.abs(u) <= (v + 1) / 2)
    elif kind == "ring":
        r2 = u * u + v * v
        m = (r2 <= 1) & (r2 >= 0.4)
    elif kind == "cross":
        m = inside & ((np.abs(u) <= 0.3) | (np.abs(v) <= 0.3))
    else:
        raise ValueError(f"unknown silhouette {kind!r}")
    return m


def _draw_marker(canvas, kind, x, y):
    """Paint a marker with top-left corner ``(x, y)``; returns its box, or None for ``none``."""
    if kind == "none":
        return None
    if kind == "dot":
        canvas[:, y:y + 4, x:x + 4] = 1.0
        return BoundingBox.from_corners(x, y, x + 4, y + 4)
    if kind == "bar":
        canvas[:, y + 1:y + 4, x:x + 5] = 1.0
        return BoundingBox.from_corners(x, y + 1, x + 5, y + 4)
    # plus: 5x5 with one-pixel arms
    canvas[:, y + 2, x:x + 5] = 1.0
    canvas[:, y:y + 5, x + 2] = 1.0
    return BoundingBox.from_corners(x, y, x + 5, y + 5)


def class_silhouette(cls, config: SceneConfig):
    table = CUE_SILHOUETTES if config.context_cue else SILHOUETTES
    return table[cls % len(table)]


def class_marker(cls, config: SceneConfig, rng):
    """Marker kind for an object of class ``cls``; unpaired classes draw one at random."""
    n_paired = min(4, config.K - config.K % 2)
    if cls < n_paired:
        return config.pair_markers[cls % 2]
    return config.pair_markers[int(rng.integers(2))]


def _marker_slot(rng, x1, y1, w, h, size, gap_range):
    sides = rng.permutation(4)
    for side in sides:
        gap = int(rng.integers(gap_range[0], gap_range[1] + 1))
        if side in (0, 1):  # left / right
            mx = x1 - gap - 5 if side == 0 else x1 + w + gap
            my = int(round(y1 + h / 2 - 2.5 + rng.integers(-h // 4, h // 4 + 1)))
        else:  # top / bottom
            my = y1 - gap - 5 if side == 2 else y1 + h + gap
            mx = int(round(x1 + w / 2 - 2.5 + rng.integers(-w // 4, w // 4 + 1)))
        if 0 <= mx and mx + 5 <= size and 0 <= my and my + 5 <= size:
            return mx, my
    return None


def _overlaps(a, b, margin=1):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def generate_scene(config: SceneConfig, index: int) -> AnnotatedImage:
    """Render scene ``index``; a pure function of ``(config, index)``."""
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    canvas = np.zeros((config.channels, size, size), dtype=np.float64)
    n_obj = int(rng.integers(config.objects_per_image[0], config.objects_per_image[1] + 1))
    gts, markers, occupied = [], [], []
    for _ in range(n_obj):
        cls = int(rng.integers(config.K))
        for _try in range(MAX_PLACEMENT_TRIES):
            w = int(rng.integers(config.scale_range[0], config.scale_range[1] + 1))
            h = int(rng.integers(config.scale_range[0], config.scale_range[1] + 1))
            x1 = int(rng.integers(0, size - w + 1))
            y1 = int(rng.integers(0, size - h + 1))
            footprint = [(x1, y1, x1 + w, y1 + h)]
            slot = None
            if config.context_cue:
                slot = _marker_slot(rng, x1, y1, w, h, size, config.marker_gap)
                if slot is None:
                    continue
                footprint.append((slot[0], slot[1], slot[0] + 5, slot[1] + 5))
            if any(_overlaps(f, o) for f in footprint for o in occupied):
                continue
            break
        else:
            log.debug("scene %d: could not place object %d, skipped", index, len(gts))
            continue
        occupied.extend(footprint)
        intensity = rng.uniform(0.6, 1.0)
        mask = _silhouette_mask(class_silhouette(cls, config), x1, y1, w, h, size)
        canvas[:, mask] = intensity
        gts.append((BoundingBox.from_corners(x1, y1, x1 + w, y1 + h), cls))
        if config.context_cue:
            kind = class_marker(cls, config, rng)
            mbox = _draw_marker(canvas, kind, *slot)
            if mbox is not None:
                markers.append((mbox, kind))

    for _ in range(config.clutter):
        for _try in range(MAX_PLACEMENT_TRIES):
            x, y = (int(v) for v in rng.integers(0, size - 2, size=2))
            if not any(_overlaps((x, y, x + 2, y + 2), o, margin=2) for o in occupied):
                canvas[:, y:y + 2, x:x + 2] = 0.5
                break

    if config.noise > 0:
        canvas += rng.normal(0.0, config.noise, canvas.shape)
    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    return AnnotatedImage(f"{config.seed}-{index:06d}", image, gts, markers=markers)


def generate_proposals(gts, config: SceneConfig, seed) -> np.ndarray:
    """Jittered copies of each ground-truth box plus uniform random boxes, ``(n, 4)``.

    ``gts`` holds BoundingBox objects or ``(BoundingBox, class)`` pairs.
    """
    rng = np.random.default_rng(seed)
    size = config.image_size
    boxes = []
    scales = config.jitter_scales
    for g in gts:
        box = g[0] if isinstance(g, tuple) else g
        for j in range(config.jitter_per_gt):
            s = scales[j % len(scales)]
            dx, dy, dw, dh = rng.normal(0.0, 1.0, 4) * s
            boxes.append([box.cx + dx * box.w, box.cy + dy * box.h, box.w * np.exp(dw), box.h * np.exp(dh)])
    for _ in range(config.random_proposals):
        w, h = rng.uniform(8, 0.8 * size, 2)
        cx = rng.uniform(w / 2, size - w / 2)
        cy = rng.uniform(h / 2, size - h / 2)
        boxes.append([cx, cy, w, h])
    return clip_boxes(np.array(boxes, dtype=np.float64).reshape(-1, 4), size, size)


def generate_dataset(config: SceneConfig, n_images: int, start: int = 0) -> Dataset:
    images = []
    for index in range(start, start + n_images):
        img = generate_scene(config, index)
        img.proposals = generate_proposals(img.gts, config, [config.seed, index, 1])
        images.append(img)
    return Dataset(config, images)


# -- JSON container ---------------------------------------------------------


def _box_dict(b: BoundingBox, **extra):
    return {"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, **extra}


def scene_config_to_dict(config: SceneConfig):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}


def dataset_to_dict(ds: Dataset):
    images = []
    for img in ds.images:
        pix = np.ascontiguousarray(img.image)
        entry = {
            "id": img.id,
            "shape": list(pix.shape),
            "dtype": pix.dtype.str,
            "pixels_b64": base64.b64encode(pix.tobytes()).decode(),
            "gts": [_box_dict(b, label=int(c)) for b, c in img.gts],
            "proposals": [{"cx": p[0], "cy": p[1], "w": p[2], "h": p[3]} for p in img.proposals.tolist()],
        }
        if img.markers:
            entry["markers"] = [_box_dict(b, kind=k) for b, k in img.markers]
        images.append(entry)
    return {"schema_version": SCHEMA_VERSION, "scene_config": scene_config_to_dict(ds.scene_config), "images": images}


def dataset_from_dict(doc) -> Dataset:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"dataset schema_version {version!r}, expected {SCHEMA_VERSION}")
    config = SceneConfig(**doc["scene_config"])
    images = []
    for e in doc["images"]:
        raw = base64.b64decode(e["pixels_b64"])
        pix = np.frombuffer(raw, dtype=np.dtype(e.get("dtype", "<f4"))).reshape(e["shape"]).copy()
        gts = [(BoundingBox(g["cx"], g["cy"], g["w"], g["h"]), int(g["label"])) for g in e["gts"]]
        C, H, W = pix.shape
        for b, c in gts:
            x1, y1, x2, y2 = b.corners()
            if x1 < 0 or y1 < 0 or x2 > W or y2 > H or not 0 <= c < config.K:
                raise ParseError(f"image {e['id']}: ground truth {b} / class {c} out of bounds")
        props = np.array([[p["cx"], p["cy"], p["w"], p["h"]] for p in e["proposals"]], dtype=np.float64).reshape(-1, 4)
        markers = [(BoundingBox(m["cx"], m["cy"], m["w"], m["h"]), m["kind"]) for m in e.get("markers", [])]
        images.append(AnnotatedImage(e["id"], pix, gts, props, markers))
    return Dataset(config, images)


def save_dataset(ds: Dataset, path):
    with open(path, "w") as fh:
        json.dump(dataset_to_dict(ds), fh)


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        return dataset_from_dict(json.load(fh))


def split_dataset(ds: Dataset, n_first: int):
    return Dataset(ds.scene_config, ds.images[:n_first]), Dataset(ds.scene_config, ds.images[n_first:])


def label_coverage(ds: Dataset):
    """Counts of proposals per label category using the training thresholds."""
    counts = {"foreground": 0, "background": 0, "ignored": 0}
    for img in ds.images:
        if not img.gts:
            counts["ignored"] += len(img.proposals)
            continue
        alpha = iou_matrix(img.proposals, img.gt_array()).max(axis=1)
        counts["foreground"] += int(np.sum(alpha >= 0.5))
        counts["background"] += int(np.sum((alpha >= 0.1) & (alpha < 0.5)))
        counts["ignored"] += int(np.sum(alpha < 0.1))
    return counts


# -- PASCAL VOC annotations -------------------------------------------------


@dataclass(frozen=True)
class VocObject:
    name: str
    box: BoundingBox
    difficult: bool


def _require(node, path, full_path):
    found = node.find(path)
    if found is None:
        raise ParseError(f"missing element {full_path}")
    return found


def _int_text(node, path, full_path):
    el = _require(node, path, full_path)
    text = (el.text or "").strip()
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{full_path}: expected an integer, got {text!r}") from None


def parse_voc_xml(document: str):
    """Parse one VOC annotation; returns ``(metadata, [VocObject, ...])``.

    VOC corners are 1-based and inclusive, so ``w = xmax - xmin + 1`` and the
    center is the midpoint of the corner pixels.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise ParseError(f"malformed XML: {exc}") from None
    if root.tag != "annotation":
        raise ParseError(f"root element is {root.tag!r}, expected 'annotation'")
    size = _require(root, "size", "annotation/size")
    meta = {
        "filename": (root.findtext("filename") or "").strip(),
        "width": _int_text(size, "width", "size/width"),
        "height": _int_text(size, "height", "size/height"),
    }
    depth = size.findtext("depth")
    if depth is not None and depth.strip():
        meta["depth"] = int(depth)
    objects = []
    for obj in root.findall("object"):
        name_el = _require(obj, "name", "object/name")
        bnd = _require(obj, "bndbox", "object/bndbox")
        xmin = _int_text(bnd, "xmin", "object/bndbox/xmin")
        ymin = _int_text(bnd, "ymin", "object/bndbox/ymin")
        xmax = _int_text(bnd, "xmax", "object/bndbox/xmax")
        ymax = _int_text(bnd, "ymax", "object/bndbox/ymax")
        diff_text = obj.findtext("difficult")
        difficult = bool(int(diff_text)) if diff_text and diff_text.strip() else False
        box = BoundingBox((xmin + xmax) / 2.0, (ymin + ymax) / 2.0, xmax - xmin + 1, ymax - ymin + 1)
        objects.append(VocObject((name_el.text or "").strip(), box, difficult))
    return meta, objects


def render_voc_xml(meta, objects) -> str:
    """Inverse of :func:`parse_voc_xml` for boxes that sit on whole pixels."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = meta.get("filename", "")
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(meta["width"])
    ET.SubElement(size, "height").text = str(meta["height"])
    if "depth" in meta:
        ET.SubElement(size, "depth").text = str(meta["depth"])
    for o in objects:
        el = ET.SubElement(root, "object")
        ET.SubElement(el, "name").text = o.name
        ET.SubElement(el, "difficult").text = "1" if o.difficult else "0"
        bnd = ET.SubElement(el, "bndbox")
        xmin = o.box.cx - (o.box.w - 1) / 2
        ymin = o.box.cy - (o.box.h - 1) / 2
        for tag, v in (("xmin", xmin), ("ymin", ymin), ("xmax", xmin + o.box.w - 1), ("ymax", ymin + o.box.h - 1)):
            ET.SubElement(bnd, tag).text = str(int(round(v)))
    return ET.tostring(root, encoding="unicode")
