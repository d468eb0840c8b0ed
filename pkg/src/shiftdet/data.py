"""Seeded synthetic detection scenes with a controllable fog-style shift.

Scenes are 96x96 RGB canvases with 1..5 colored shapes (circle, square,
triangle = the 3 classes). Source and target domains share the exact same
scene distribution; target images additionally pass through a fog model
(box blur + gray alpha blend + Gaussian noise) that corrupts the
low-level texture and color cues. Boxes are tight bounds of the rendered
shape in normalized center format.

Datasets live on disk as lossless PNGs plus one JSON object per line:
{"file", "width", "height", "domain", "boxes": [{"cx","cy","w","h","class"}]}.
Target-domain labels are stored but the default loader withholds them;
only evaluation code asks for them explicitly.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

SOURCE, TARGET = 0, 1
DOMAIN_NAMES = {"source": SOURCE, "target": TARGET}
CLASS_NAMES = ("circle", "square", "triangle")
FOG_GRAY = 0.7


class SceneGenerationError(RuntimeError):
    """Raised when object placement stays infeasible after bounded retries."""


@dataclass
class BoxSet:
    """Normalized center-format boxes [M, 4] with integer classes [M]."""

    boxes: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes must have equal length")
        if len(self.boxes):
            w, h = self.boxes[:, 2], self.boxes[:, 3]
            if np.any(w <= 0) or np.any(h <= 0) or np.any(w > 1) or np.any(h > 1):
                raise ValueError("box sizes must lie in (0, 1]")
            if np.any(self.boxes[:, :2] < 0) or np.any(self.boxes[:, :2] > 1):
                raise ValueError("box centers must lie in [0, 1]")

    def __len__(self):
        return len(self.boxes)


@dataclass
class ImageBatch:
    """Stacked images with per-image domain labels and annotations.

    annotations[i] is a BoxSet for labeled (source) images and None for
    target images whose labels were withheld.
    """

    images: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    domains: np.ndarray  # [N] int, 0=source 1=target
    annotations: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be [N,3,H,W], got {self.images.shape}")
        if len(self.annotations) != len(self.images) or len(self.domains) != len(self.images):
            raise ValueError("annotations/domains must match image count")
        for dom, ann in zip(self.domains, self.annotations):
            if dom == SOURCE and ann is None:
                raise ValueError("source images must carry annotations")

    def __len__(self):
        return len(self.images)


@dataclass
class SceneSpec:
    seed: int
    canvas: int = 96
    min_objects: int = 1
    max_objects: int = 5
    min_size: float = 12.0
    max_size: float = 40.0
    max_overlap: float = 0.4
    domain: str = "source"
    fog_beta: float = 0.0
    fog_blur_radius: int = 1
    fog_noise_sigma: float = 0.02

    def __post_init__(self):
        if self.domain not in DOMAIN_NAMES:
            raise ValueError(f"domain must be source|target, got {self.domain!r}")
        if self.min_objects < 1:
            raise ValueError("min_objects must be at least 1")
        if not 0.0 <= self.fog_beta <= 1.0:
            raise ValueError("fog_beta must lie in [0, 1]")


def _box_overlap_frac(a, b):
    """Intersection area over the smaller box's area; corner format."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / min(area_a, area_b)


def _shape_mask(kind, cx, cy, size, xx, yy):
    half = size / 2.0
    if kind == 0:  # circle
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half * half
    if kind == 1:  # square
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # isoceles triangle, apex up: width grows linearly from apex to base
    top = cy - half
    frac = (yy - top) / size
    inside_y = (frac >= 0.0) & (frac <= 1.0)
    return inside_y & (np.abs(xx - cx) <= half * frac)


def generate_scene(spec: SceneSpec):
    """Render one scene deterministically from its seed.

    Returns (image [3,H,W] float32 in [0,1] before fog, BoxSet). Fog for
    target scenes is applied separately by `render_scene` so tests can
    inspect the clean render.
    """
    rng = np.random.default_rng(spec.seed)
    c = spec.canvas
    # light background with a faint vertical gradient and a per-image tint
    base = 0.82 + rng.uniform(-0.06, 0.06, size=3)
    grad = np.linspace(-0.04, 0.04, c)[None, :, None]
    image = np.clip(base[:, None, None] + np.transpose(grad, (2, 1, 0)), 0.0, 1.0)
    image = np.broadcast_to(image, (3, c, c)).astype(np.float64).copy()

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    yy, xx = np.meshgrid(np.arange(c) + 0.5, np.arange(c) + 0.5, indexing="ij")

    placed = []  # corner boxes in pixel coords
    boxes, classes = [], []
    for _ in range(n_objects):
        for attempt in range(200):
            kind = int(rng.integers(len(CLASS_NAMES)))
            size = float(rng.uniform(spec.min_size, spec.max_size))
            cx = float(rng.uniform(size / 2, c - size / 2))
            cy = float(rng.uniform(size / 2, c - size / 2))
            cand = (cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2)
            if all(_box_overlap_frac(cand, p) <= spec.max_overlap for p in placed):
                break
        else:
            raise SceneGenerationError(
                f"could not place object {len(placed) + 1}/{n_objects} (seed {spec.seed})"
            )
        color = rng.uniform(0.0, 0.55, size=3)
        mask = _shape_mask(kind, cx, cy, size, xx, yy)
        if not mask.any():
            raise SceneGenerationError(f"degenerate shape render (seed {spec.seed})")
        image[:, mask] = color[:, None]
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        x1, x2 = cols[0], cols[-1] + 1
        y1, y2 = rows[0], rows[-1] + 1
        boxes.append([(x1 + x2) / 2 / c, (y1 + y2) / 2 / c, (x2 - x1) / c, (y2 - y1) / c])
        classes.append(kind)
        placed.append(cand)

    return image.astype(np.float32), BoxSet(np.array(boxes), np.array(classes))


def box_blur(image, radius):
    """Separable box blur with edge replication; radius 0 is the identity."""
    if radius == 0:
        return image
    k = 2 * radius + 1
    out = image
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        csum = np.cumsum(padded, axis=axis, dtype=np.float64)
        lead = [slice(None)] * 3
        lag = [slice(None)] * 3
        lead[axis] = slice(k, None)
        lag[axis] = slice(0, -k)
        first = [slice(None)] * 3
        first[axis] = slice(k - 1, k)
        head = csum[tuple(first)]
        body = csum[tuple(lead)] - csum[tuple(lag)]
        out = np.concatenate([head, body], axis=axis) / k
    return out.astype(image.dtype)


def apply_fog(image, beta, blur_radius=1, noise_sigma=0.02, rng=None):
    """fogged = (1-beta) * blur(image) + beta * gray(0.7) + noise, clipped.

    With blur_radius 0 and noise_sigma 0, beta=0 is the exact identity.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    out = (1.0 - beta) * box_blur(image.astype(np.float64), blur_radius) + beta * FOG_GRAY
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_scene(spec: SceneSpec):
    """Scene plus domain rendering: target scenes get fog, source are clean."""
    image, boxset = generate_scene(spec)
    if spec.domain == "target" and spec.fog_beta > 0:
        fog_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xF06)))
        image = apply_fog(
            image, spec.fog_beta, spec.fog_blur_radius, spec.fog_noise_sigma, fog_rng
        )
    return image, boxset


def scene_seed(master_seed, split_tag, index):
    """Independent per-scene seed split from the master seed."""
    tag = zlib.crc32(split_tag.encode("utf-8"))
    ss = np.random.SeedSequence((master_seed, tag, index))
    return int(ss.generate_state(1)[0])


# -- disk format ----------------------------------------------------------------


def _to_uint8(image):
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def write_dataset(out_dir, scenes):
    """Write (image [3,H,W] float, BoxSet, domain int) triples to out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    ann_path = os.path.join(out_dir, "annotations.jsonl")
    with open(ann_path, "w", encoding="utf-8") as fh:
        for i, (image, boxset, domain) in enumerate(scenes):
            name = f"img_{i:05d}.png"
            arr = np.transpose(_to_uint8(image), (1, 2, 0))
            Image.fromarray(arr, mode="RGB").save(os.path.join(out_dir, name))
            record = {
                "file": name,
                "width": image.shape[2],
                "height": image.shape[1],
                "domain": int(domain),
                "boxes": [
                    {
                        "cx": float(b[0]),
                        "cy": float(b[1]),
                        "w": float(b[2]),
                        "h": float(b[3]),
                        "class": int(c),
                    }
                    for b, c in zip(boxset.boxes, boxset.classes)
                ],
            }
            fh.write(json.dumps(record) + "\n")


@dataclass
class Record:
    file: str
    image: np.ndarray  # [3, H, W] float32
    domain: int
    boxes: object  # BoxSet or None


def read_dataset(dir_path, with_target_labels=False):
    """Load a dataset directory written by `write_dataset`.

    Labels of target-domain records are withheld (None) unless
    `with_target_labels` is passed — the training path never sets it.
    """
    ann_path = os.path.join(dir_path, "annotations.jsonl")
    records = []
    with open(ann_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                name = obj["file"]
                domain = int(obj["domain"])
                boxes = np.array(
                    [[b["cx"], b["cy"], b["w"], b["h"]] for b in obj["boxes"]]
                ).reshape(-1, 4)
                classes = np.array([b["class"] for b in obj["boxes"]], dtype=np.int64)
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{ann_path}:{lineno}: malformed record ({exc})") from exc
            with Image.open(os.path.join(dir_path, name)) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            image = np.transpose(arr, (2, 0, 1))
            if domain == TARGET and not with_target_labels:
                boxset = None
            else:
                boxset = BoxSet(boxes, classes)
            records.append(Record(name, image, domain, boxset))
    if not records:
        raise ValueError(f"{ann_path}: dataset is empty")
    return records


def records_to_batch(records):
    return ImageBatch(
        images=np.stack([r.image for r in records]),
        domains=np.array([r.domain for r in records]),
        annotations=[r.boxes for r in records],
    )


def generate_split(out_dir, n_scenes, domain, master_seed, split_tag, fog_beta=0.0, **spec_kwargs):
    """Generate and write one split; per-scene seeds are split independently."""
    scenes = []
    for i in range(n_scenes):
        spec = SceneSpec(
            seed=scene_seed(master_seed, split_tag, i),
            domain=domain,
            fog_beta=fog_beta if domain == "target" else 0.0,
            **spec_kwargs,
        )
        image, boxset = render_scene(spec)
        scenes.append((image, boxset, DOMAIN_NAMES[domain]))
    write_dataset(out_dir, scenes)
    return out_dir


def generate_benchmark(
    out_dir,
    master_seed,
    fog_beta=0.6,
    n_source=500,
    n_target=500,
    n_test=200,
    **spec_kwargs,
):
    """Default benchmark: labeled source, unlabeled-at-train target, target test."""
    paths = {
        "source_train": os.path.join(out_dir, "source_train"),
        "target_train": os.path.join(out_dir, "target_train"),
        "target_test": os.path.join(out_dir, "target_test"),
    }
    generate_split(paths["source_train"], n_source, "source", master_seed, "source_train", **spec_kwargs)
    generate_split(
        paths["target_train"], n_target, "target", master_seed, "target_train", fog_beta, **spec_kwargs
    )
    generate_split(
        paths["target_test"], n_test, "target", master_seed, "target_test", fog_beta, **spec_kwargs
    )
    return paths
