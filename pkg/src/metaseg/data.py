"""Datasets: loading, label remapping, augmentation, synthetic domains.

Disk layout (also produced by the ``synth`` command)::

    <root>/<domain>/<split>/images/<stem>.png
    <root>/<domain>/<split>/labels/<stem>.png

Images are RGB PNGs normalized to [0, 1] on load; labels are
single-channel 8-bit PNGs holding train ids (255 = ignore).
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

IGNORE_ID = 255

# 19-class train-id convention, in report column order (id 0..18)
CLASS_NAMES = [
    "road", "sidewalk", "building", "wall", "fence", "pole",
    "traffic light", "traffic sign", "vegetation", "terrain", "sky",
    "person", "rider", "car", "truck", "bus", "train", "motorcycle",
    "bicycle",
]

# Merge table for the five extra classes carried by one of the source
# datasets, mapped to their nearest semantic parent. Extended ids 19..23
# are assumed for van, pickup, street light, billboard and ego-vehicle.
EXTRA_CLASS_MERGE = {
    19: 13,         # van -> car
    20: 14,         # pickup -> truck
    21: 5,          # street light -> pole
    22: 7,          # billboard -> traffic sign
    23: IGNORE_ID,  # ego-vehicle -> ignore
}


class DataError(ValueError):
    """Dataset contents violate the layout or label-id contract."""


@dataclasses.dataclass
class DomainSample:
    image: np.ndarray                     # H x W x 3 float32 in [0, 1]
    label: Optional[np.ndarray]           # H x W uint8 train ids, or None
    id: str

    def __post_init__(self):
        if self.label is not None and self.label.shape != self.image.shape[:2]:
            raise DataError(
                f"sample {self.id}: label {self.label.shape} does not match "
                f"image {self.image.shape[:2]}")


@dataclasses.dataclass
class DomainSet:
    name: str
    samples: list
    role: str                             # "source" | "target"
    n_labelled: int = 0

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise DataError(f"unknown domain role {self.role!r}")
        if self.role == "source":
            missing = [s.id for s in self.samples if s.label is None]
            if missing:
                raise DataError(f"source domain {self.name}: unlabelled samples {missing}")
            self.n_labelled = len(self.samples)

    @property
    def n_unlabelled(self) -> int:
        return len(self.samples) - self.n_labelled


@dataclasses.dataclass
class AugmentationConfig:
    resize_range: tuple = (0.5, 2.0)
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    crop: tuple = (600, 600)

    def __post_init__(self):
        lo, hi = self.resize_range
        if not (0 < lo <= hi):
            raise DataError(f"bad resize range {self.resize_range}")


@dataclasses.dataclass
class DomainShift:
    """Photometric/geometric appearance shift applied to one synthetic domain."""
    hue: float = 0.0               # rotation angle in radians
    brightness: float = 1.0        # multiplicative scale
    noise_sigma: float = 0.0       # additive gaussian noise
    blur_radius: float = 0.0       # gaussian blur sigma in pixels
    warp_amplitude: float = 0.0    # sinusoidal displacement in pixels

    def is_identity(self) -> bool:
        return (self.hue == 0.0 and self.brightness == 1.0
                and self.noise_sigma == 0.0 and self.blur_radius == 0.0
                and self.warp_amplitude == 0.0)


@dataclasses.dataclass
class SynthSpec:
    num_classes: int = 5
    size: tuple = (64, 64)
    shapes_range: tuple = (3, 8)
    n_images: int = 20
    shifts: list = dataclasses.field(default_factory=lambda: [DomainShift()])
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("SynthSpec needs at least 2 classes")
        if self.shapes_range[0] > self.shapes_range[1]:
            raise DataError(f"bad shapes range {self.shapes_range}")


# ---------------------------------------------------------------------------
# PNG input/output
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_label(path, num_classes: int) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError(f"{path}: label must be single-channel, got shape {arr.shape}")
    validate_label(arr, num_classes, str(path))
    return arr


def save_label(path, label: np.ndarray) -> None:
    Image.fromarray(label.astype(np.uint8), mode="L").save(path)


def validate_label(label: np.ndarray, num_classes: int, origin: str = "label") -> None:
    bad = np.unique(label[(label >= num_classes) & (label != IGNORE_ID)])
    if bad.size:
        raise DataError(f"{origin}: label id(s) {bad.tolist()} outside "
                        f"[0, {num_classes}) + {{{IGNORE_ID}}}")


def load_domain(root, role: str, n_labelled: Optional[int] = None,
                split: str = "train", num_classes: int = 19) -> DomainSet:
    """Load one domain directory into a DomainSet.

    Sample order is lexicographic by filename stem. For a target domain,
    only the first ``n_labelled`` samples that carry label files keep
    their labels; the rest are treated as unlabelled.
    """
    root = Path(root)
    img_dir = root / split / "images"
    lab_dir = root / split / "labels"
    if not img_dir.is_dir():
        raise DataError(f"missing image directory {img_dir}")
    samples = []
    kept = 0
    for img_path in sorted(img_dir.glob("*.png")):
        stem = img_path.stem
        lab_path = lab_dir / f"{stem}.png"
        image = load_image(img_path)
        label = None
        if lab_path.exists():
            label = load_label(lab_path, num_classes)
            if label.shape != image.shape[:2]:
                raise DataError(f"{stem}: label {label.shape} vs image {image.shape[:2]}")
        if role == "source":
            if label is None:
                raise DataError(f"source domain {root.name}: missing label for {stem}")
        elif n_labelled is not None and label is not None:
            if kept >= n_labelled:
                label = None
            else:
                kept += 1
        samples.append(DomainSample(image=image, label=label, id=stem))
    if not samples:
        raise DataError(f"no samples found under {img_dir}")
    n_lab = sum(1 for s in samples if s.label is not None)
    if role == "target" and n_labelled is not None and n_lab < n_labelled:
        raise DataError(f"target domain {root.name}: requested {n_labelled} labelled "
                        f"samples, found {n_lab}")
    return DomainSet(name=root.name, samples=samples, role=role, n_labelled=n_lab)


def save_domain(dset: DomainSet, root, split: str = "train") -> None:
    root = Path(root)
    img_dir = root / split / "images"
    lab_dir = root / split / "labels"
    img_dir.mkdir(parents=True, exist_ok=True)
    lab_dir.mkdir(parents=True, exist_ok=True)
    for s in dset.samples:
        save_image(img_dir / f"{s.id}.png", s.image)
        if s.label is not None:
            save_label(lab_dir / f"{s.id}.png", s.label)


# ---------------------------------------------------------------------------
# label remapping
# ---------------------------------------------------------------------------

def remap_labels(label: np.ndarray, table: dict, num_classes: int = 19) -> np.ndarray:
    """Replace ids listed in ``table``; all other ids pass through."""
    lut = np.arange(256, dtype=np.int64)
    for src, dst in table.items():
        if not (0 <= dst < num_classes or dst == IGNORE_ID):
            raise DataError(f"remap target id {dst} out of range")
        lut[src] = dst
    out = lut[label.astype(np.int64)].astype(np.uint8)
    validate_label(out, num_classes, "remapped label")
    return out


# ---------------------------------------------------------------------------
# resampling helpers (plain numpy, no gradients needed here)
# ---------------------------------------------------------------------------

def _axis_positions(src: int, dst: int) -> np.ndarray:
    return np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0, src - 1)


def resize_image(image: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize of an H x W x C float image."""
    h, w = image.shape[:2]
    ho, wo = size
    py = _axis_positions(h, ho)
    px = _axis_positions(w, wo)
    y0 = np.floor(py).astype(int)
    x0 = np.floor(px).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (py - y0)[:, None, None]
    fx = (px - x0)[None, :, None]
    return ((1 - fy) * (1 - fx) * image[y0[:, None], x0[None, :]]
            + (1 - fy) * fx * image[y0[:, None], x1[None, :]]
            + fy * (1 - fx) * image[y1[:, None], x0[None, :]]
            + fy * fx * image[y1[:, None], x1[None, :]]).astype(image.dtype)


def resize_label(label: np.ndarray, size: tuple) -> np.ndarray:
    """Nearest-neighbor resize (interpolating ids is meaningless)."""
    h, w = label.shape
    ho, wo = size
    yi = np.clip(np.round(_axis_positions(h, ho)).astype(int), 0, h - 1)
    xi = np.clip(np.round(_axis_positions(w, wo)).astype(int), 0, w - 1)
    return label[yi[:, None], xi[None, :]]


def _pad_to(image, label, crop):
    h, w = image.shape[:2]
    ph, pw = max(0, crop[0] - h), max(0, crop[1] - w)
    if ph == 0 and pw == 0:
        return image, label
    pads = ((0, ph), (0, pw))
    image = np.pad(image, pads + ((0, 0),), mode="reflect")
    if label is not None:
        label = np.pad(label, pads, mode="constant", constant_values=IGNORE_ID)
    return image, label


def standard_augment(sample: DomainSample, config: AugmentationConfig,
                     rng: np.random.Generator) -> DomainSample:
    """Resize / flip / blur / crop; the label follows every geometric step.

    Undersized post-resize images are reflect-padded to the crop size
    (labels padded with the ignore id) before cropping.
    """
    image, label = sample.image, sample.label
    ratio = rng.uniform(*config.resize_range)
    h, w = image.shape[:2]
    nh, nw = max(1, round(h * ratio)), max(1, round(w * ratio))
    if (nh, nw) != (h, w):
        image = resize_image(image, (nh, nw))
        if label is not None:
            label = resize_label(label, (nh, nw))

    if rng.random() < config.flip_prob:
        image = image[:, ::-1].copy()
        if label is not None:
            label = label[:, ::-1].copy()

    if rng.random() < config.blur_prob:
        sigma = rng.uniform(*config.blur_sigma)
        image = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0))

    image, label = _pad_to(image, label, config.crop)
    ch, cw = config.crop
    y = int(rng.integers(0, image.shape[0] - ch + 1))
    x = int(rng.integers(0, image.shape[1] - cw + 1))
    image = np.ascontiguousarray(image[y:y + ch, x:x + cw])
    if label is not None:
        label = np.ascontiguousarray(label[y:y + ch, x:x + cw])
    return DomainSample(image=image.astype(np.float32), label=label, id=sample.id)


# ---------------------------------------------------------------------------
# synthetic multi-domain generator
# ---------------------------------------------------------------------------

def _class_palette(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 7919])
    palette = rng.uniform(0.15, 0.85, size=(spec.num_classes, 3))
    palette[0] = (0.25, 0.25, 0.3)  # background kept dark and stable
    return palette


def _draw_shape(classmap, rng, cls):
    h, w = classmap.shape
    kind = rng.integers(0, 3)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ry = rng.uniform(0.08, 0.3) * h
    rx = rng.uniform(0.08, 0.3) * w
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:       # rectangle
        mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    elif kind == 1:     # ellipse
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:               # half-plane wedge (triangle-ish)
        ang = rng.uniform(0, 2 * math.pi)
        d1 = (yy - cy) * math.cos(ang) + (xx - cx) * math.sin(ang)
        d2 = (yy - cy) * math.cos(ang + 2.3) + (xx - cx) * math.sin(ang + 2.3)
        mask = (d1 <= ry) & (d2 <= rx) & (d1 >= -ry) & (d2 >= -rx)
    classmap[mask] = cls


def _warp_indices(h, w, amplitude, rng):
    fy = rng.uniform(0.5, 2.0)
    fx = rng.uniform(0.5, 2.0)
    p1, p2 = rng.uniform(0, 2 * math.pi, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    dy = amplitude * np.sin(2 * math.pi * fy * xx / w + p1)
    dx = amplitude * np.sin(2 * math.pi * fx * yy / h + p2)
    yi = np.clip(np.round(yy + dy), 0, h - 1).astype(int)
    xi = np.clip(np.round(xx + dx), 0, w - 1).astype(int)
    return yi, xi


def _hue_matrix(theta: float) -> np.ndarray:
    axis = np.ones(3) / math.sqrt(3.0)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return (math.cos(theta) * np.eye(3) + math.sin(theta) * k
            + (1 - math.cos(theta)) * np.outer(axis, axis))


def apply_domain_shift(image: np.ndarray, shift: DomainShift,
                       rng: np.random.Generator) -> np.ndarray:
    """Photometric part of a domain shift (geometry is applied at render time)."""
    out = image
    if shift.hue != 0.0:
        out = out @ _hue_matrix(shift.hue).T.astype(out.dtype)
    if shift.brightness != 1.0:
        out = out * shift.brightness
    if shift.blur_radius > 0.0:
        out = ndimage.gaussian_filter(out, sigma=(shift.blur_radius, shift.blur_radius, 0))
    if shift.noise_sigma > 0.0:
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synth_generate(spec: SynthSpec, domain_shift_index: int,
                   role: str = "source", name: Optional[str] = None) -> DomainSet:
    """Procedural labelled scenes under the indexed appearance shift.

    The class map is rasterized once (including the geometric warp) and
    serves as both the label and the colorization stencil, so labels
    agree exactly with the rendered geometry. Deterministic given
    (spec.seed, domain_shift_index).
    """
    if not (0 <= domain_shift_index < len(spec.shifts)):
        raise DataError(f"shift index {domain_shift_index} outside spec "
                        f"({len(spec.shifts)} shifts)")
    shift = spec.shifts[domain_shift_index]
    rng = np.random.default_rng([spec.seed, domain_shift_index])
    palette = _class_palette(spec).astype(np.float32)
    h, w = spec.size
    samples = []
    for i in range(spec.n_images):
        classmap = np.zeros((h, w), dtype=np.uint8)
        n_shapes = int(rng.integers(spec.shapes_range[0], spec.shapes_range[1] + 1))
        for _ in range(n_shapes):
            _draw_shape(classmap, rng, int(rng.integers(1, spec.num_classes)))
        if shift.warp_amplitude > 0.0:
            yi, xi = _warp_indices(h, w, shift.warp_amplitude, rng)
            classmap = classmap[yi, xi]
        image = palette[classmap]
        # mild per-image appearance variation shared by all domains
        image = image * rng.uniform(0.9, 1.1)
        image = image + rng.normal(0.0, 0.02, size=image.shape).astype(np.float32)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        image = apply_domain_shift(image, shift, rng)
        samples.append(DomainSample(image=image, label=classmap.copy(),
                                    id=f"img{i:04d}"))
    return DomainSet(name=name or f"synth{domain_shift_index}",
                     samples=samples, role=role,
                     n_labelled=len(samples))


# ---------------------------------------------------------------------------
# target split
# ---------------------------------------------------------------------------

def split_target(dset: DomainSet, n_labelled: int, rng: np.random.Generator):
    """Partition a target domain into (labelled eval, unlabelled train).

    Eval samples keep their labels; training samples have labels
    stripped. The partition is disjoint and exhaustive.
    """
    if dset.role != "target":
        raise DataError(f"split_target requires a target domain, got role {dset.role!r}")
    labelled_idx = [i for i, s in enumerate(dset.samples) if s.label is not None]
    if n_labelled > len(labelled_idx):
        raise DataError(f"requested {n_labelled} labelled eval samples, "
                        f"only {len(labelled_idx)} available")
    chosen = set(np.asarray(labelled_idx)[rng.permutation(len(labelled_idx))[:n_labelled]]
                 .tolist())
    eval_samples, train_samples = [], []
    for i, s in enumerate(dset.samples):
        if i in chosen:
            eval_samples.append(s)
        else:
            train_samples.append(dataclasses.replace(s, label=None))
    return eval_samples, train_samples
