"""Multi-domain mixed sampling.

For each source domain, half of the semantic classes present in the
source crop are selected at random; their pixels (image and label) are
pasted onto a target crop whose labels are the model's pseudo-labels.
One target image therefore yields K augmented samples, one per source
domain, which the trainer consumes as meta-test data.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from . import tensor as T
from .data import IGNORE_ID, DomainSample


class MixError(ValueError):
    pass


@dataclasses.dataclass
class PseudoLabel:
    ids: np.ndarray          # H x W uint8, never contains the ignore id
    confidence: np.ndarray   # H x W float, per-pixel max softmax probability


@dataclasses.dataclass
class AugmentedSample:
    image: np.ndarray        # H x W x 3
    label: np.ndarray        # H x W uint8 (source labels where mask=1, pseudo elsewhere)
    mask: np.ndarray         # H x W uint8 paste mask
    source_domain: str


@dataclasses.dataclass
class AugmentedBatch:
    target_id: str
    samples: list

    def __len__(self):
        return len(self.samples)


def generate_pseudo_label(model, target_image: np.ndarray) -> PseudoLabel:
    """Argmax prediction and max-softmax confidence; no gradients recorded.

    Argmax ties break toward the lowest class id.
    """
    with T.no_grad():
        logits = model.forward(target_image[None], mode="batch")
    probs = T.softmax(logits, axis=1).data[0]
    if probs.shape[0] != model.num_classes:
        raise MixError(f"model produced {probs.shape[0]} channels, "
                       f"expected {model.num_classes}")
    ids = probs.argmax(axis=0).astype(np.uint8)
    confidence = probs.max(axis=0)
    return PseudoLabel(ids=ids, confidence=confidence)


def apply_confidence_threshold(pseudo: PseudoLabel, threshold: float) -> np.ndarray:
    """Optional: mask low-confidence pseudo pixels to the ignore id."""
    out = pseudo.ids.astype(np.uint8).copy()
    out[pseudo.confidence < threshold] = IGNORE_ID
    return out


def select_classes(source_label: np.ndarray, rng: np.random.Generator) -> set:
    """Uniform sample of ceil(n/2) of the non-ignore classes present."""
    present = np.unique(source_label)
    present = present[present != IGNORE_ID]
    if present.size == 0:
        raise MixError("no mixable classes: source label is all-ignore")
    k = math.ceil(present.size / 2)
    chosen = rng.choice(present, size=k, replace=False)
    return set(int(c) for c in chosen)


def build_mix_mask(source_label: np.ndarray, selected: set) -> np.ndarray:
    """mask[p] = 1 iff the source label at p is a selected, non-ignore class."""
    mask = np.isin(source_label, sorted(selected)) & (source_label != IGNORE_ID)
    return mask.astype(np.uint8)


def mix_pair(source: DomainSample, target_image: np.ndarray,
             pseudo_ids: np.ndarray, mask: np.ndarray,
             source_domain: str = "") -> AugmentedSample:
    """Per-pixel select: source pixels where mask=1, target pixels elsewhere."""
    if source.label is None:
        raise MixError(f"source sample {source.id} has no label")
    if not (source.image.shape == target_image.shape
            and mask.shape == source.image.shape[:2]
            and pseudo_ids.shape == mask.shape):
        raise MixError(
            f"mix_pair shape mismatch: source {source.image.shape}, "
            f"target {target_image.shape}, mask {mask.shape}")
    m = mask.astype(bool)
    image = np.where(m[:, :, None], source.image, target_image)
    label = np.where(m, source.label, pseudo_ids).astype(np.uint8)
    return AugmentedSample(image=image.astype(np.float32), label=label,
                           mask=mask.astype(np.uint8),
                           source_domain=source_domain or source.id)


def build_augmented_batch(sources, target_image: np.ndarray, model,
                          rng: np.random.Generator, target_id: str = "target",
                          confidence_threshold: Optional[float] = None,
                          ) -> AugmentedBatch:
    """One augmented sample per source domain, sharing one pseudo-labeling.

    ``sources`` is a list of (domain_name, DomainSample) pairs, all
    pre-cropped to the target image's size.
    """
    pseudo = generate_pseudo_label(model, target_image)
    if confidence_threshold is not None:
        pseudo_ids = apply_confidence_threshold(pseudo, confidence_threshold)
    else:
        pseudo_ids = pseudo.ids
    samples = []
    for name, src in sources:
        selected = select_classes(src.label, rng)
        mask = build_mix_mask(src.label, selected)
        samples.append(mix_pair(src, target_image, pseudo_ids, mask,
                                source_domain=name))
    return AugmentedBatch(target_id=target_id, samples=samples)
