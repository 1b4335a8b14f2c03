"""Decode 6-channel predictions into classified, counted instances."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import NUM_CLASSES
from .errors import EmptyInstance, InvalidConfig, ShapeMismatch

_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class PostprocessConfig:
    seed_threshold: float = 0.5
    mask_threshold: float = 0.1
    min_cell_area: int = 10

    def __post_init__(self):
        if not 0.0 < self.mask_threshold < 1.0 or not 0.0 < self.seed_threshold < 1.0:
            raise InvalidConfig("thresholds must lie in (0, 1)")
        if self.mask_threshold >= self.seed_threshold:
            raise InvalidConfig(
                f"mask threshold {self.mask_threshold} must be below "
                f"seed threshold {self.seed_threshold}"
            )
        if int(self.min_cell_area) < 1:
            raise InvalidConfig("min_cell_area must be >= 1")


@dataclass
class SegmentationResult:
    instances: np.ndarray
    instance_classes: dict[int, int] = field(default_factory=dict)
    counts: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, np.int64))

    def to_json(self) -> dict:
        return {
            "height": int(self.instances.shape[0]),
            "width": int(self.instances.shape[1]),
            "instance_classes": {str(k): int(v) for k, v in sorted(self.instance_classes.items())},
            "counts": [int(c) for c in self.counts],
        }

    def save(self, raw_path, json_path) -> None:
        self.instances.astype("<u2").tofile(raw_path)
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, raw_path, json_path) -> "SegmentationResult":
        doc = json.loads(Path(json_path).read_text())
        shape = (doc["height"], doc["width"])
        inst = np.fromfile(raw_path, dtype="<u2")
        if inst.size != shape[0] * shape[1]:
            raise ShapeMismatch(f"{raw_path}: size does not match {shape}")
        classes = {int(k): int(v) for k, v in doc["instance_classes"].items()}
        return cls(inst.reshape(shape).astype(np.int32), classes,
                   np.asarray(doc["counts"], dtype=np.int64))


def decode_watershed(sum_pred: np.ndarray, cfg: PostprocessConfig = PostprocessConfig()) -> np.ndarray:
    """Seeded priority-flood watershed on the cell (channel-sum) prediction.

    Seeds are the 4-connected components above the seed threshold. Labels
    spread in order of decreasing map value (ties: lower row-major index
    first) to unlabeled 4-neighbours above the mask threshold. Regions
    smaller than ``min_cell_area`` are then erased and the rest renumbered
    1..K in order of their seed's first row-major pixel.
    """
    if cfg.mask_threshold >= cfg.seed_threshold:
        raise InvalidConfig("mask threshold must be below seed threshold")
    pred = np.asarray(sum_pred, dtype=np.float64)
    h, w = pred.shape
    mask = (pred > cfg.mask_threshold).ravel()
    seeds, n_seeds = ndimage.label(pred > cfg.seed_threshold, structure=_FOUR)
    if n_seeds == 0:
        return np.zeros((h, w), dtype=np.int32)

    labels = seeds.ravel().astype(np.int32)
    flat = pred.ravel()
    start = np.flatnonzero(labels)
    heap = [(-flat[i], int(i)) for i in start]
    heapq.heapify(heap)
    while heap:
        _, i = heapq.heappop(heap)
        lab = labels[i]
        r, c = divmod(i, w)
        for j, ok in ((i - w, r > 0), (i + w, r < h - 1), (i - 1, c > 0), (i + 1, c < w - 1)):
            if ok and mask[j] and labels[j] == 0:
                labels[j] = lab
                heapq.heappush(heap, (-flat[j], j))

    areas = np.bincount(labels, minlength=n_seeds + 1)
    keep = areas >= cfg.min_cell_area
    keep[0] = False
    # ndimage.label numbers components by first row-major pixel already.
    remap = np.zeros(n_seeds + 1, dtype=np.int32)
    remap[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    return remap[labels].reshape(h, w)


def classify_instances(instances: np.ndarray, class_pred: np.ndarray) -> dict[int, int]:
    """Class per instance: the channel with the largest in-cell sum (lowest index wins ties)."""
    inst = np.asarray(instances).astype(np.int64)
    class_pred = np.asarray(class_pred, dtype=np.float64)
    if class_pred.shape[1:] != inst.shape or class_pred.shape[0] != NUM_CLASSES:
        raise ShapeMismatch(f"class_pred {class_pred.shape} vs instances {inst.shape}")
    labels = np.unique(inst)
    labels = labels[labels > 0]
    if labels.size == 0:
        return {}
    n = int(labels.max()) + 1
    area = np.bincount(inst.ravel(), minlength=n)
    if (area[labels] == 0).any():
        raise EmptyInstance("instance with zero pixels")
    scores = np.stack(
        [np.bincount(inst.ravel(), weights=ch.ravel(), minlength=n) for ch in class_pred]
    )
    best = np.argmax(scores[:, labels], axis=0)
    return {int(l): int(b) + 1 for l, b in zip(labels, best)}


def postprocess(pred: np.ndarray, cfg: PostprocessConfig = PostprocessConfig()) -> SegmentationResult:
    pred = np.asarray(pred)
    if pred.ndim != 3 or pred.shape[0] != NUM_CLASSES:
        raise ShapeMismatch(f"expected ({NUM_CLASSES}, H, W) prediction, got {pred.shape}")
    instances = decode_watershed(pred.sum(axis=0, dtype=np.float64), cfg)
    classes = classify_instances(instances, pred)
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for c in classes.values():
        counts[c - 1] += 1
    return SegmentationResult(instances, classes, counts)


def dihedral(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Apply an element of the dihedral group to the last two axes."""
    if flip:
        x = x[..., ::-1]
    return np.rot90(x, k, axes=(-2, -1))


def dihedral_inverse(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    x = np.rot90(x, -k, axes=(-2, -1))
    if flip:
        x = x[..., ::-1]
    return x


DIHEDRAL_GROUP = tuple((k, flip) for flip in (False, True) for k in range(4))


def tta_predict(model, image: np.ndarray) -> np.ndarray:
    """Average of the model over the 8 dihedral transforms of ``image``.

    ``image`` is a normalized (3, H, W) array; ``model`` maps a
    (1, 3, H, W) batch to (1, 6, H, W). Each output is mapped back before
    averaging.
    """
    acc = None
    for k, flip in DIHEDRAL_GROUP:
        x = np.ascontiguousarray(dihedral(image, k, flip))[None]
        y = dihedral_inverse(model(x)[0], k, flip)
        acc = y.copy() if acc is None else acc + y
    return acc / len(DIHEDRAL_GROUP)
