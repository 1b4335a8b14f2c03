"""Per-class, per-cell normalized distance maps and loss weight maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import NUM_CLASSES, LabeledPatch
from .errors import InvalidWeights


@dataclass(frozen=True, eq=False)
class DistanceTarget:
    """Regression target: ``channels`` is (6, H, W) float64 in [0, 1]."""

    channels: np.ndarray

    @property
    def sum(self) -> np.ndarray:
        return self.channels.sum(axis=0)


def instance_distance_map(instances: np.ndarray) -> np.ndarray:
    """Per-cell normalized distance to the nearest pixel outside each cell.

    For every instance the exact Euclidean distance from each of its pixels
    to the closest pixel center with a different label (background or
    another instance) is divided by its maximum over the instance, so every
    cell peaks at exactly 1. The image border is not treated as outside.
    """
    inst = np.asarray(instances)
    h, w = inst.shape
    out = np.zeros((h, w), dtype=np.float64)
    objects = ndimage.find_objects(inst.astype(np.int64))
    for idx, sl in enumerate(objects):
        if sl is None:
            continue
        label = idx + 1
        # Padding by the box extent + 1 guarantees the nearest outside pixel is
        # inside the crop whenever one exists in the image.
        pad = max(sl[0].stop - sl[0].start, sl[1].stop - sl[1].start) + 1
        r0, r1 = max(sl[0].start - pad, 0), min(sl[0].stop + pad, h)
        c0, c1 = max(sl[1].start - pad, 0), min(sl[1].stop + pad, w)
        cell = inst[r0:r1, c0:c1] == label
        if cell.all():
            # No pixel outside the cell at all: flat map.
            dist = cell.astype(np.float64)
        else:
            dist = ndimage.distance_transform_edt(cell)
        peak = dist.max()
        region = out[r0:r1, c0:c1]
        region[cell] = dist[cell] / peak
    return out


def encode_distance_maps(patch: LabeledPatch) -> DistanceTarget:
    dm = instance_distance_map(patch.instances)
    channels = np.zeros((NUM_CLASSES,) + dm.shape, dtype=np.float64)
    for c in range(1, NUM_CLASSES + 1):
        sel = patch.classes == c
        channels[c - 1][sel] = dm[sel]
    return DistanceTarget(channels)


def compute_weight_map(
    patch: LabeledPatch, w_bg: float = 1.0, w_fg: float = 10.0
) -> np.ndarray:
    """Two-level pixel weights: ``w_fg`` on nuclei, ``w_bg`` elsewhere."""
    if w_bg < 1.0 or w_fg < w_bg:
        raise InvalidWeights(f"need w_fg >= w_bg >= 1, got w_bg={w_bg}, w_fg={w_fg}")
    return np.where(patch.instances > 0, float(w_fg), float(w_bg))
