"""Ground-truth data model, on-disk container and a synthetic patch generator.

A dataset directory holds ``manifest.json`` plus three files per patch::

    img_00000.ppm    binary P6, 8-bit RGB
    inst_00000.raw   row-major little-endian uint16 instance labels
    cls_00000.raw    row-major uint8 class labels (0 = background)
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionMismatch,
    DimensionTooSmall,
    HeterogeneousDimensions,
    InconsistentLabels,
    InvalidWeights,
    IoFailure,
    MissingFile,
    ValidationError,
)

CLASS_NAMES = (
    "neutrophil",
    "epithelial",
    "lymphocyte",
    "plasma",
    "eosinophil",
    "connective",
)
NUM_CLASSES = len(CLASS_NAMES)
MANIFEST_NAME = "manifest.json"

# A CountVector is a length-6 int64 array indexed by class channel.
CountVector = np.ndarray


@dataclass(frozen=True, eq=False)
class LabeledPatch:
    """RGB image with its instance map and class map.

    Arrays are stored as ``uint8`` image (H, W, 3), ``uint16``-range
    instances (H, W) and ``uint8`` classes (H, W). Construction validates all
    invariants unless ``validate=False`` is passed.
    """

    image: np.ndarray
    instances: np.ndarray
    classes: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "image", np.asarray(self.image))
        object.__setattr__(self, "instances", np.asarray(self.instances))
        object.__setattr__(self, "classes", np.asarray(self.classes))
        if self.validate:
            validate_patch(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.instances.shape

    def labels(self) -> np.ndarray:
        """Sorted positive instance labels present in the patch."""
        labels = np.unique(self.instances)
        return labels[labels > 0]

    def instance_classes(self) -> dict[int, int]:
        """Map instance label -> class (1..6)."""
        fg = self.instances > 0
        inst = self.instances[fg].astype(np.int64)
        cls = self.classes[fg].astype(np.int64)
        labels, first = np.unique(inst, return_index=True)
        return {int(l): int(cls[i]) for l, i in zip(labels, first)}


def validate_patch(patch: LabeledPatch) -> None:
    image, inst, cls = patch.image, patch.instances, patch.classes
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"image must be H x W x 3, got {image.shape}")
    if inst.ndim != 2 or cls.ndim != 2:
        raise DimensionMismatch("instances and classes must be 2-D")
    if image.shape[:2] != inst.shape or inst.shape != cls.shape:
        raise DimensionMismatch(
            f"shape disagreement: image {image.shape[:2]}, "
            f"instances {inst.shape}, classes {cls.shape}"
        )
    if not np.issubdtype(image.dtype, np.integer) or image.size and (
        image.min() < 0 or image.max() > 255
    ):
        raise ValidationError("image must hold integers in [0, 255]")
    if not np.issubdtype(inst.dtype, np.integer) or inst.size and (
        inst.min() < 0 or inst.max() > 65535
    ):
        raise ValidationError("instance labels must be integers in [0, 65535]")
    if not np.issubdtype(cls.dtype, np.integer) or cls.size and (
        cls.min() < 0 or cls.max() > NUM_CLASSES
    ):
        raise ValidationError(f"class labels must be integers in [0, {NUM_CLASSES}]")

    fg = inst > 0
    if not np.array_equal(fg, cls > 0):
        bad = inst[fg & (cls == 0)]
        label = int(bad.min()) if bad.size else None
        raise InconsistentLabels(
            label, "instance and class maps disagree on foreground pixels"
        )
    pairs = np.unique(inst[fg].astype(np.int64) * 16 + cls[fg].astype(np.int64))
    owners = pairs // 16
    dup = owners[1:][owners[1:] == owners[:-1]]
    if dup.size:
        raise InconsistentLabels(int(dup.min()))


def count_ground_truth(patch: LabeledPatch) -> CountVector:
    """Number of distinct instances per class channel."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for c in patch.instance_classes().values():
        counts[c - 1] += 1
    return counts


# ---------------------------------------------------------------------------
# On-disk container


@dataclass
class DatasetManifest:
    patch_count: int
    height: int
    width: int
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    entries: list[dict[str, str]] = field(default_factory=list)
    seed: int | None = None

    def to_json(self) -> str:
        doc = {
            "patch_count": self.patch_count,
            "height": self.height,
            "width": self.width,
            "class_names": list(self.class_names),
            "entries": self.entries,
            "seed": self.seed,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        try:
            manifest = cls(
                patch_count=int(doc["patch_count"]),
                height=int(doc["height"]),
                width=int(doc["width"]),
                class_names=list(doc.get("class_names", CLASS_NAMES)),
                entries=list(doc["entries"]),
                seed=doc.get("seed"),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed manifest: {exc}") from exc
        if len(manifest.entries) != manifest.patch_count:
            raise ValidationError("manifest entries length != patch_count")
        if manifest.patch_count and (manifest.height <= 0 or manifest.width <= 0):
            raise ValidationError("manifest height and width must be positive")
        return manifest


def _entry_names(i: int) -> dict[str, str]:
    return {
        "image": f"img_{i:05}.ppm",
        "instances": f"inst_{i:05}.raw",
        "classes": f"cls_{i:05}.raw",
    }


def write_ppm(path: Path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # Header: magic, width, height, maxval separated by whitespace (comments allowed).
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"truncated PPM header in {path}")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValidationError(f"{path} is not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if pixels.size != h * w * 3:
        raise DimensionMismatch(f"{path}: expected {h * w * 3} bytes, got {pixels.size}")
    return pixels.reshape(h, w, 3).copy()


def _read_raw(path: Path, dtype: str, shape: tuple[int, int]) -> np.ndarray:
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != shape[0] * shape[1]:
        raise DimensionMismatch(
            f"{path}: expected {shape[0] * shape[1]} values, got {arr.size}"
        )
    return arr.reshape(shape)


def save_dataset(
    patches: Sequence[LabeledPatch], path: str | os.PathLike, seed: int | None = None
) -> None:
    """Write ``patches`` in the bit-exact directory layout."""
    shapes = {p.shape for p in patches}
    if len(shapes) > 1:
        raise HeterogeneousDimensions(f"patches have differing shapes: {sorted(shapes)}")
    height, width = shapes.pop() if shapes else (0, 0)
    if any(int(p.instances.max(initial=0)) > 65535 for p in patches):
        raise ValidationError("instance labels exceed the uint16 range")
    root = Path(path)
    entries = [_entry_names(i) for i in range(len(patches))]
    manifest = DatasetManifest(len(patches), height, width, entries=entries, seed=seed)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for patch, names in zip(patches, entries):
            write_ppm(root / names["image"], patch.image)
            patch.instances.astype("<u2").tofile(root / names["instances"])
            patch.classes.astype("u1").tofile(root / names["classes"])
        (root / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {root}: {exc}") from exc


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    mpath = Path(path) / MANIFEST_NAME
    if not mpath.is_file():
        raise MissingFile(f"no manifest at {mpath}")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{mpath} is not valid JSON: {exc}") from exc
    return DatasetManifest.from_dict(doc)


def load_dataset(path: str | os.PathLike) -> list[LabeledPatch]:
    """Load a dataset directory, validating every patch, in manifest order."""
    root = Path(path)
    manifest = load_manifest(root)
    shape = (manifest.height, manifest.width)
    patches = []
    for entry in manifest.entries:
        files = {k: root / entry[k] for k in ("image", "instances", "classes")}
        for f in files.values():
            if not f.is_file():
                raise MissingFile(f"missing dataset file {f}")
        image = read_ppm(files["image"])
        if image.shape[:2] != shape:
            raise DimensionMismatch(
                f"{files['image']}: image is {image.shape[:2]}, manifest says {shape}"
            )
        inst = _read_raw(files["instances"], "<u2", shape).astype(np.uint16)
        cls = _read_raw(files["classes"], "u1", shape)
        patches.append(LabeledPatch(image, inst, cls))
    return patches


# ---------------------------------------------------------------------------
# Synthetic generator

# Nucleus colours: one hue offset per class around a dark blue-purple.
_NUCLEUS_HSV = (0.72, 0.62, 0.58)
_CLASS_HUE_OFFSETS = (-0.12, -0.04, 0.03, 0.10, 0.18, -0.20)
_CLASS_VALUE_OFFSETS = (0.06, 0.0, -0.18, 0.04, 0.12, 0.16)
_BACKGROUND_RGB = (236.0, 204.0, 222.0)


def class_colour(c: int) -> np.ndarray:
    h, s, v = _NUCLEUS_HSV
    r, g, b = colorsys.hsv_to_rgb(
        (h + _CLASS_HUE_OFFSETS[c - 1]) % 1.0, s, v + _CLASS_VALUE_OFFSETS[c - 1]
    )
    return np.array([r, g, b]) * 255.0


@dataclass(frozen=True)
class NucleusRecord:
    label: int
    cls: int
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float
    area: int


def _ellipse_mask(shape, center, axes, angle):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - center[0]
    dx = xx - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dx * ca + dy * sa) / (axes[0] / 2.0)
    v = (-dx * sa + dy * ca) / (axes[1] / 2.0)
    return u * u + v * v <= 1.0


_FOUR = ndimage.generate_binary_structure(2, 1)
_EIGHT = ndimage.generate_binary_structure(2, 2)


def _single_seed(mask: np.ndarray, level: float = 0.5) -> bool:
    """True if the cell's normalized distance map has one 4-connected
    region above ``level`` and its peak distance is at least 2 px."""
    from .encode import instance_distance_map

    dm = instance_distance_map(mask.astype(np.int32))
    peak = 0.0 if mask.all() else ndimage.distance_transform_edt(mask).max()
    return peak >= 2.0 and ndimage.label(dm > level, structure=_FOUR)[1] == 1


def synthesize_patch(
    rng: np.random.Generator,
    height: int,
    width: int,
    n_target: int,
    class_p: np.ndarray,
    touching: bool = False,
    min_area: int = 16,
    max_aspect: float = 2.0,
    max_attempts_per_nucleus: int = 60,
) -> tuple[LabeledPatch, list[NucleusRecord]]:
    """Render one patch from ``rng`` and return it with its placement records."""
    inst = np.zeros((height, width), dtype=np.uint16)
    cls = np.zeros((height, width), dtype=np.uint8)
    records: list[NucleusRecord] = []
    attempts = 0
    while len(records) < n_target and attempts < n_target * max_attempts_per_nucleus:
        attempts += 1
        major = float(rng.uniform(3.0, 12.0))
        minor = float(rng.uniform(max(3.0, major / max_aspect), major))
        axes = (major, minor)
        angle = float(rng.uniform(0.0, np.pi))
        center = (float(rng.uniform(0, height)), float(rng.uniform(0, width)))
        c = int(rng.choice(NUM_CLASSES, p=class_p)) + 1
        mask = _ellipse_mask((height, width), center, axes, angle)
        full_area = int(mask.sum())
        if full_area < min_area:
            continue
        occupied = inst > 0
        # Without ``touching`` a one-pixel background gap is enforced; with it
        # nuclei may share an edge but never overlap.
        halo = mask if touching else ndimage.binary_dilation(mask, structure=_EIGHT)
        if (halo & occupied).any():
            continue
        area = full_area
        if not _single_seed(mask):
            continue
        label = len(records) + 1
        inst[mask] = label
        cls[mask] = c
        records.append(NucleusRecord(label, c, center, axes, angle, area))

    image = np.empty((height, width, 3), dtype=np.float64)
    image[:] = _BACKGROUND_RGB
    image += rng.normal(0.0, 6.0, size=(height, width, 1)) * np.array([0.6, 1.0, 0.8])
    for c in range(1, NUM_CLASSES + 1):
        image[cls == c] = class_colour(c)
    image += rng.normal(0.0, 5.0, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return LabeledPatch(image, inst, cls), records


def _class_probabilities(class_weights) -> np.ndarray:
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (NUM_CLASSES,) or not np.all(np.isfinite(w)) or (w < 0).any():
        raise InvalidWeights(f"class_weights must be {NUM_CLASSES} non-negative floats")
    if w.sum() <= 0:
        raise InvalidWeights("class_weights must not all be zero")
    return w / w.sum()


def generate_synthetic_with_records(
    seed: int,
    n_patches: int,
    height: int = 64,
    width: int = 64,
    density: float = 0.5,
    class_weights=(1, 1, 1, 1, 1, 1),
    touching: bool = False,
    min_area: int = 16,
) -> tuple[list[LabeledPatch], list[list[NucleusRecord]]]:
    if height < 32 or width < 32:
        raise DimensionTooSmall(f"patches must be at least 32x32, got {height}x{width}")
    if not 0.0 <= density <= 1.0:
        raise ValidationError("density must lie in [0, 1]")
    class_p = _class_probabilities(class_weights)
    # Capacity: about one nucleus per 100 px at density 1.
    n_target = int(round(density * height * width / 100.0))
    patches, records = [], []
    for i in range(n_patches):
        rng = np.random.default_rng([seed, i])
        patch, recs = synthesize_patch(
            rng, height, width, n_target, class_p, touching=touching, min_area=min_area
        )
        patches.append(patch)
        records.append(recs)
    return patches, records


def generate_synthetic(
    seed: int,
    n_patches: int,
    height: int = 64,
    width: int = 64,
    density: float = 0.5,
    class_weights=(1, 1, 1, 1, 1, 1),
    touching: bool = False,
    min_area: int = 16,
) -> list[LabeledPatch]:
    """Seeded H&E-like patches with elliptical nuclei.

    Nuclei are filled ellipses with axis lengths drawn from [3, 12] px. By
    default they are separated by at least one background pixel; with
    ``touching=True`` nuclei may share an edge but never overlap. Each nucleus
    is also required to have a single ridge region (one 4-connected area
    above half its peak distance). Nuclei whose in-patch area is below ``min_area`` are
    rejected (default 16 px, above the default decoding size threshold of 10).
    ``density`` scales the number of placement targets; 0 yields empty
    patches. Patch ``i`` depends only on ``(seed, i)``.
    """
    patches, _ = generate_synthetic_with_records(
        seed, n_patches, height, width, density, class_weights, touching, min_area
    )
    return patches
