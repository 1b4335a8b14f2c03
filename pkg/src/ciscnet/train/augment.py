"""Seeded geometric and photometric augmentation of labeled patches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..data import LabeledPatch

# RGB <-> YIQ; a hue shift is a rotation of the chroma (I, Q) plane.
_RGB2YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.595716, -0.274453, -0.321263], [0.211456, -0.522591, 0.311135]]
)
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    p_flip_rot: float = 0.5
    p_color: float = 0.3
    p_scale: float = 0.3
    p_blur: float = 0.2
    p_noise: float = 0.2
    scale_range: tuple[float, float] = (0.8, 1.25)
    hue_shift: float = 0.03  # max rotation of the chroma plane, in turns
    saturation_range: tuple[float, float] = (0.8, 1.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    blur_sigma: tuple[float, float] = (0.3, 1.5)
    noise_sigma: tuple[float, float] = (0.0, 10.0)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_flip_rot=0.0, p_color=0.0, p_scale=0.0, p_blur=0.0, p_noise=0.0)

    @property
    def geometric_enabled(self) -> bool:
        return self.p_flip_rot > 0 or self.p_scale > 0


def flip_rotate(arrays, k: int, flip: bool):
    """Apply the same dihedral transform to the first two axes of each array."""
    out = []
    for a in arrays:
        if flip:
            a = a[:, ::-1]
        out.append(np.ascontiguousarray(np.rot90(a, k, axes=(0, 1))))
    return out


def scale_patch(patch: LabeledPatch, factor: float) -> LabeledPatch:
    """Zoom about the patch center, keeping H x W (crop or zero-label pad).

    Labels use nearest-neighbour sampling, the image bilinear sampling with
    the median colour as fill. Instances that fall outside disappear.
    """
    h, w = patch.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    matrix = np.eye(2) / factor
    offset = center - matrix @ center
    inst = ndimage.affine_transform(
        patch.instances.astype(np.int32), matrix, offset, order=0, mode="constant", cval=0
    )
    cls = ndimage.affine_transform(
        patch.classes.astype(np.int32), matrix, offset, order=0, mode="constant", cval=0
    )
    fill = np.median(patch.image.reshape(-1, 3), axis=0)
    img = np.stack(
        [
            ndimage.affine_transform(
                patch.image[..., ch].astype(np.float64), matrix, offset,
                order=1, mode="constant", cval=float(fill[ch]),
            )
            for ch in range(3)
        ],
        axis=-1,
    )
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return LabeledPatch(img, inst.astype(patch.instances.dtype), cls.astype(patch.classes.dtype))


def geometric_augment(patch: LabeledPatch, rng: np.random.Generator, cfg: AugmentConfig) -> LabeledPatch:
    # Every draw happens regardless of the outcome so streams stay aligned.
    do_flip = rng.uniform() < cfg.p_flip_rot
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    do_scale = rng.uniform() < cfg.p_scale
    factor = float(rng.uniform(*cfg.scale_range))
    if do_flip:
        image, inst, cls = flip_rotate([patch.image, patch.instances, patch.classes], k, flip)
        patch = LabeledPatch(image, inst, cls, validate=False)
    if do_scale:
        patch = scale_patch(patch, factor)
    return patch


def photometric_augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Colour jitter, blur and noise on an (H, W, 3) image in [0, 255]."""
    do_color = rng.uniform() < cfg.p_color
    hue = rng.uniform(-cfg.hue_shift, cfg.hue_shift)
    sat = rng.uniform(*cfg.saturation_range)
    con = rng.uniform(*cfg.contrast_range)
    do_blur = rng.uniform() < cfg.p_blur
    sigma = rng.uniform(*cfg.blur_sigma)
    do_noise = rng.uniform() < cfg.p_noise
    noise_sigma = rng.uniform(*cfg.noise_sigma)

    img = image.astype(np.float64)
    if do_color:
        yiq = img @ _RGB2YIQ.T
        theta = 2.0 * np.pi * hue
        c, s = np.cos(theta), np.sin(theta)
        i, q = yiq[..., 1].copy(), yiq[..., 2].copy()
        yiq[..., 1] = c * i - s * q
        yiq[..., 2] = s * i + c * q
        img = yiq @ _YIQ2RGB.T
        gray = (img @ _LUMA)[..., None]
        img = gray + sat * (img - gray)
        img = img.mean() + con * (img - img.mean())
    if do_blur:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))
    if do_noise:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 255.0)


def augment(patch: LabeledPatch, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> LabeledPatch:
    """Geometric transforms on image and labels, then photometric on the image."""
    patch = geometric_augment(patch, rng, cfg)
    image = photometric_augment(patch.image, rng, cfg)
    if not np.array_equal(image, patch.image):
        image = np.rint(image).astype(np.uint8)
        return LabeledPatch(image, patch.instances, patch.classes, validate=False)
    return patch
