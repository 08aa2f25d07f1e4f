"""Image-space augmentations and patch masking for the teaching loop.

Images are float32 CHW arrays in [0, 1].  The weak view only flips; the
strong view adds a photometric chain.  Every draw comes from the caller's
numpy generator so runs replay bitwise.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

GRAY_COEFFS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugRecord:
    """Everything needed to replay one augmentation draw.

    flip is the only geometric component; gains/offsets are per channel,
    blur_sigma 0 means no blur.
    """

    flip: bool = False
    gains: tuple = (1.0, 1.0, 1.0)
    offsets: tuple = (0.0, 0.0, 0.0)
    grayscale: bool = False
    blur_sigma: float = 0.0

    @classmethod
    def identity(cls):
        return cls()


def flip_image(image):
    """Mirror a CHW image across the vertical center line."""
    return np.ascontiguousarray(image[:, :, ::-1])


def apply_photometric(image, record: AugRecord):
    """Apply the photometric part of a record (no flip), clamped to [0, 1]."""
    out = image.astype(np.float32, copy=True)
    gains = np.asarray(record.gains, dtype=np.float32).reshape(-1, 1, 1)
    offsets = np.asarray(record.offsets, dtype=np.float32).reshape(-1, 1, 1)
    out = out * gains + offsets
    if record.grayscale:
        luma = np.tensordot(GRAY_COEFFS, out, axes=([0], [0]))
        out = np.repeat(luma[None, :, :], out.shape[0], axis=0)
    if record.blur_sigma > 0:
        # reflect padding, 4 sigma truncation; deterministic separable filter
        out = ndimage.gaussian_filter(
            out, sigma=(0.0, record.blur_sigma, record.blur_sigma), mode="reflect"
        )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_record(image, record: AugRecord):
    """Replay a full record: flip first, then photometric ops."""
    out = flip_image(image) if record.flip else image.astype(np.float32, copy=True)
    return apply_photometric(out, record)


def weak_augment(image, rng):
    """Horizontal flip with probability 0.5; nothing else."""
    rng = np.random.default_rng(rng)
    record = AugRecord(flip=bool(rng.random() < 0.5))
    return apply_record(image, record), record


def strong_augment(image, rng):
    """Flip (p 0.5) plus per-channel gain/offset jitter within 20 percent,
    grayscale (p 0.2) and gaussian blur with sigma in [0.1, 1.0] (p 0.5)."""
    rng = np.random.default_rng(rng)
    flip = bool(rng.random() < 0.5)
    gains = tuple(rng.uniform(0.8, 1.2, size=3).tolist())
    offsets = tuple(rng.uniform(-0.2, 0.2, size=3).tolist())
    grayscale = bool(rng.random() < 0.2)
    blur = float(rng.uniform(0.1, 1.0)) if rng.random() < 0.5 else 0.0
    record = AugRecord(
        flip=flip, gains=gains, offsets=offsets, grayscale=grayscale, blur_sigma=blur
    )
    return apply_record(image, record), record


@dataclass(frozen=True)
class PatchMask:
    """Boolean keep-grid over square patches; True patches survive."""

    keep: np.ndarray
    patch_size: int

    @property
    def drop_fraction(self):
        return 1.0 - float(self.keep.mean())


def make_patch_mask(height, width, patch_size, drop_ratio, rng):
    """Drop each patch independently with probability drop_ratio."""
    if not 0 <= drop_ratio <= 1:
        raise ValueError("drop_ratio must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    gh = -(-height // patch_size)
    gw = -(-width // patch_size)
    keep = rng.random((gh, gw)) >= drop_ratio
    return PatchMask(keep=keep, patch_size=patch_size)


def apply_mask(image, mask: PatchMask):
    """Zero out dropped patches of a CHW image."""
    c, h, w = image.shape
    dense = np.kron(mask.keep, np.ones((mask.patch_size, mask.patch_size), dtype=bool))
    dense = dense[:h, :w]
    return (image * dense[None, :, :]).astype(np.float32)
