"""Mirrored-twin expansion and image preparation / augmentation operators.

Images are float arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .types import DatasetManifest, ValidationError

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    return image


def mirror_expand(manifest: DatasetManifest) -> DatasetManifest:
    """Append a horizontally flipped twin of every case.

    Twins keep the source's group and labels and carry ``mirrored=True``.
    Feature-vector payloads are copied unchanged.
    """
    if any(c.mirrored for c in manifest.cases):
        raise ValidationError("manifest already contains mirrored cases")
    twins = []
    for case in manifest.cases:
        payload = case.payload
        if payload is not None:
            payload = payload[:, ::-1, :].copy() if payload.ndim == 3 else payload.copy()
        twins.append(replace(case, case_id=f"{case.case_id}_m", payload=payload,
                             mirrored=True))
    metadata = dict(manifest.metadata, mirrored=True)
    return DatasetManifest(list(manifest.cases) + twins, metadata)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Half-pixel-centre bilinear weights, (n_out, n_in).
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def prepare_image(image: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize to ``target_size`` x ``target_size``."""
    if int(target_size) != target_size or target_size <= 0:
        raise ValueError(f"target_size must be a positive integer, got {target_size!r}")
    image = _check_image(image)
    h, w, _ = image.shape
    if h == target_size and w == target_size:
        return image.copy()
    ry = _interp_matrix(h, target_size)
    rx = _interp_matrix(w, target_size)
    rows = np.tensordot(ry, image, axes=(1, 0))  # (T, W, 3)
    return np.einsum("jw,iwc->ijc", rx, rows, optimize=True)


def normalize_zscore(image: np.ndarray) -> np.ndarray:
    """Per-channel z-score with the ImageNet statistics."""
    image = np.asarray(image, dtype=np.float64)
    return (image - IMAGENET_MEAN) / IMAGENET_STD


def gaussian_kernel(sigma: float, size: int = 5) -> np.ndarray:
    """Normalised ``size`` x ``size`` Gaussian kernel."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float, size: int = 5) -> np.ndarray:
    image = _check_image(image)
    k = gaussian_kernel(sigma, size)
    return np.stack([ndimage.convolve(image[..., c], k, mode="reflect")
                     for c in range(3)], axis=-1)


def _grayscale(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114])


def _shift_hue(image: np.ndarray, shift: float) -> np.ndarray:
    from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv_to_rgb(hsv)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: float = 20.0
    vflip_p: float = 0.5
    blur_p: float = 0.5
    blur_kernel: int = 5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    color_p: float = 1.0
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation_degrees=0.0, vflip_p=0.0, blur_p=0.0, color_p=0.0)


def augment(image: np.ndarray, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random rotation (reflection padding), vertical flip, Gaussian blur and
    colour jitter. Draws come only from ``rng``; a disabled step consumes no
    randomness, so the identity configuration returns the input unchanged."""
    out = _check_image(image).copy()
    if config.rotation_degrees > 0:
        angle = rng.uniform(-config.rotation_degrees, config.rotation_degrees)
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
    if config.vflip_p > 0 and rng.random() < config.vflip_p:
        out = out[::-1, :, :].copy()
    if config.blur_p > 0 and rng.random() < config.blur_p:
        out = gaussian_blur(out, rng.uniform(*config.blur_sigma), config.blur_kernel)
    if config.color_p > 0 and rng.random() < config.color_p:
        if config.brightness > 0:
            out = out * rng.uniform(1 - config.brightness, 1 + config.brightness)
        if config.contrast > 0:
            f = rng.uniform(1 - config.contrast, 1 + config.contrast)
            out = f * out + (1 - f) * _grayscale(out).mean()
        if config.saturation > 0:
            f = rng.uniform(1 - config.saturation, 1 + config.saturation)
            out = f * out + (1 - f) * _grayscale(out)[..., None]
        if config.hue > 0:
            out = _shift_hue(out, rng.uniform(-config.hue, config.hue))
        out = np.clip(out, 0.0, 1.0)
    return out
