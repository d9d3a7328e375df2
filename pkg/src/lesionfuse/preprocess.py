"""Image normalization: color constancy, training augmentation, standardization.

Images are float arrays of shape (H, W, 3) with values in [0, 1] throughout
this module.  Color constancy is meant to run once, offline, over a whole
dataset (see the ``preprocess`` CLI subcommand); augmentation runs per
sample at training time with an explicit RNG so data-loading workers stay
reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ColorConstancyConfig:
    """Shades-of-gray settings.

    ``p`` is the Minkowski norm order; ``"infinity"`` selects the
    white-patch (max) estimator.  ``on_zero_channel`` controls what happens
    when a channel is entirely zero and the illuminant estimate degenerates.
    """

    p: float | str = 6.0
    output_gamma: float | None = None
    on_zero_channel: str = "identity"

    def __post_init__(self) -> None:
        if self.p != "infinity" and not (isinstance(self.p, (int, float)) and self.p >= 1):
            raise ValueError("norm order p must be >= 1 or 'infinity'")
        if self.on_zero_channel not in ("identity", "error"):
            raise ValueError("on_zero_channel must be 'identity' or 'error'")
        if self.output_gamma is not None and self.output_gamma <= 0:
            raise ValueError("output_gamma must be positive")


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    return image


def shades_of_gray(
    image: np.ndarray, config: ColorConstancyConfig = ColorConstancyConfig()
) -> np.ndarray:
    """Remove a global color cast by rebalancing channels.

    The illuminant of channel c is estimated as the Minkowski mean
    e_c = (mean(v^p))^(1/p) (the max for p = "infinity"); each channel is
    then scaled by mean(e) / e_c so the estimated illuminant becomes
    achromatic.  Output is clipped to [0, 1].
    """
    image = _check_image(image)
    if config.p == "infinity":
        illuminant = image.max(axis=(0, 1))
    else:
        illuminant = np.power(
            np.power(image, config.p).mean(axis=(0, 1)), 1.0 / config.p
        )
    if np.any(illuminant == 0.0):
        if config.on_zero_channel == "error":
            raise ValueError("cannot balance an image with an all-zero channel")
        logger.warning("all-zero channel; color constancy left image unchanged")
        out = image.copy()
    else:
        out = np.clip(image * (illuminant.mean() / illuminant), 0.0, 1.0)
    if config.output_gamma is not None:
        out = np.power(out, 1.0 / config.output_gamma)
    return out


@dataclass(frozen=True)
class AugmentPolicy:
    """Per-transform jitter magnitudes with individual enable switches.

    Transforms are applied in a fixed order: color jitter (brightness,
    contrast, saturation, hue), geometric (flips, then one combined
    rotation/translation/scale/shear warp), additive Gaussian noise, blur.
    """

    brightness: float = 0.25
    contrast: float = 0.25
    saturation: float = 0.25
    hue: float = 0.05
    rotation_deg: float = 90.0
    translate_frac: float = 0.10
    scale_range: tuple[float, float] = (0.8, 1.2)
    shear_deg: float = 10.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    gaussian_noise_std: float = 0.01
    blur_radius_range: tuple[float, float] = (0.0, 1.5)

    enable_brightness: bool = True
    enable_contrast: bool = True
    enable_saturation: bool = True
    enable_hue: bool = True
    enable_rotation: bool = True
    enable_translation: bool = True
    enable_scale: bool = True
    enable_shear: bool = True
    enable_hflip: bool = True
    enable_vflip: bool = True
    enable_noise: bool = True
    enable_blur: bool = True

    def __post_init__(self) -> None:
        for name in ("brightness", "contrast", "saturation", "hue", "rotation_deg",
                     "translate_frac", "shear_deg", "gaussian_noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("scale_range", "blur_radius_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not well-ordered")
        for name in ("hflip_prob", "vflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(**{f: False for f in cls.__dataclass_fields__ if f.startswith("enable_")})

    @property
    def any_enabled(self) -> bool:
        return any(
            getattr(self, f) for f in self.__dataclass_fields__ if f.startswith("enable_")
        )


def _adjust_colors(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    if policy.enable_brightness:
        factor = rng.uniform(1 - policy.brightness, 1 + policy.brightness)
        image = np.clip(image * factor, 0.0, 1.0)
    if policy.enable_contrast:
        factor = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        anchor = float((image * _LUMA).sum(axis=2).mean())
        image = np.clip(anchor + (image - anchor) * factor, 0.0, 1.0)
    if policy.enable_saturation:
        factor = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
        gray = (image * _LUMA).sum(axis=2, keepdims=True)
        image = np.clip(gray + (image - gray) * factor, 0.0, 1.0)
    if policy.enable_hue:
        shift = rng.uniform(-policy.hue, policy.hue)
        hsv = rgb_to_hsv(image)
        hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
        image = hsv_to_rgb(hsv)
    return image


def _affine_warp(
    image: np.ndarray,
    angle_deg: float,
    shear_deg: float,
    scale: float,
    translate: tuple[float, float],
    order: int = 1,
) -> np.ndarray:
    """Rotate/shear/scale about the image center, then translate (dy, dx) pixels."""
    theta = np.deg2rad(angle_deg)
    phi = np.deg2rad(shear_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear = np.array([[1.0, np.tan(phi)], [0.0, 1.0]])
    fwd_xy = rot @ shear * scale
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    fwd = swap @ fwd_xy @ swap  # act on (y, x) coordinates
    inv = np.linalg.inv(fwd)
    center = (np.array(image.shape[:2], dtype=np.float64) - 1.0) / 2.0
    offset = center - inv @ (center + np.asarray(translate))
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.affine_transform(
            image[..., c], inv, offset=offset, order=order, mode="constant", cval=0.0
        )
    return out


def augment(
    image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator | int
) -> np.ndarray:
    """Apply one random draw of every enabled transform.

    Deterministic given an identical RNG state; with everything disabled
    the input is returned unchanged (same array values, new array).
    Output stays within [0, 1].
    """
    image = _check_image(image)
    if not policy.any_enabled:
        return image.copy()
    rng = np.random.default_rng(rng) if isinstance(rng, int) else rng

    image = _adjust_colors(image, policy, rng)

    if policy.enable_hflip and rng.uniform() < policy.hflip_prob:
        image = image[:, ::-1]
    if policy.enable_vflip and rng.uniform() < policy.vflip_prob:
        image = image[::-1]

    angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg) if policy.enable_rotation else 0.0
    if policy.enable_translation:
        h, w = image.shape[:2]
        dy, dx = rng.uniform(-policy.translate_frac, policy.translate_frac, size=2) * (h, w)
    else:
        dy = dx = 0.0
    scale = rng.uniform(*policy.scale_range) if policy.enable_scale else 1.0
    shear = rng.uniform(-policy.shear_deg, policy.shear_deg) if policy.enable_shear else 0.0
    if angle or dy or dx or shear or scale != 1.0:
        image = _affine_warp(np.ascontiguousarray(image), angle, shear, scale, (dy, dx))

    if policy.enable_noise:
        image = image + rng.normal(0.0, policy.gaussian_noise_std, size=image.shape)
    if policy.enable_blur:
        radius = rng.uniform(*policy.blur_radius_range)
        if radius > 1e-8:
            image = ndimage.gaussian_filter(image, sigma=(radius, radius, 0.0))
    return np.clip(image, 0.0, 1.0)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel sample centers and edge clamping."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output size must be positive")
    in_h, in_w = image.shape[:2]
    if in_h == 0 or in_w == 0:
        raise ValueError("cannot resize a zero-area image")
    ys = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    img = image if image.ndim == 3 else image[..., None]
    out = (
        img[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + img[np.ix_(y0, x1)] * (1 - wy) * wx
        + img[np.ix_(y1, x0)] * wy * (1 - wx)
        + img[np.ix_(y1, x1)] * wy * wx
    )
    return out if image.ndim == 3 else out[..., 0]


def standardize(
    image: np.ndarray,
    side: int,
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
) -> np.ndarray:
    """Resize to side x side and normalize each channel to (v - mean) / std."""
    image = _check_image(image)
    if side <= 0:
        raise ValueError("side must be positive")
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std components must be positive")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("cannot standardize a zero-area image")
    resized = resize_bilinear(image, side, side)
    return (resized - np.asarray(mean, dtype=np.float64)) / std


def load_image(path) -> np.ndarray:
    """Read a raster image (PNG, JPEG, ...) as float RGB in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def save_image(image: np.ndarray, path) -> Path:
    """Write a [0, 1] float image as 8-bit RGB; format from the suffix."""
    path = Path(path)
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="RGB").save(path)
    return path
