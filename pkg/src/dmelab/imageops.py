"""Image tensors: PPM I/O, resizing, the training augmentation chain and circular masking.

Images are ``(H, W, 3)`` arrays of reals in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Landmarks


# -- PPM ----------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a binary P6 PPM with maxval 255."""
    pixels = image if image.dtype == np.uint8 else to_uint8(image)
    h, w, c = pixels.shape
    if c != 3:
        raise ValueError(f"expected 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def _ppm_tokens(data: bytes, count: int):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(path, dtype=np.float32) -> np.ndarray:
    """Read a binary P6 PPM (maxval 255) into an ``(H, W, 3)`` array in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _ppm_tokens(data, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(w), int(h)
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    return (pixels.reshape(h, w, 3) / 255.0).astype(dtype)


# -- geometry -----------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-center linear interpolation along one axis."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    if target_h < 1 or target_w < 1:
        raise ValueError("target size must be >= 1")
    h, w = image.shape[:2]
    if (h, w) == (target_h, target_w):
        return image.copy()
    lo, hi, fy = _axis_weights(h, target_h)
    rows = image[lo] * (1 - fy)[:, None, None] + image[hi] * fy[:, None, None]
    lo, hi, fx = _axis_weights(w, target_w)
    out = rows[:, lo] * (1 - fx)[None, :, None] + rows[:, hi] * fx[None, :, None]
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def flip_vertical(image: np.ndarray) -> np.ndarray:
    return image[::-1].copy()


# -- colour -------------------------------------------------------------------

def _rgb_to_hcm(rgb):
    """Split RGB into hue in [0, 1), chroma (max - min) and the channel minimum.

    Works for any real input, so hue rotation stays exact outside [0, 1].
    """
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    c = mx - mn
    safe = np.where(c > 0, c, 1.0)
    h = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(c > 0, h / 6.0, 0.0)
    return h, c, mn


def _hcm_to_rgb(h, c, mn):
    # standard HSV sector profile, expressed relative to the minimum
    h6 = (h % 1.0) * 6.0
    k = np.stack([(5.0 + h6) % 6.0, (3.0 + h6) % 6.0, (1.0 + h6) % 6.0], axis=-1)
    profile = 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return mn[..., None] + c[..., None] * profile


def adjust_hue(image: np.ndarray, delta: float) -> np.ndarray:
    """Rotate hue by ``delta`` (fraction of a full turn), wrapping mod 1."""
    h, c, mn = _rgb_to_hcm(image)
    return _hcm_to_rgb(h + delta, c, mn).astype(image.dtype, copy=False)


def luma(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    gray = luma(image)[..., None]
    return gray + factor * (image - gray)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = image.mean(axis=(0, 1), keepdims=True)
    return (image - mean) * factor + mean


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    """Random augmentation chain; the defaults are the published training recipe."""

    flip_horizontal: bool = True
    flip_vertical: bool = True
    brightness_max_delta: float = 0.114752799273
    saturation_range: tuple[float, float] = (0.559727311134, 1.27488446236)
    hue_max_delta: float = 0.0251487996429
    contrast_range: tuple[float, float] = (0.999680697918, 1.77048242092)

    def __post_init__(self):
        if self.brightness_max_delta < 0 or self.hue_max_delta < 0:
            raise ValueError("deltas must be >= 0")
        for name in ("saturation_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got {(lo, hi)}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(False, False, 0.0, (1.0, 1.0), 0.0, (1.0, 1.0))


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Flips, brightness, saturation, hue, contrast (in that order), then clamp to [0, 1].

    Six draws are taken from ``rng`` in a fixed order whatever the config, so
    streams stay aligned when options are toggled.
    """
    flip_h, flip_v = rng.random(2) < 0.5
    brightness = rng.uniform(-config.brightness_max_delta, config.brightness_max_delta)
    saturation = rng.uniform(*config.saturation_range)
    hue = rng.uniform(-config.hue_max_delta, config.hue_max_delta)
    contrast = rng.uniform(*config.contrast_range)

    out = image.astype(np.float64)
    if config.flip_horizontal and flip_h:
        out = out[:, ::-1]
    if config.flip_vertical and flip_v:
        out = out[::-1]
    # exact no-ops are skipped so the identity config is bit-exact
    if brightness != 0.0:
        out = out + brightness
    if saturation != 1.0:
        out = adjust_saturation(out, saturation)
    if hue != 0.0:
        out = adjust_hue(out, hue)
    if contrast != 1.0:
        out = adjust_contrast(out, contrast)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


# -- explanation crops --------------------------------------------------------

@dataclass(frozen=True)
class CropSpec:
    center: str
    radius_dd: float

    def __post_init__(self):
        if self.center not in ("fovea", "disc"):
            raise ValueError(f"center must be 'fovea' or 'disc', got {self.center!r}")
        if not self.radius_dd > 0:
            raise ValueError("radius_dd must be > 0")


def circular_mask(image: np.ndarray, landmarks: Landmarks, spec: CropSpec) -> np.ndarray:
    """Black out every pixel whose center lies farther than ``radius_dd`` disc diameters from the chosen landmark."""
    h, w = image.shape[:2]
    cx, cy = landmarks.fovea_center if spec.center == "fovea" else landmarks.disc_center
    radius = spec.radius_dd * landmarks.disc_diameter
    ys = np.arange(h) + 0.5 - cy
    xs = np.arange(w) + 0.5 - cx
    keep = ys[:, None] ** 2 + xs[None, :] ** 2 <= radius**2
    return np.where(keep[..., None], image, 0).astype(image.dtype, copy=False)
