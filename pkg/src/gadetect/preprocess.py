"""Square crop, bilinear resize and local-mean color normalization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 512
    gaussian_sigma: Optional[float] = None  # None -> target_size / 30
    gain: float = 4.0
    offset: float = 128.0
    clip_range: tuple = (0.0, 255.0)

    def __post_init__(self):
        if self.target_size <= 0:
            raise ConfigError(f"target_size must be positive, got {self.target_size}")
        if self.gaussian_sigma is not None and not self.gaussian_sigma > 0:
            raise ConfigError(f"gaussian_sigma must be positive, got {self.gaussian_sigma}")
        lo, hi = self.clip_range
        if not lo <= self.offset <= hi:
            raise ConfigError(f"offset {self.offset} outside clip_range {self.clip_range}")

    @property
    def sigma(self) -> float:
        return self.gaussian_sigma if self.gaussian_sigma is not None else self.target_size / 30.0

    def fingerprint(self) -> str:
        d = asdict(self)
        d["gaussian_sigma"] = self.sigma
        d["clip_range"] = [float(v) for v in self.clip_range]
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an H x W x 3 image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise InputError(f"empty image of shape {image.shape}")
    return image


def center_square_crop(image: np.ndarray) -> np.ndarray:
    """Trim the longer side to the shorter one around the image center.

    When the excess is odd the extra pixel comes off the bottom/right.
    """
    image = _check_rgb(image)
    h, w = image.shape[:2]
    s = min(h, w)
    top = (h - s) // 2
    left = (w - s) // 2
    return image[top : top + s, left : left + s].copy()


def _bilinear_axis(n_in: int, n_out: int):
    # corner-aligned: output sample i sits at input coordinate i*(n_in-1)/(n_out-1)
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    return i0, i1, frac


def resize(image: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize of a square image to ``target_size`` x ``target_size``.

    Sampling is corner-aligned (first and last pixel centers map onto each
    other). uint8 input yields rounded uint8 output.
    """
    image = _check_rgb(image)
    h, w = image.shape[:2]
    if h != w:
        raise InputError(f"resize expects a square image, got {h}x{w}; crop first")
    if target_size <= 0:
        raise ConfigError(f"target_size must be positive, got {target_size}")
    if h == target_size:
        return image.copy()
    i0, i1, f = _bilinear_axis(h, target_size)
    src = image.astype(np.float64)
    rows = src[i0] * (1 - f)[:, None, None] + src[i1] * f[:, None, None]
    out = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i1] * f[None, :, None]
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur with reflect (half-sample symmetric) borders."""
    if not sigma > 0:
        raise ConfigError(f"gaussian sigma must be positive, got {sigma}")
    src = np.asarray(image, dtype=np.float64)
    return ndimage.gaussian_filter(src, sigma=(sigma, sigma, 0), mode="reflect")


def color_normalize(image: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """clip(gain * (I - blur(I)) + offset), rounded to uint8."""
    image = _check_rgb(image)
    src = image.astype(np.float64)
    out = cfg.gain * (src - gaussian_blur(src, cfg.sigma)) + cfg.offset
    lo, hi = cfg.clip_range
    out = np.clip(out, lo, hi)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def preprocess(image: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Full input pipeline: crop, resize, then normalize at the target size."""
    square = center_square_crop(image)
    scaled = resize(square, cfg.target_size)
    return color_normalize(scaled, cfg)
