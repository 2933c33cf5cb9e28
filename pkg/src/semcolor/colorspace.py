"""sRGB <-> CIELAB conversions (D65, 2 degree observer) and grayscale helpers.

Images are stored as ``H x W x 3`` uint8 arrays at the I/O boundary and
handled as float64 internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# white point taken from the matrix so that (255, 255, 255) lands exactly on a=b=0
WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


@dataclass(frozen=True)
class ImageLab:
    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.L.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.L, self.a, self.b], axis=-1)

    @classmethod
    def from_stack(cls, lab: np.ndarray) -> "ImageLab":
        return cls(lab[..., 0], lab[..., 1], lab[..., 2])


@dataclass(frozen=True)
class GrayImage:
    """Lightness of an image plus its 8-bit, three-channel replica."""

    L: np.ndarray
    rgb_replicated: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.L.shape


def as_rgb(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[-1] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise ValueError("RGB values must lie in [0, 255]")
        arr = np.round(arr).astype(np.uint8)
    return arr


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(img) -> ImageLab:
    rgb = as_rgb(img).astype(np.float64) / 255.0
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T
    fx, fy, fz = (_f(xyz[..., k] / WHITE_D65[k]) for k in range(3))
    L = 116.0 * fy - 16.0
    return ImageLab(np.clip(L, 0.0, 100.0), 500.0 * (fx - fy), 200.0 * (fy - fz))


def _lab_to_linear(lab: ImageLab) -> np.ndarray:
    fy = (np.asarray(lab.L, dtype=np.float64) + 16.0) / 116.0
    fx = fy + np.asarray(lab.a, dtype=np.float64) / 500.0
    fz = fy - np.asarray(lab.b, dtype=np.float64) / 200.0
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * WHITE_D65
    return xyz @ _XYZ_TO_RGB.T


def lab_to_rgb_float(lab: ImageLab) -> np.ndarray:
    """Unquantized sRGB in [0, 1] nominal range."""
    return _linear_to_srgb(_lab_to_linear(lab))


def lab_to_rgb(lab: ImageLab) -> np.ndarray:
    rgb = lab_to_rgb_float(lab)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def gray_from_lightness(L: np.ndarray) -> GrayImage:
    L = np.asarray(L, dtype=np.float64)
    rep = np.clip(np.round(L * 2.55), 0, 255).astype(np.uint8)
    return GrayImage(L, np.repeat(rep[..., None], 3, axis=-1))


def extract_gray(img) -> GrayImage:
    return gray_from_lightness(rgb_to_lab(img).L)


def luminance_lock(colorized, source: GrayImage) -> np.ndarray:
    """Replace the lightness of ``colorized`` with ``source.L``, keeping its chroma.

    Where the new (L, a, b) falls outside sRGB, (a, b) is scaled toward zero
    (hue kept) just far enough to fit, so the lightness survives the 8-bit
    conversion instead of being distorted by per-channel clipping.
    """
    lab = rgb_to_lab(colorized)
    if lab.shape != source.shape:
        raise ValueError(f"shape mismatch: {lab.shape} vs {source.shape}")
    L = np.asarray(source.L, dtype=np.float64)

    def fits(scale):
        lin = _lab_to_linear(ImageLab(L, lab.a * scale, lab.b * scale))
        return ((lin >= -1e-6) & (lin <= 1 + 1e-6)).all(axis=-1)

    ok = fits(np.ones_like(L))
    lo, hi = np.zeros_like(L), np.ones_like(L)
    lo[ok] = 1.0
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        inside = fits(mid)
        lo = np.where(inside | ok, np.maximum(lo, mid), lo)
        hi = np.where(inside | ok, hi, mid)
    return lab_to_rgb(ImageLab(L, lab.a * lo, lab.b * lo))


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path: str | Path, img) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_rgb(img), mode="RGB").save(path, format="PNG")
