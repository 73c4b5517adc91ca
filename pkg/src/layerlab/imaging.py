"""Core raster types and sequential alpha compositing.

Images are dense float64 arrays with channel values in [0, 1] and straight
(non-premultiplied) alpha.  8-bit integers appear only at the PNG boundary,
converted by value/255.  Constructors validate ranges and raise instead of
silently clamping; use ``RgbaImage.from_clamped`` / ``RgbImage.from_clamped``
at codec boundaries where out-of-range floats are expected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image


class DimensionMismatchError(ValueError):
    """Two rasters (or a layer and its canvas) have incompatible sizes."""


class ChannelRangeError(ValueError):
    """Channel data outside [0, 1] was passed to a constructor."""


RgbColor = tuple[float, float, float]


def _validated(data: np.ndarray, channels: int, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise DimensionMismatchError(
            f"{what} expects an (H, W, {channels}) array, got shape {arr.shape}"
        )
    if arr.size and (np.min(arr) < 0.0 or np.max(arr) > 1.0 or not np.all(np.isfinite(arr))):
        raise ChannelRangeError(f"{what} channel values must be finite and in [0, 1]")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RgbaImage:
    """H×W×4 raster (R, G, B, A), straight alpha, values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validated(self.data, 4, "RgbaImage"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def rgb(self) -> np.ndarray:
        return self.data[:, :, :3]

    @property
    def alpha(self) -> np.ndarray:
        return self.data[:, :, 3]

    @classmethod
    def from_clamped(cls, data: np.ndarray) -> "RgbaImage":
        """Clamp raw floats into [0, 1]; for codec/model boundaries only."""
        return cls(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0))

    @classmethod
    def filled(cls, width: int, height: int, rgba: Sequence[float]) -> "RgbaImage":
        return cls(np.broadcast_to(np.asarray(rgba, dtype=np.float64), (height, width, 4)))

    @classmethod
    def transparent(cls, width: int, height: int) -> "RgbaImage":
        return cls(np.zeros((height, width, 4)))


@dataclass(frozen=True)
class RgbImage:
    """H×W×3 raster, values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validated(self.data, 3, "RgbImage"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_clamped(cls, data: np.ndarray) -> "RgbImage":
        return cls(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0))

    @classmethod
    def filled(cls, width: int, height: int, rgb: Sequence[float]) -> "RgbImage":
        return cls(np.broadcast_to(np.asarray(rgb, dtype=np.float64), (height, width, 3)))


@dataclass(frozen=True)
class LayerStack:
    """Ordered bottom-to-top list of RGBA layers on a fixed canvas."""

    canvas: tuple[int, int]  # (width, height)
    layers: tuple[RgbaImage, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        w, h = self.canvas
        for i, layer in enumerate(self.layers):
            if (layer.width, layer.height) != (w, h):
                raise DimensionMismatchError(
                    f"layer {i} is {layer.width}x{layer.height}, canvas is {w}x{h}"
                )

    def __len__(self) -> int:
        return len(self.layers)

    def replace_layers(self, layers: Iterable[RgbaImage]) -> "LayerStack":
        return LayerStack(self.canvas, tuple(layers))


def composite_stack(stack: LayerStack) -> RgbImage:
    """Bottom-to-top blend: C_0 = 0, C_i = a_i*rgb_i + (1-a_i)*C_{i-1}."""
    w, h = stack.canvas
    out = np.zeros((h, w, 3))
    for layer in stack.layers:
        a = layer.alpha[:, :, None]
        out = a * layer.rgb + (1.0 - a) * out
    return RgbImage(out)


def composite_over_background(image: RgbaImage, bg: RgbColor) -> RgbImage:
    """Blend a single RGBA image over a solid background color."""
    bg_arr = np.asarray(bg, dtype=np.float64)
    if bg_arr.shape != (3,) or np.min(bg_arr) < 0.0 or np.max(bg_arr) > 1.0:
        raise ChannelRangeError("background color must be 3 channels in [0, 1]")
    a = image.alpha[:, :, None]
    return RgbImage(a * image.rgb + (1.0 - a) * bg_arr)


def max_abs_diff(a: RgbImage | RgbaImage, b: RgbImage | RgbaImage) -> float:
    """Max over pixels and channels of |a - b|."""
    if a.data.shape != b.data.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    if a.data.size == 0:
        return 0.0
    return float(np.max(np.abs(a.data - b.data)))


def _to_u8(data: np.ndarray) -> np.ndarray:
    return np.round(data * 255.0).astype(np.uint8)


def write_png(image: RgbaImage | RgbImage, path: str | Path) -> None:
    mode = "RGBA" if isinstance(image, RgbaImage) else "RGB"
    Image.fromarray(_to_u8(image.data), mode=mode).save(path, format="PNG")


def read_rgba_png(path: str | Path) -> RgbaImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return RgbaImage(arr)


def read_rgb_png(path: str | Path) -> RgbImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return RgbImage(arr)
