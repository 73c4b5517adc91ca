"""Layered-decomposition evaluation and reconstruction metrics.

Layer sequences of different lengths are aligned with an order-aware
dynamic program that may fuse up to k extra adjacent layers into one span
(the merge budget).  The alignment optimizes a single objective, the mean
alpha soft-IoU cost; RGB L1 is reported under that IoU-optimal alignment
rather than optimized separately, which is what makes the score monotone
in k.  PSNR / SSIM cover composite reconstruction over solid backgrounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from layerlab.imaging import DimensionMismatchError, LayerStack, RgbaImage, RgbImage

PSNR_CAP = 99.0
_UNPREMULTIPLY_EPS = 1e-6


def soft_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of pixelwise min over sum of pixelwise max for two alpha maps.

    Both maps identically zero count as a perfect match (1.0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"alpha shapes differ: {a.shape} vs {b.shape}")
    denom = float(np.maximum(a, b).sum())
    if denom == 0.0:
        return 1.0
    return float(np.minimum(a, b).sum()) / denom


def weighted_rgb_l1(pred: RgbaImage, gt: RgbaImage) -> float:
    """Mean-channel RGB L1 weighted by the ground-truth alpha map."""
    if pred.data.shape != gt.data.shape:
        raise DimensionMismatchError(
            f"image shapes differ: {pred.data.shape} vs {gt.data.shape}"
        )
    weights = gt.alpha
    denom = float(weights.sum())
    if denom == 0.0:
        return 0.0
    per_pixel = np.abs(pred.rgb - gt.rgb).mean(axis=2)
    return float((weights * per_pixel).sum()) / denom


def merge_span(layers: Sequence[RgbaImage]) -> RgbaImage:
    """Collapse a bottom-to-top run of layers into a single RGBA layer.

    alpha_out = 1 - prod(1 - alpha_i); color is the straight-alpha color of
    the span composited over nothing, recovered by un-premultiplying.
    Pixels with alpha_out below 1e-6 get color 0.
    """
    if len(layers) == 0:
        raise ValueError("merge_span needs at least one layer")
    if len(layers) == 1:
        return layers[0]
    shape = layers[0].data.shape
    premult = np.zeros(shape[:2] + (3,))
    one_minus = np.ones(shape[:2])
    for layer in layers:
        if layer.data.shape != shape:
            raise DimensionMismatchError("span layers must share dimensions")
        a = layer.alpha[:, :, None]
        premult = a * layer.rgb + (1.0 - a) * premult
        one_minus = one_minus * (1.0 - layer.alpha)
    alpha = 1.0 - one_minus
    safe = np.maximum(alpha, _UNPREMULTIPLY_EPS)[:, :, None]
    rgb = np.where(alpha[:, :, None] < _UNPREMULTIPLY_EPS, 0.0, premult / safe)
    data = np.concatenate([np.clip(rgb, 0.0, 1.0), alpha[:, :, None]], axis=2)
    return RgbaImage(data)


@dataclass(frozen=True)
class MergeBudget:
    """k extra adjacent layers may fuse into one span (span length <= k+1)."""

    k: int

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError("merge budget k must be >= 0")

    @property
    def max_span(self) -> int:
        return self.k + 1


@dataclass(frozen=True)
class AlignedPair:
    gt_span: tuple[int, int]  # half-open [start, stop) into the gt stack
    pred_span: tuple[int, int]
    soft_iou: float
    rgb_l1: float


@dataclass(frozen=True)
class AlignmentResult:
    pairs: tuple[AlignedPair, ...]
    total_cost: float

    @property
    def mean_soft_iou(self) -> float:
        return float(np.mean([p.soft_iou for p in self.pairs]))

    @property
    def mean_rgb_l1(self) -> float:
        return float(np.mean([p.rgb_l1 for p in self.pairs]))


def _span_table(stack: LayerStack, max_span: int) -> dict[tuple[int, int], RgbaImage]:
    table = {}
    n = len(stack)
    for start in range(n):
        for stop in range(start + 1, min(start + max_span, n) + 1):
            table[(start, stop)] = merge_span(stack.layers[start:stop])
    return table


def align_layers(gt: LayerStack, pred: LayerStack, budget: MergeBudget) -> AlignmentResult:
    """Cost-minimal order-preserving span alignment of two layer stacks.

    Dynamic program over consumed-prefix states (i, j); each step consumes
    (a, b) layers with a, b >= 1, min(a, b) = 1, max(a, b) <= k+1.  Step
    cost is 1 - soft_iou of the merged span alphas.  Ties prefer fewer
    merges, then earlier split points.
    """
    n, m = len(gt), len(pred)
    if n == 0 or m == 0:
        raise ValueError("align_layers requires non-empty stacks")
    max_span = budget.max_span
    gt_spans = _span_table(gt, max_span)
    pred_spans = _span_table(pred, max_span)

    steps = sorted(
        (a, b)
        for a in range(1, max_span + 1)
        for b in range(1, max_span + 1)
        if min(a, b) == 1
    )

    # dp value: (cost, merges, boundary path, pair list); compared lexically.
    start = (0.0, 0, (), ())
    dp: dict[tuple[int, int], tuple] = {(0, 0): start}
    for i in range(n + 1):
        for j in range(m + 1):
            state = dp.get((i, j))
            if state is None:
                continue
            cost, merges, path, pairs = state
            for a, b in steps:
                ii, jj = i + a, j + b
                if ii > n or jj > m:
                    continue
                gt_span = gt_spans[(i, ii)]
                pred_span = pred_spans[(j, jj)]
                iou = soft_iou(gt_span.alpha, pred_span.alpha)
                pair = AlignedPair(
                    gt_span=(i, ii),
                    pred_span=(j, jj),
                    soft_iou=iou,
                    rgb_l1=weighted_rgb_l1(pred_span, gt_span),
                )
                candidate = (
                    cost + (1.0 - iou),
                    merges + (a - 1) + (b - 1),
                    path + ((ii, jj),),
                    pairs + (pair,),
                )
                incumbent = dp.get((ii, jj))
                if incumbent is None or candidate[:3] < incumbent[:3]:
                    dp[(ii, jj)] = candidate
    final = dp.get((n, m))
    if final is None:
        raise ValueError(
            f"no feasible alignment of {n} vs {m} layers under budget k={budget.k}"
        )
    return AlignmentResult(pairs=final[3], total_cost=final[0])


def psnr(a: RgbImage, b: RgbImage) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99."""
    if a.data.shape != b.data.shape:
        raise DimensionMismatchError(f"shapes differ: {a.data.shape} vs {b.data.shape}")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * math.log10(mse), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Gaussian-window local mean, restricted to fully valid windows."""
    r = len(kernel) // 2
    smoothed = correlate1d(correlate1d(img, kernel, axis=0), kernel, axis=1)
    return smoothed[r:-r, r:-r]


def ssim(a: RgbImage, b: RgbImage) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
    K1=0.01 / K2=0.03 on unit range, averaged over channels."""
    if a.data.shape != b.data.shape:
        raise DimensionMismatchError(f"shapes differ: {a.data.shape} vs {b.data.shape}")
    size, sigma = 11, 1.5
    if a.height < size or a.width < size:
        raise ValueError(f"ssim needs images at least {size}x{size}")
    kernel = _gaussian_kernel(size, sigma)
    c1 = 0.01**2
    c2 = 0.03**2
    scores = []
    for c in range(3):
        x = a.data[:, :, c]
        y = b.data[:, :, c]
        mu_x = _windowed(x, kernel)
        mu_y = _windowed(y, kernel)
        var_x = _windowed(x * x, kernel) - mu_x**2
        var_y = _windowed(y * y, kernel) - mu_y**2
        cov = _windowed(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
