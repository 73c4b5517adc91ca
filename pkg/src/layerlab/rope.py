"""Three-axis rotary position embedding over (layer, y, x).

Spatial coordinates are shifted so the grid center sits at the origin; the
layer axis runs 0..N-1 for generated layers and uses the reserved index -1
for the noise-free condition slot.  Text tokens sit on a diagonal offset
past the maximum layer index so they never collide with image positions.

Each head channel pair (c_{2j}, c_{2j+1}) inside an axis group is rotated
by position * base^(-2j/d_axis); rotations preserve the pairwise norm and
depend only on relative positions per axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch


class Layer3DPosition(NamedTuple):
    layer: int
    y: int
    x: int


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_split: tuple[int, int, int]
    base: float = 10000.0

    def __post_init__(self) -> None:
        if sum(self.axis_split) != self.head_dim:
            raise ValueError("axis_split must sum to head_dim")
        if any(d <= 0 or d % 2 for d in self.axis_split):
            raise ValueError("each axis dimension must be a positive even number")

    @classmethod
    def default(cls, head_dim: int = 64, base: float = 10000.0) -> "RopeConfig":
        """Split a quarter of the channels to the layer axis and the rest
        evenly between y and x (64 -> (16, 24, 24))."""
        if head_dim % 8:
            raise ValueError("default split needs head_dim divisible by 8")
        d_layer = head_dim // 4
        d_spatial = (head_dim - d_layer) // 2
        return cls(head_dim=head_dim, axis_split=(d_layer, d_spatial, d_spatial), base=base)


def grid_positions(
    n_layers: int,
    h_patches: int,
    w_patches: int,
    include_condition: bool = False,
) -> list[Layer3DPosition]:
    """Center-shifted grid positions for each layer, bottom layer first.

    The condition block (layer -1) comes first when requested.  Layer
    positions are a prefix-stable function of ``n_layers``.
    """
    if n_layers < 1 or h_patches < 1 or w_patches < 1:
        raise ValueError("grid_positions requires positive sizes")
    cy, cx = h_patches // 2, w_patches // 2
    layer_ids = list(range(n_layers))
    if include_condition:
        layer_ids = [-1] + layer_ids
    return [
        Layer3DPosition(layer, y - cy, x - cx)
        for layer in layer_ids
        for y in range(h_patches)
        for x in range(w_patches)
    ]


def layer_grid_positions(
    layer_ids: Sequence[int], h_patches: int, w_patches: int
) -> list[Layer3DPosition]:
    """Grid positions for an explicit list of layer indices (e.g. [-1, 0, 1])."""
    if h_patches < 1 or w_patches < 1:
        raise ValueError("grid must be non-empty")
    cy, cx = h_patches // 2, w_patches // 2
    return [
        Layer3DPosition(layer, y - cy, x - cx)
        for layer in layer_ids
        for y in range(h_patches)
        for x in range(w_patches)
    ]


def text_positions(n_tokens: int, max_layers: int) -> list[Layer3DPosition]:
    """Diagonal positions for text tokens, offset by max_layers on the layer
    axis so text never shares a position with any image token."""
    return [Layer3DPosition(max_layers + i, i, i) for i in range(n_tokens)]


def rotation_angles(
    positions: Sequence[Layer3DPosition] | np.ndarray, config: RopeConfig
) -> np.ndarray:
    """Per-pair rotation angles, shape (len(positions), head_dim // 2)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    groups = []
    for axis, d_axis in enumerate(config.axis_split):
        j = np.arange(d_axis // 2, dtype=np.float64)
        theta = config.base ** (-2.0 * j / d_axis)
        groups.append(pos[:, axis : axis + 1] * theta[None, :])
    return np.concatenate(groups, axis=1)


class RotaryTables:
    """Precomputed cos/sin tables for one position list; immutable."""

    def __init__(
        self,
        positions: Sequence[Layer3DPosition] | np.ndarray,
        config: RopeConfig,
        dtype: torch.dtype = torch.float32,
    ):
        angles = rotation_angles(positions, config)
        self.config = config
        self.cos = torch.from_numpy(np.cos(angles)).to(dtype)
        self.sin = torch.from_numpy(np.sin(angles)).to(dtype)

    def __len__(self) -> int:
        return self.cos.shape[0]

    def rotate(self, x: torch.Tensor) -> torch.Tensor:
        """Rotate (..., seq, head_dim) channel pairs by the table angles."""
        seq, dim = x.shape[-2], x.shape[-1]
        if dim != self.config.head_dim or seq != len(self):
            raise ValueError(
                f"expected (..., {len(self)}, {self.config.head_dim}), got {tuple(x.shape)}"
            )
        pairs = x.reshape(*x.shape[:-1], dim // 2, 2)
        u, v = pairs[..., 0], pairs[..., 1]
        cos = self.cos.to(x.dtype)
        sin = self.sin.to(x.dtype)
        rotated = torch.stack((u * cos - v * sin, u * sin + v * cos), dim=-1)
        return rotated.reshape(x.shape)


def apply_rope(
    vectors: torch.Tensor,
    positions: Sequence[Layer3DPosition] | np.ndarray,
    config: RopeConfig,
) -> torch.Tensor:
    """Rotate a (..., seq, head_dim) tensor by its Layer3D positions."""
    return RotaryTables(positions, config, dtype=vectors.dtype).rotate(vectors)
