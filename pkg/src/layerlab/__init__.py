"""Layered-image toolkit.

Subpackages cover the full desk-scale path from PSD files to a toy
variable-layer diffusion decomposer: raster types and compositing
(``imaging``), a PSD subset parser (``psd``), dataset construction
(``pipeline``), layered evaluation metrics (``metrics``), the three-axis
rotary embedding (``rope``), the channel-extended autoencoder (``vae``),
and the flow-matching transformer plus training curriculum (``diffusion``).
"""

from layerlab.imaging import (
    LayerStack,
    RgbaImage,
    RgbImage,
    composite_over_background,
    composite_stack,
    max_abs_diff,
)

__version__ = "0.1.0"

__all__ = [
    "LayerStack",
    "RgbaImage",
    "RgbImage",
    "composite_over_background",
    "composite_stack",
    "max_abs_diff",
    "__version__",
]
