"""Dataset construction: layer filtering, disjoint merging, export, synthesis.

The synthetic generator stands in for a real PSD corpus at desk scale: it
draws anti-aliased rectangles, ellipses, and strokes with a configurable
fraction of semi-transparent layers, and emits captions over a closed
vocabulary so the toy text conditioning has something to chew on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from layerlab.imaging import (
    LayerStack,
    RgbaImage,
    RgbImage,
    composite_stack,
    max_abs_diff,
    read_rgb_png,
    read_rgba_png,
    write_png,
)

DEFAULT_TOL = 1.0 / 255.0

# Closed color vocabulary shared with the toy text conditioning.
PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.86, 0.12, 0.10),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.95, 0.88, 0.18),
    "green": (0.16, 0.65, 0.25),
    "teal": (0.10, 0.62, 0.62),
    "blue": (0.16, 0.32, 0.80),
    "purple": (0.55, 0.20, 0.70),
    "pink": (0.92, 0.45, 0.65),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.50, 0.50, 0.50),
}

SHAPE_NAMES = ("rect", "ellipse", "stroke")


@dataclass
class LayeredSample:
    """One training record: a layer stack with its composite and caption."""

    stack: LayerStack
    composite: RgbImage
    caption: str | None
    source_id: str

    def __post_init__(self) -> None:
        recomposite = composite_stack(self.stack)
        if max_abs_diff(recomposite, self.composite) > DEFAULT_TOL:
            raise ValueError(
                f"sample {self.source_id!r}: stored composite deviates from "
                f"recomposited stack by more than 1/255"
            )


@dataclass(frozen=True)
class ManifestEntry:
    file: str
    z: int
    name: str


@dataclass(frozen=True)
class LayerManifest:
    canvas: tuple[int, int]
    layers: tuple[ManifestEntry, ...]
    caption: str | None
    source_id: str

    def __post_init__(self) -> None:
        if [e.z for e in self.layers] != list(range(1, len(self.layers) + 1)):
            raise ValueError("manifest z-indices must be contiguous from 1")

    def to_json(self) -> str:
        payload = {
            "canvas": list(self.canvas),
            "layers": [{"file": e.file, "z": e.z, "name": e.name} for e in self.layers],
            "caption": self.caption,
            "source_id": self.source_id,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LayerManifest":
        payload = json.loads(text)
        return cls(
            canvas=tuple(payload["canvas"]),
            layers=tuple(
                ManifestEntry(file=e["file"], z=e["z"], name=e["name"])
                for e in payload["layers"]
            ),
            caption=payload.get("caption"),
            source_id=payload.get("source_id", ""),
        )


def filter_noncontributing(stack: LayerStack, tol: float = DEFAULT_TOL) -> LayerStack:
    """Drop layers whose removal changes the composite by at most ``tol``.

    Greedy bottom-to-top; the stack is recomposited after each removal, so
    later decisions see the already-thinned stack.
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    layers = list(stack.layers)
    i = 0
    while i < len(layers):
        with_layer = composite_stack(stack.replace_layers(layers))
        without = layers[:i] + layers[i + 1 :]
        without_composite = composite_stack(stack.replace_layers(without))
        if max_abs_diff(with_layer, without_composite) <= tol:
            layers = without
        else:
            i += 1
    return stack.replace_layers(layers)


def _supports_disjoint(a: RgbaImage, b: RgbaImage, tau: float) -> bool:
    return not np.any((a.alpha > tau) & (b.alpha > tau))


def _merge_pair(lower: RgbaImage, upper: RgbaImage) -> RgbaImage:
    alpha = lower.alpha + upper.alpha
    np.minimum(alpha, 1.0, out=alpha)
    rgb = np.where(lower.alpha[:, :, None] > 0, lower.rgb, upper.rgb)
    return RgbaImage(np.concatenate([rgb, alpha[:, :, None]], axis=2))


def merge_disjoint(stack: LayerStack, tau: float = 0.0) -> LayerStack:
    """Fuse z-adjacent layers whose alpha supports do not overlap.

    Repeats to fixpoint.  With the default ``tau`` of 0 (any positive alpha
    counts as occupancy) the composite is bit-identical before and after;
    ``tau`` > 0 trades exactness for tolerance to anti-aliased fringes.
    """
    layers = list(stack.layers)
    changed = True
    while changed:
        changed = False
        i = 0
        while i + 1 < len(layers):
            if _supports_disjoint(layers[i], layers[i + 1], tau):
                layers[i] = _merge_pair(layers[i], layers[i + 1])
                del layers[i + 1]
                changed = True
            else:
                i += 1
    return stack.replace_layers(layers)


def layer_count_stats(samples: list[LayeredSample], stage: str = "before") -> dict:
    """Histogram of layer counts, labelled with the pipeline stage."""
    counts: dict[int, int] = {}
    for sample in samples:
        n = len(sample.stack)
        counts[n] = counts.get(n, 0) + 1
    return {"stage": stage, "histogram": dict(sorted(counts.items()))}


def export_sample(sample: LayeredSample, directory: str | Path) -> LayerManifest:
    """Write per-layer RGBA PNGs, the composite PNG, and manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for z, layer in enumerate(sample.stack.layers, start=1):
        name = f"layer_{z:03d}"
        file_name = name + ".png"
        write_png(layer, directory / file_name)
        entries.append(ManifestEntry(file=file_name, z=z, name=name))
    write_png(sample.composite, directory / "composite.png")
    manifest = LayerManifest(
        canvas=sample.stack.canvas,
        layers=tuple(entries),
        caption=sample.caption,
        source_id=sample.source_id,
    )
    (directory / "manifest.json").write_text(manifest.to_json())
    return manifest


def import_sample(directory: str | Path) -> LayeredSample:
    directory = Path(directory)
    manifest = LayerManifest.from_json((directory / "manifest.json").read_text())
    layers = tuple(read_rgba_png(directory / e.file) for e in manifest.layers)
    composite = read_rgb_png(directory / "composite.png")
    return LayeredSample(
        stack=LayerStack(canvas=manifest.canvas, layers=layers),
        composite=composite,
        caption=manifest.caption,
        source_id=manifest.source_id,
    )


@dataclass(frozen=True)
class SynthConfig:
    canvas: tuple[int, int] = (64, 64)
    min_layers: int = 1
    max_layers: int = 4
    semi_transparent_frac: float = 0.5
    supersample: int = 4
    background_frac: float = 0.75  # fraction of samples with an opaque base layer

    def __post_init__(self) -> None:
        if not (1 <= self.min_layers <= self.max_layers):
            raise ValueError("need 1 <= min_layers <= max_layers")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")


def _coverage_mask(kind: str, canvas: tuple[int, int], rng: np.random.Generator,
                   supersample: int) -> np.ndarray:
    """Anti-aliased [0,1] coverage for one random shape (box-filtered)."""
    w, h = canvas
    s = supersample
    ys, xs = np.mgrid[0 : h * s, 0 : w * s]
    ys = (ys + 0.5) / s
    xs = (xs + 0.5) / s
    if kind == "rect":
        x0, y0 = rng.uniform(0, w * 0.6), rng.uniform(0, h * 0.6)
        bw, bh = rng.uniform(w * 0.25, w * 0.6), rng.uniform(h * 0.25, h * 0.6)
        inside = (xs >= x0) & (xs <= x0 + bw) & (ys >= y0) & (ys <= y0 + bh)
    elif kind == "ellipse":
        cx, cy = rng.uniform(w * 0.2, w * 0.8), rng.uniform(h * 0.2, h * 0.8)
        rx, ry = rng.uniform(w * 0.12, w * 0.35), rng.uniform(h * 0.12, h * 0.35)
        inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    elif kind == "stroke":
        p0 = rng.uniform((0, 0), (w, h))
        p1 = rng.uniform((0, 0), (w, h))
        thickness = rng.uniform(min(w, h) * 0.05, min(w, h) * 0.15)
        d = p1 - p0
        denom = float(d @ d) or 1.0
        t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / denom, 0.0, 1.0)
        dist = np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))
        inside = dist <= thickness / 2.0
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def synth_sample(seed: int, config: SynthConfig = SynthConfig()) -> LayeredSample:
    """Deterministic synthetic multilayer sample for the given seed."""
    rng = np.random.default_rng(seed)
    w, h = config.canvas
    n_layers = int(rng.integers(config.min_layers, config.max_layers + 1))
    layers = []
    caption_parts = [f"layers{n_layers}"]
    for i in range(n_layers):
        color_name = str(rng.choice(list(PALETTE)))
        color = PALETTE[color_name]
        if i == 0 and rng.random() < config.background_frac:
            coverage = np.ones((h, w))
            kind = "rect"
            caption_parts += [color_name, "fill"]
        else:
            kind = str(rng.choice(SHAPE_NAMES))
            coverage = _coverage_mask(kind, config.canvas, rng, config.supersample)
            caption_parts += [color_name, kind]
        opacity = 1.0
        if rng.random() < config.semi_transparent_frac:
            opacity = float(rng.uniform(0.3, 0.8))
            caption_parts.append("glass")
        data = np.empty((h, w, 4))
        data[:, :, :3] = color
        data[:, :, 3] = coverage * opacity
        layers.append(RgbaImage(data))
    stack = LayerStack(canvas=config.canvas, layers=tuple(layers))
    return LayeredSample(
        stack=stack,
        composite=composite_stack(stack),
        caption=" ".join(caption_parts),
        source_id=f"synth-{seed:08d}",
    )


def synth_corpus(
    count: int,
    base_seed: int = 0,
    config: SynthConfig = SynthConfig(),
    unique_ids: bool = True,
) -> list[LayeredSample]:
    """A reproducible corpus; ``unique_ids`` prefixes captions with uid tokens
    so every sample is identifiable to the toy text conditioning."""
    samples = []
    for i in range(count):
        sample = synth_sample(base_seed + i, config)
        if unique_ids:
            sample = LayeredSample(
                stack=sample.stack,
                composite=sample.composite,
                caption=f"uid{i:03d} {sample.caption}",
                source_id=sample.source_id,
            )
        samples.append(sample)
    return samples
