"""Toy convolutional autoencoder and the RGB-to-RGBA channel extension.

The encoder downsamples 8x to a 16-channel latent; the decoder mirrors it.
``extend_to_rgba`` performs the weight surgery that grows a trained
3-channel model to 4 channels without changing its behavior at init:
pretrained weights are copied into the first three channels, the new alpha
input weights are zeroed, and the new alpha output row gets zero weights
with bias 1, so an RGB image with alpha 1 round-trips identically.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from layerlab.imaging import RgbaImage, RgbImage, composite_over_background
from layerlab.pipeline import LayeredSample

LATENT_CHANNELS = 16
DOWNSAMPLE = 8


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return x + h


class ConvAutoencoder(nn.Module):
    """Four-stage conv VAE; ``in_channels`` is 3 (RGB) or 4 (RGBA)."""

    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (32, 48, 64, 64)):
        super().__init__()
        if in_channels not in (3, 4):
            raise ValueError("in_channels must be 3 or 4")
        if len(widths) != 4:
            raise ValueError("expected one width per stage (4 stages)")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        w0, w1, w2, w3 = widths

        self.enc_in = nn.Conv2d(in_channels, w0, 3, padding=1)
        self.enc_stages = nn.ModuleList(
            [
                nn.Sequential(_ResBlock(w0), nn.Conv2d(w0, w1, 3, stride=2, padding=1)),
                nn.Sequential(_ResBlock(w1), nn.Conv2d(w1, w2, 3, stride=2, padding=1)),
                nn.Sequential(_ResBlock(w2), nn.Conv2d(w2, w3, 3, stride=2, padding=1)),
            ]
        )
        self.enc_out = nn.Sequential(
            _ResBlock(w3), nn.GroupNorm(8, w3), nn.SiLU(),
            nn.Conv2d(w3, 2 * LATENT_CHANNELS, 3, padding=1),
        )

        self.dec_in = nn.Conv2d(LATENT_CHANNELS, w3, 3, padding=1)
        self.dec_stages = nn.ModuleList(
            [
                nn.Sequential(_ResBlock(w3), nn.Upsample(scale_factor=2, mode="nearest"),
                              nn.Conv2d(w3, w2, 3, padding=1)),
                nn.Sequential(_ResBlock(w2), nn.Upsample(scale_factor=2, mode="nearest"),
                              nn.Conv2d(w2, w1, 3, padding=1)),
                nn.Sequential(_ResBlock(w1), nn.Upsample(scale_factor=2, mode="nearest"),
                              nn.Conv2d(w1, w0, 3, padding=1)),
            ]
        )
        self.dec_norm = nn.GroupNorm(8, w0)
        self.dec_out = nn.Conv2d(w0, in_channels, 3, padding=1)

    # -- spec-named views onto the surgery targets ------------------------
    @property
    def first_encoder_conv(self) -> nn.Conv2d:
        return self.enc_in

    @property
    def last_decoder_conv(self) -> nn.Conv2d:
        return self.dec_out

    def encode_moments(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-1] % DOWNSAMPLE or x.shape[-2] % DOWNSAMPLE:
            raise ValueError(f"spatial dims must be divisible by {DOWNSAMPLE}")
        h = self.enc_in(x)
        for stage in self.enc_stages:
            h = stage(h)
        mu, logvar = self.enc_out(h).chunk(2, dim=1)
        return mu, logvar

    def encode(
        self,
        x: torch.Tensor,
        sample: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Latent for a (B, C, H, W) batch; posterior mean unless ``sample``."""
        mu, logvar = self.encode_moments(x)
        if not sample:
            return mu
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(0.5 * logvar) * noise

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Raw (unclamped) reconstruction of a (B, c, h, w) latent batch."""
        h = self.dec_in(z)
        for stage in self.dec_stages:
            h = stage(h)
        return self.dec_out(nn.functional.silu(self.dec_norm(h)))


def extend_to_rgba(rgb_model: ConvAutoencoder) -> ConvAutoencoder:
    """Grow a 3-channel model to 4 channels with behavior-preserving init."""
    if rgb_model.in_channels != 3:
        raise ValueError("model is already extended to 4 channels")
    extended = ConvAutoencoder(in_channels=4, widths=rgb_model.widths)
    state = {k: v.clone() for k, v in rgb_model.state_dict().items()}
    with torch.no_grad():
        enc_w = torch.zeros_like(extended.enc_in.weight)
        enc_w[:, :3] = state.pop("enc_in.weight")
        dec_w = torch.zeros_like(extended.dec_out.weight)
        dec_w[:3] = state.pop("dec_out.weight")
        dec_b = torch.zeros_like(extended.dec_out.bias)
        dec_b[:3] = state.pop("dec_out.bias")
        dec_b[3] = 1.0
        state["enc_in.weight"] = enc_w
        state["dec_out.weight"] = dec_w
        state["dec_out.bias"] = dec_b
    extended.load_state_dict(state)
    return extended


def image_to_tensor(image: RgbaImage | RgbImage, channels: int) -> torch.Tensor:
    """(C, H, W) float32 tensor; RGB inputs get alpha 1 when channels=4."""
    arr = image.data
    if channels == 4 and arr.shape[2] == 3:
        arr = np.concatenate([arr, np.ones(arr.shape[:2] + (1,))], axis=2)
    elif arr.shape[2] != channels:
        raise ValueError(f"cannot feed {arr.shape[2]}-channel image to {channels}-channel model")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()


def encode_image(model: ConvAutoencoder, image: RgbaImage | RgbImage) -> torch.Tensor:
    """Deterministic (c, h, w) mean latent for a single image."""
    with torch.no_grad():
        x = image_to_tensor(image, model.in_channels).unsqueeze(0)
        return model.encode(x)[0]


def decode_to_rgba(model: ConvAutoencoder, z: torch.Tensor) -> RgbaImage:
    """Decode one (c, h, w) latent and clamp into a valid image."""
    if model.in_channels != 4:
        raise ValueError("decode_to_rgba requires the 4-channel model")
    with torch.no_grad():
        out = model.decode(z.unsqueeze(0))[0]
    return RgbaImage.from_clamped(out.permute(1, 2, 0).double().numpy())


def decode_to_rgb(model: ConvAutoencoder, z: torch.Tensor) -> RgbImage:
    with torch.no_grad():
        out = model.decode(z.unsqueeze(0))[0]
    return RgbImage.from_clamped(out[:3].permute(1, 2, 0).double().numpy())


@dataclass(frozen=True)
class VaeTrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 2e-3
    beta: float = 1e-6  # KL weight
    blend_weight: float = 1.0  # composite-over-background term
    rgb_fraction: float = 0.5  # share of composite (RGB) items per batch
    seed: int = 0
    log_every: int = 100


def _reconstruction_l1(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # Channel-sum (not channel-mean) so a zero-error alpha channel leaves the
    # loss of an RGB batch equal to the unextended model's loss.
    return torch.abs(recon - target).sum(dim=1).mean()


def _blend_l1(recon: torch.Tensor, target: torch.Tensor, bg: torch.Tensor) -> torch.Tensor:
    def blend(x: torch.Tensor) -> torch.Tensor:
        a = x[:, 3:4]
        return a * x[:, :3] + (1.0 - a) * bg

    if recon.shape[1] == 3:
        return torch.abs(recon - target).sum(dim=1).mean()
    return torch.abs(blend(recon) - blend(target)).sum(dim=1).mean()


def vae_loss(
    model: ConvAutoencoder,
    batch: torch.Tensor,
    config: VaeTrainConfig,
    generator: torch.Generator | None = None,
    bg: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Reconstruction L1 + blended-over-background L1 + beta * KL."""
    mu, logvar = model.encode_moments(batch)
    noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + torch.exp(0.5 * logvar) * noise
    recon = model.decode(z)
    rec = _reconstruction_l1(recon, batch)
    if bg is None:
        bg = torch.rand((batch.shape[0], 3, 1, 1), generator=generator)
    blend = _blend_l1(recon, batch, bg)
    kl = 0.5 * torch.mean(mu**2 + torch.exp(logvar) - logvar - 1.0)
    loss = rec + config.blend_weight * blend + config.beta * kl
    parts = {"recon": float(rec), "blend": float(blend), "kl": float(kl)}
    return loss, parts


@dataclass
class TrainedVae:
    model: ConvAutoencoder
    history: list[dict] = field(default_factory=list)

    @property
    def final_recon_l1(self) -> float:
        return self.history[-1]["recon_per_channel"]


def _corpus_tensors(samples: list[LayeredSample]) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    rgba = [
        image_to_tensor(layer, 4)
        for sample in samples
        for layer in sample.stack.layers
    ]
    rgb = [image_to_tensor(sample.composite, 4) for sample in samples]
    return rgba, rgb


def train_toy_vae(
    samples: list[LayeredSample],
    config: VaeTrainConfig = VaeTrainConfig(),
    model: ConvAutoencoder | None = None,
) -> TrainedVae:
    """Fit the 4-channel autoencoder on layers plus composites (alpha 1)."""
    torch.manual_seed(config.seed)
    if model is None:
        model = extend_to_rgba(ConvAutoencoder(in_channels=3))
    if model.in_channels != 4:
        raise ValueError("train_toy_vae expects the 4-channel model")
    rgba_items, rgb_items = _corpus_tensors(samples)
    if not rgba_items or not rgb_items:
        raise ValueError("corpus must contain both layers and composites")
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    history: list[dict] = []
    n_rgb = max(1, int(round(config.batch_size * config.rgb_fraction)))
    n_rgba = max(1, config.batch_size - n_rgb)
    for step in range(config.steps):
        picks_a = torch.randint(len(rgba_items), (n_rgba,), generator=generator)
        picks_c = torch.randint(len(rgb_items), (n_rgb,), generator=generator)
        batch = torch.stack(
            [rgba_items[i] for i in picks_a] + [rgb_items[i] for i in picks_c]
        )
        loss, parts = vae_loss(model, batch, config, generator)
        if not math.isfinite(float(loss)):
            raise DivergenceError(
                f"non-finite VAE loss at step {step}: {parts} (lr={config.lr})"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            history.append(
                {
                    "step": step,
                    "loss": float(loss),
                    **parts,
                    "recon_per_channel": parts["recon"] / 4.0,
                }
            )
    return TrainedVae(model=model, history=history)


def clone_model(model: ConvAutoencoder) -> ConvAutoencoder:
    return copy.deepcopy(model)
