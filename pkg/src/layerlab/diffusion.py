"""Toy variable-layer flow-matching transformer and its training curriculum.

The model denoises a stack of per-layer latents jointly: text tokens, an
optional noise-free condition latent, and the noisy layer latents are
concatenated into one attention sequence in every block, with two separate
parameter sets for the text and visual streams.  Layer identity is carried
entirely by the layer axis of the rotary embedding; the condition latent
(or, in the text-to-multilayer task, the jointly predicted composite)
occupies the reserved layer slot -1.

Training follows the straight-line flow objective: x_t = t*x0 + (1-t)*x1
with x1 standard normal, the regression target is the constant velocity
x0 - x1, and sampling is plain Euler integration from t=0 to t=1.

The curriculum adapts the model in three stages: single-image generation
(RGB and RGBA), text-to-multilayer with the composite predicted jointly at
slot -1, and finally image-conditioned decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import torch
from torch import nn

from layerlab.pipeline import PALETTE, SHAPE_NAMES, LayeredSample
from layerlab.rope import RopeConfig, RotaryTables, layer_grid_positions, text_positions
from layerlab.vae import ConvAutoencoder, DivergenceError, image_to_tensor


# --------------------------------------------------------------------------
# Caption vocabulary (closed, toy stand-in for an MLLM text encoder)
# --------------------------------------------------------------------------

def default_vocab(max_uids: int = 64, max_layers: int = 8) -> list[str]:
    tokens = ["<pad>"]
    tokens += [f"uid{i:03d}" for i in range(max_uids)]
    tokens += [f"layers{n}" for n in range(1, max_layers + 1)]
    tokens += [f"layer{j}" for j in range(max_layers)]
    tokens += list(PALETTE)
    tokens += list(SHAPE_NAMES) + ["fill", "glass"]
    return tokens


class Vocabulary:
    def __init__(self, tokens: list[str] | None = None):
        self.tokens = list(tokens) if tokens is not None else default_vocab()
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if self.tokens[0] != "<pad>":
            raise ValueError("token 0 must be <pad>")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, caption: str, length: int) -> torch.Tensor:
        ids = []
        for word in caption.split():
            if word not in self.index:
                raise ValueError(f"word {word!r} not in the closed vocabulary")
            ids.append(self.index[word])
        ids = ids[:length] + [0] * (length - len(ids))
        return torch.tensor(ids, dtype=torch.long)


# --------------------------------------------------------------------------
# Flow-matching primitives
# --------------------------------------------------------------------------

@dataclass
class FlowBatch:
    """One training batch: x_t = t*x0 + (1-t)*x1 with per-item timestep t."""

    x0: torch.Tensor  # (B, N, c, h, w) target latents
    x1: torch.Tensor  # (B, N, c, h, w) standard-normal noise
    t: torch.Tensor  # (B,)
    x_t: torch.Tensor
    tokens: torch.Tensor  # (B, T) caption token ids
    z_cond: torch.Tensor | None = None  # (B, c, h, w) noise-free condition
    layer_ids: tuple[int, ...] | None = None  # rope layer index per x slice


def sample_logit_normal_t(
    batch: int,
    generator: torch.Generator | None = None,
    mu: float = 0.0,
    sigma: float = 1.0,
) -> torch.Tensor:
    z = torch.randn((batch,), generator=generator)
    return torch.sigmoid(mu + sigma * z)


def make_flow_batch(
    x0: torch.Tensor,
    tokens: torch.Tensor,
    generator: torch.Generator | None = None,
    z_cond: torch.Tensor | None = None,
    layer_ids: tuple[int, ...] | None = None,
    t_mu: float = 0.0,
    t_sigma: float = 1.0,
) -> FlowBatch:
    if x0.ndim != 5:
        raise ValueError(f"x0 must be (B, N, c, h, w), got {tuple(x0.shape)}")
    x1 = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    t = sample_logit_normal_t(x0.shape[0], generator, t_mu, t_sigma).to(x0.dtype)
    tb = t.view(-1, 1, 1, 1, 1)
    x_t = tb * x0 + (1.0 - tb) * x1
    return FlowBatch(x0=x0, x1=x1, t=t, x_t=x_t, tokens=tokens,
                     z_cond=z_cond, layer_ids=layer_ids)


def velocity_target(batch: FlowBatch) -> torch.Tensor:
    """dx_t/dt for the straight-line interpolant; independent of t."""
    return batch.x0 - batch.x1


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    width: int = 128
    depth: int = 4
    heads: int = 4
    patch: int = 2
    latent_channels: int = 16
    latent_size: int = 8
    max_layers: int = 8
    text_len: int = 12
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.latent_size % self.patch:
            raise ValueError("latent_size must be divisible by patch")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def grid(self) -> tuple[int, int]:
        n = self.latent_size // self.patch
        return n, n

    @property
    def patch_dim(self) -> int:
        return self.latent_channels * self.patch * self.patch

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig.default(self.head_dim, base=self.rope_base)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "width": self.width, "depth": self.depth,
            "heads": self.heads, "patch": self.patch,
            "latent_channels": self.latent_channels, "latent_size": self.latent_size,
            "max_layers": self.max_layers, "text_len": self.text_len,
            "rope_base": self.rope_base,
        }


def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, N, c, h, w) -> (B, N*hp*wp, c*p*p), tokens row-major per layer."""
    b, n, c, h, w = x.shape
    hp, wp = h // patch, w // patch
    x = x.reshape(b, n, c, hp, patch, wp, patch)
    x = x.permute(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, n * hp * wp, c * patch * patch)


def unpatchify(tokens: torch.Tensor, n_layers: int, c: int, size: int, patch: int) -> torch.Tensor:
    b = tokens.shape[0]
    hp = wp = size // patch
    x = tokens.reshape(b, n_layers, hp, wp, c, patch, patch)
    x = x.permute(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, n_layers, c, size, size)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half
        )
        args = t[:, None] * 1000.0 * freqs[None]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return self.mlp(emb)


class DualStreamBlock(nn.Module):
    """Joint attention over [text; visual] with separate parameter sets."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        for stream in ("txt", "img"):
            setattr(self, f"{stream}_mod", nn.Linear(width, 6 * width))
            setattr(self, f"{stream}_norm1", nn.LayerNorm(width, elementwise_affine=False))
            setattr(self, f"{stream}_norm2", nn.LayerNorm(width, elementwise_affine=False))
            setattr(self, f"{stream}_qkv", nn.Linear(width, 3 * width))
            setattr(self, f"{stream}_proj", nn.Linear(width, width))
            setattr(self, f"{stream}_q_norm", nn.RMSNorm(self.head_dim, eps=1e-6))
            setattr(self, f"{stream}_k_norm", nn.RMSNorm(self.head_dim, eps=1e-6))
            setattr(
                self,
                f"{stream}_mlp",
                nn.Sequential(
                    nn.Linear(width, 4 * width),
                    nn.GELU(approximate="tanh"),
                    nn.Linear(4 * width, width),
                ),
            )
        # adaLN-zero: blocks start as identity, gates closed
        nn.init.zeros_(self.txt_mod.weight)
        nn.init.zeros_(self.txt_mod.bias)
        nn.init.zeros_(self.img_mod.weight)
        nn.init.zeros_(self.img_mod.bias)

    def _qkv(self, stream: str, h: torch.Tensor, rope: RotaryTables):
        b, s, _ = h.shape
        qkv = getattr(self, f"{stream}_qkv")(h)
        q, k, v = qkv.reshape(b, s, 3, self.heads, self.head_dim).unbind(dim=2)
        q = getattr(self, f"{stream}_q_norm")(q).transpose(1, 2)  # (B, H, S, hd)
        k = getattr(self, f"{stream}_k_norm")(k).transpose(1, 2)
        v = v.transpose(1, 2)
        return rope.rotate(q), rope.rotate(k), v

    def forward(
        self,
        txt: torch.Tensor,
        img: torch.Tensor,
        temb: torch.Tensor,
        txt_rope: RotaryTables,
        img_rope: RotaryTables,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        mods = {}
        for stream in ("txt", "img"):
            raw = getattr(self, f"{stream}_mod")(nn.functional.silu(temb))
            mods[stream] = [m.unsqueeze(1) for m in raw.chunk(6, dim=-1)]
        t_shift1, t_scale1, t_gate1, t_shift2, t_scale2, t_gate2 = mods["txt"]
        i_shift1, i_scale1, i_gate1, i_shift2, i_scale2, i_gate2 = mods["img"]

        txt_h = self.txt_norm1(txt) * (1 + t_scale1) + t_shift1
        img_h = self.img_norm1(img) * (1 + i_scale1) + i_shift1
        tq, tk, tv = self._qkv("txt", txt_h, txt_rope)
        iq, ik, iv = self._qkv("img", img_h, img_rope)
        q = torch.cat([tq, iq], dim=2)
        k = torch.cat([tk, ik], dim=2)
        v = torch.cat([tv, iv], dim=2)
        joint = nn.functional.scaled_dot_product_attention(q, k, v)
        joint = joint.transpose(1, 2).reshape(txt.shape[0], -1, self.heads * self.head_dim)
        s_txt = txt.shape[1]
        txt = txt + t_gate1 * self.txt_proj(joint[:, :s_txt])
        img = img + i_gate1 * self.img_proj(joint[:, s_txt:])

        txt = txt + t_gate2 * self.txt_mlp(self.txt_norm2(txt) * (1 + t_scale2) + t_shift2)
        img = img + i_gate2 * self.img_mlp(self.img_norm2(img) * (1 + i_scale2) + i_shift2)
        return txt, img


class VldMmdit(nn.Module):
    """Variable-layer dual-stream diffusion transformer (toy scale)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.width)
        self.t_embed = TimestepEmbedder(config.width)
        self.img_in = nn.Linear(config.patch_dim, config.width)
        self.blocks = nn.ModuleList(
            [DualStreamBlock(config.width, config.heads) for _ in range(config.depth)]
        )
        self.norm_out = nn.LayerNorm(config.width, elementwise_affine=False)
        self.mod_out = nn.Linear(config.width, 2 * config.width)
        self.proj_out = nn.Linear(config.width, config.patch_dim)
        nn.init.zeros_(self.mod_out.weight)
        nn.init.zeros_(self.mod_out.bias)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)
        self._rope_cache: dict = {}

    def _rope_tables(self, n_text: int, layer_ids: tuple[int, ...]) -> tuple[RotaryTables, RotaryTables]:
        key = (n_text, layer_ids)
        if key not in self._rope_cache:
            cfg = self.config
            txt = RotaryTables(text_positions(n_text, cfg.max_layers), cfg.rope)
            img = RotaryTables(layer_grid_positions(layer_ids, *cfg.grid), cfg.rope)
            self._rope_cache[key] = (txt, img)
        return self._rope_cache[key]

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        tokens: torch.Tensor,
        z_cond: torch.Tensor | None = None,
        layer_ids: tuple[int, ...] | None = None,
    ) -> torch.Tensor:
        cfg = self.config
        if x_t.ndim != 5:
            raise ValueError(f"x_t must be (B, N, c, h, w), got {tuple(x_t.shape)}")
        b, n, c, h, w = x_t.shape
        if n < 1:
            raise ValueError("need at least one layer slice")
        if (c, h, w) != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
            raise ValueError(f"latent slice shape {(c, h, w)} does not match config")
        n_slots = n + (1 if z_cond is not None else 0)
        if n_slots > cfg.max_layers + 1:
            raise ValueError(
                f"{n_slots} latent slots exceed the configured maximum "
                f"({cfg.max_layers} layers + 1 condition)"
            )
        if layer_ids is None:
            layer_ids = tuple(range(n))
        if len(layer_ids) != n:
            raise ValueError("layer_ids must match the number of x_t slices")

        txt = self.token_emb(tokens)
        temb = self.t_embed(t.to(txt.dtype))

        all_ids = layer_ids
        vis = x_t
        if z_cond is not None:
            all_ids = (-1,) + tuple(layer_ids)
            vis = torch.cat([z_cond.unsqueeze(1), x_t], dim=1)
        img = self.img_in(patchify(vis, cfg.patch))

        txt_rope, img_rope = self._rope_tables(tokens.shape[1], tuple(all_ids))
        for block in self.blocks:
            txt, img = block(txt, img, temb, txt_rope, img_rope)

        shift, scale = self.mod_out(nn.functional.silu(temb)).chunk(2, dim=-1)
        img = self.norm_out(img) * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)
        out = self.proj_out(img)
        if z_cond is not None:
            tokens_per_layer = out.shape[1] // (n + 1)
            out = out[:, tokens_per_layer:]
        return unpatchify(out, n, c, cfg.latent_size, cfg.patch)


def training_step(model: VldMmdit, batch: FlowBatch) -> torch.Tensor:
    """Velocity-regression MSE for one batch (returns the graphed scalar)."""
    pred = model(batch.x_t, batch.t, batch.tokens, z_cond=batch.z_cond,
                 layer_ids=batch.layer_ids)
    loss = nn.functional.mse_loss(pred, velocity_target(batch))
    if not torch.isfinite(loss):
        raise DivergenceError("non-finite velocity loss")
    return loss


def sample(
    model,
    n_layers: int,
    tokens: torch.Tensor,
    z_cond: torch.Tensor | None = None,
    steps: int = 50,
    layer_ids: tuple[int, ...] | None = None,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    latent_shape: tuple[int, int, int] | None = None,
) -> torch.Tensor:
    """Euler-integrate dx/dt = v(x, t) from t=0 (pure noise) to t=1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if noise is None:
        if latent_shape is None:
            cfg = model.config
            latent_shape = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        shape = (tokens.shape[0], n_layers, *latent_shape)
        noise = torch.randn(shape, generator=generator)
    x = noise.clone()
    dt = 1.0 / steps
    with torch.no_grad():
        for i in range(steps):
            t = torch.full((x.shape[0],), i * dt, dtype=x.dtype)
            v = model(x, t, tokens, z_cond=z_cond, layer_ids=layer_ids)
            x = x + v * dt
    return x


# --------------------------------------------------------------------------
# Latent corpus and multi-stage training
# --------------------------------------------------------------------------

class TaskKind(Enum):
    T2RGB = "t2rgb"
    T2RGBA = "t2rgba"
    T2MULTI_RGBA = "t2multi"
    I2MULTI_RGBA = "i2multi"


@dataclass
class LatentCorpus:
    """Mean latents for a sample corpus, normalized to roughly unit scale."""

    layer_latents: list[torch.Tensor]  # per sample: (N_i, c, h, w)
    composite_latents: list[torch.Tensor]  # per sample: (c, h, w)
    captions: list[torch.Tensor]  # (T,) long
    layer_captions: list[list[torch.Tensor]]
    shift: float
    scale: float
    groups: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.groups:
            for i, latents in enumerate(self.layer_latents):
                self.groups.setdefault(latents.shape[0], []).append(i)

    def normalize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.shift) / self.scale

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.scale + self.shift


def prepare_latent_corpus(
    samples: list[LayeredSample],
    vae_model: ConvAutoencoder,
    vocab: Vocabulary,
    text_len: int = 12,
) -> LatentCorpus:
    layer_latents = []
    composite_latents = []
    captions = []
    layer_captions = []
    with torch.no_grad():
        for i, s in enumerate(samples):
            stack = torch.stack(
                [image_to_tensor(layer, 4) for layer in s.stack.layers]
            )
            layer_latents.append(vae_model.encode(stack))
            comp = image_to_tensor(s.composite, 4).unsqueeze(0)
            composite_latents.append(vae_model.encode(comp)[0])
            caption = s.caption or ""
            captions.append(vocab.encode(caption, text_len))
            uid = caption.split()[0] if caption.startswith("uid") else ""
            layer_captions.append(
                [
                    vocab.encode(f"{uid} layer{j}".strip(), text_len)
                    for j in range(stack.shape[0])
                ]
            )
    flat = torch.cat([z.flatten() for z in layer_latents]
                     + [z.flatten() for z in composite_latents])
    shift = float(flat.mean())
    scale = float(flat.std()) or 1.0
    return LatentCorpus(
        layer_latents=[(z - shift) / scale for z in layer_latents],
        composite_latents=[(z - shift) / scale for z in composite_latents],
        captions=captions,
        layer_captions=layer_captions,
        shift=shift,
        scale=scale,
    )


@dataclass(frozen=True)
class CurriculumConfig:
    stage1_steps: int = 1000
    stage2_steps: int = 1200
    stage3_steps: int = 5000
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0
    text_len: int = 12
    max_layers: int = 8
    t_mu: float = 0.0
    t_sigma: float = 1.0
    val_every: int = 300
    skip_stage2: bool = False
    width: int = 128
    depth: int = 4
    heads: int = 4


@dataclass
class StageReport:
    stage: str
    tasks: list[str]
    steps: int
    history: list[dict]
    val_history: list[dict]

    @property
    def initial_loss(self) -> float:
        return self.history[0]["loss"]

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"]


@dataclass
class CurriculumResult:
    model: VldMmdit
    config: CurriculumConfig
    reports: list[StageReport]
    corpus: LatentCorpus
    snapshots: dict[str, dict]  # stage name -> state_dict copy (cpu tensors)


def _pick_group(corpus: LatentCorpus, generator: torch.Generator) -> int:
    sizes = {n: len(idx) for n, idx in corpus.groups.items()}
    total = sum(sizes.values())
    r = int(torch.randint(total, (1,), generator=generator))
    for n in sorted(sizes):
        r -= sizes[n]
        if r < 0:
            return n
    return max(sizes)


def make_task_batch(
    corpus: LatentCorpus,
    task: TaskKind,
    batch_size: int,
    generator: torch.Generator,
    t_mu: float = 0.0,
    t_sigma: float = 1.0,
) -> FlowBatch:
    """Assemble a same-layer-count batch for one curriculum task."""
    if task in (TaskKind.T2RGB, TaskKind.T2RGBA):
        picks = torch.randint(len(corpus.captions), (batch_size,), generator=generator)
        if task is TaskKind.T2RGB:
            x0 = torch.stack([corpus.composite_latents[i] for i in picks]).unsqueeze(1)
            tokens = torch.stack([corpus.captions[i] for i in picks])
        else:
            x0_items, token_items = [], []
            for i in picks:
                n = corpus.layer_latents[i].shape[0]
                j = int(torch.randint(n, (1,), generator=generator))
                x0_items.append(corpus.layer_latents[i][j])
                token_items.append(corpus.layer_captions[i][j])
            x0 = torch.stack(x0_items).unsqueeze(1)
            tokens = torch.stack(token_items)
        return make_flow_batch(x0, tokens, generator, layer_ids=(0,),
                               t_mu=t_mu, t_sigma=t_sigma)

    n = _pick_group(corpus, generator)
    group = corpus.groups[n]
    picks = [group[int(i)] for i in
             torch.randint(len(group), (batch_size,), generator=generator)]
    tokens = torch.stack([corpus.captions[i] for i in picks])
    layers = torch.stack([corpus.layer_latents[i] for i in picks])
    comps = torch.stack([corpus.composite_latents[i] for i in picks])
    if task is TaskKind.T2MULTI_RGBA:
        # composite is generated jointly at the reserved slot -1
        x0 = torch.cat([comps.unsqueeze(1), layers], dim=1)
        return make_flow_batch(x0, tokens, generator,
                               layer_ids=(-1,) + tuple(range(n)),
                               t_mu=t_mu, t_sigma=t_sigma)
    if task is TaskKind.I2MULTI_RGBA:
        return make_flow_batch(layers, tokens, generator, z_cond=comps,
                               layer_ids=tuple(range(n)),
                               t_mu=t_mu, t_sigma=t_sigma)
    raise ValueError(f"unhandled task {task}")


_STAGE_TASKS: dict[str, list[TaskKind]] = {
    "stage1": [TaskKind.T2RGB, TaskKind.T2RGBA],
    "stage2": [TaskKind.T2MULTI_RGBA],
    "stage3": [TaskKind.I2MULTI_RGBA],
}


def validation_loss(
    model: VldMmdit,
    corpus: LatentCorpus,
    tasks: list[TaskKind],
    config: CurriculumConfig,
    n_batches: int = 4,
    seed: int = 12345,
) -> float:
    """Velocity MSE over fresh (seeded) noise and timestep draws."""
    generator = torch.Generator().manual_seed(seed)
    losses = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for b in range(n_batches):
            task = tasks[b % len(tasks)]
            batch = make_task_batch(corpus, task, config.batch_size, generator,
                                    config.t_mu, config.t_sigma)
            pred = model(batch.x_t, batch.t, batch.tokens, z_cond=batch.z_cond,
                         layer_ids=batch.layer_ids)
            losses.append(float(nn.functional.mse_loss(pred, velocity_target(batch))))
    if was_training:
        model.train()
    return sum(losses) / len(losses)


def run_stage(
    model: VldMmdit,
    corpus: LatentCorpus,
    stage: str,
    steps: int,
    config: CurriculumConfig,
    stage_seed: int,
) -> StageReport:
    tasks = _STAGE_TASKS[stage]
    generator = torch.Generator().manual_seed(stage_seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    history: list[dict] = []
    val_history: list[dict] = []
    model.train()
    for step in range(steps):
        task = tasks[int(torch.randint(len(tasks), (1,), generator=generator))]
        batch = make_task_batch(corpus, task, config.batch_size, generator,
                                config.t_mu, config.t_sigma)
        loss = training_step(model, batch)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        value = float(loss)
        if not math.isfinite(value):
            raise DivergenceError(f"{stage} diverged at step {step}")
        if step == 0 or (step + 1) % 50 == 0 or step == steps - 1:
            history.append({"step": step, "loss": value, "task": task.value})
        if (step + 1) % config.val_every == 0 or step == steps - 1:
            val_history.append(
                {
                    "step": step + 1,
                    "val_loss": validation_loss(model, corpus, tasks, config),
                }
            )
    return StageReport(
        stage=stage,
        tasks=[t.value for t in tasks],
        steps=steps,
        history=history,
        val_history=val_history,
    )


def run_curriculum(
    samples: list[LayeredSample],
    vae_model: ConvAutoencoder,
    config: CurriculumConfig = CurriculumConfig(),
    vocab: Vocabulary | None = None,
) -> CurriculumResult:
    """Train the decomposer through the staged task schedule.

    Stage 1 adapts to the shared latent space on single-image tasks, stage 2
    introduces the layer dimension via text-to-multilayer with the composite
    at slot -1, and stage 3 conditions on the composite latent to perform
    decomposition.  ``skip_stage2`` supports the ablation comparison.
    """
    vocab = vocab or Vocabulary()
    torch.manual_seed(config.seed)
    corpus = prepare_latent_corpus(samples, vae_model, vocab, config.text_len)
    model_config = ModelConfig(
        vocab_size=len(vocab),
        width=config.width,
        depth=config.depth,
        heads=config.heads,
        max_layers=config.max_layers,
        text_len=config.text_len,
        latent_channels=corpus.layer_latents[0].shape[1],
        latent_size=corpus.layer_latents[0].shape[2],
    )
    model = VldMmdit(model_config)

    schedule = [("stage1", config.stage1_steps), ("stage2", config.stage2_steps),
                ("stage3", config.stage3_steps)]
    if config.skip_stage2:
        schedule = [s for s in schedule if s[0] != "stage2"]

    reports = []
    snapshots: dict[str, dict] = {}
    for index, (stage, steps) in enumerate(schedule):
        report = run_stage(model, corpus, stage, steps, config,
                           stage_seed=config.seed + 1000 * (index + 1))
        reports.append(report)
        snapshots[stage] = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return CurriculumResult(
        model=model, config=config, reports=reports, corpus=corpus,
        snapshots=snapshots,
    )
