"""Checkpoint archive shared by the autoencoder and the diffusion model.

Format: a standard NPZ archive (zip of NPY files, one per named tensor, so
shapes and dtypes are self-describing) plus a reserved ``__meta__`` entry
holding a JSON document with ``format_version`` and caller metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, np.ndarray | torch.Tensor],
    meta: dict | None = None,
) -> None:
    arrays = {}
    for name, value in tensors.items():
        if name == "__meta__":
            raise ValueError("'__meta__' is a reserved entry name")
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arrays[name] = np.asarray(value)
    payload = {"format_version": FORMAT_VERSION, "meta": meta or {}}
    arrays["__meta__"] = np.array(json.dumps(payload, sort_keys=True))
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive:
            raise ValueError(f"{path}: not a layerlab checkpoint (missing __meta__)")
        payload = json.loads(str(archive["__meta__"]))
        if payload.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format version "
                f"{payload.get('format_version')}"
            )
        tensors = {k: archive[k] for k in archive.files if k != "__meta__"}
    return tensors, payload["meta"]


def save_module(path: str | Path, module: torch.nn.Module, meta: dict | None = None) -> None:
    save_checkpoint(path, dict(module.state_dict()), meta)


def load_into_module(path: str | Path, module: torch.nn.Module) -> dict:
    tensors, meta = load_checkpoint(path)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    module.load_state_dict(state)
    return meta
