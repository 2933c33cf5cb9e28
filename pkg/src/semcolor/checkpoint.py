"""Single-file named-array checkpoints with a JSON manifest.

``<name>.safetensors`` holds the arrays; ``<name>.json`` lists every array's
shape, dtype and sha256 together with free-form metadata (model config,
training step, ...).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import torch
from safetensors.torch import load_file, save_file


def tensor_sha256(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def state_checksum(state: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def manifest_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path: str | Path, state: Mapping[str, torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path).with_suffix(".safetensors")
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous() for k, v in state.items()}
    save_file(tensors, str(path))
    manifest = {
        "arrays": {
            k: {"shape": list(v.shape), "dtype": str(v.dtype).removeprefix("torch."), "sha256": tensor_sha256(v)}
            for k, v in sorted(tensors.items())
        },
        "checksum": state_checksum(tensors),
        "meta": meta or {},
    }
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_checkpoint(path: str | Path, verify: bool = True) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path).with_suffix(".safetensors")
    if not path.is_file():
        raise FileNotFoundError(path)
    state = load_file(str(path))
    with open(manifest_path(path)) as fh:
        manifest = json.load(fh)
    if set(manifest["arrays"]) != set(state):
        raise ValueError(f"{path}: manifest does not match archive contents")
    if verify and manifest["checksum"] != state_checksum(state):
        raise ValueError(f"{path}: checksum mismatch")
    return state, manifest.get("meta", {})


def checkpoint_exists(path: str | Path) -> bool:
    path = Path(path).with_suffix(".safetensors")
    return path.is_file() and manifest_path(path).is_file()
