"""Checkpoint container: ``params.bin`` (raw little-endian tensors) + ``manifest.json``.

Manifest layout (format ``nestseg-checkpoint``, version 1)::

    {
      "format": "nestseg-checkpoint", "version": 1,
      "model_config": {...},            # ModelConfig.to_dict()
      "iteration": 1234, "stage": "finetune", "skull_stripped": false,
      "config_echo": {...},             # whatever config produced the run
      "tensors": [{"name", "shape", "dtype", "offset", "nbytes", "sha256"}, ...],
      "blob_sha256": "...",
      "extra": {...}                    # optimizer groups, RNG state, best record
    }

Tensor names are ``model.<param>`` for network parameters and
``optim.<param>.<slot>`` for optimizer moments.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .network import UNesT, init_icv_heads

FORMAT = "nestseg-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(ValueError):
    pass


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def write_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], manifest: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw), "sha256": _sha(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"format": FORMAT, "version": VERSION, **manifest, "tensors": entries, "blob_sha256": _sha(blob)}
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath} is not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    if _sha(blob) != manifest["blob_sha256"]:
        raise CheckpointError(f"checksum mismatch for {path / BLOB}")
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]))
    return tensors, manifest


def checkpoint_digest(path: str | Path) -> str:
    return read_manifest(path)["blob_sha256"]


def save_model(path, model: UNesT, **manifest_fields) -> Path:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    return write_checkpoint(path, tensors, {"model_config": model.cfg.to_dict(), **manifest_fields})


def model_tensors(tensors: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}


def load_model(path, dtype: torch.dtype = torch.float32) -> tuple[UNesT, dict]:
    tensors, manifest = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = UNesT(cfg)
    model.load_state_dict(model_tensors(tensors), strict=True)
    return model.to(dtype), manifest


def load_pretrained_into_finetune(path, finetune_cfg: ModelConfig, seed: int | None = None) -> tuple[UNesT, dict]:
    """Build a model with TICV/PFV heads and copy every shared parameter from ``path``.

    The new heads keep their fresh initialisation; any shape disagreement in a
    shared parameter is an error.
    """
    tensors, manifest = read_checkpoint(path)
    source = model_tensors(tensors)
    finetune_cfg = finetune_cfg.replace(icv_heads_enabled=True)
    if seed is not None:
        torch.manual_seed(seed)
    model = UNesT(finetune_cfg)
    init_icv_heads(model)
    target = model.state_dict()
    problems = []
    for name, value in target.items():
        if name.startswith(("ticv_head.", "pfv_head.")):
            continue
        if name not in source:
            problems.append(f"missing parameter {name}")
        elif tuple(source[name].shape) != tuple(value.shape):
            problems.append(f"{name}: checkpoint shape {tuple(source[name].shape)} != model shape {tuple(value.shape)}")
    unexpected = sorted(set(source) - set(target))
    problems += [f"unexpected parameter {n}" for n in unexpected]
    if problems:
        raise CheckpointError("pretrained checkpoint does not match the finetune architecture: " + "; ".join(problems))
    with torch.no_grad():
        for name, value in target.items():
            if name in source:
                value.copy_(source[name])
    return model, manifest


def parameter_checksums(model: torch.nn.Module) -> dict[str, str]:
    return {k: _sha(v.detach().cpu().contiguous().numpy().tobytes()) for k, v in model.state_dict().items()}
