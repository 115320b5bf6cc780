"""Directory checkpoints: ``manifest.json`` plus little-endian float32 ``tensors.bin``."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import torch

from .errors import CheckpointError

FORMAT = "lclip-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
TENSORS = "tensors.bin"
_LE_F32 = np.dtype("<f4")


def config_hash(cfg) -> str:
    """Short stable hash of a JSON-serialisable config tree."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name + ".")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, state: Mapping[str, torch.Tensor], kind: str, config: dict, seed: int,
                    extra: Optional[dict] = None) -> Path:
    """Write ``state`` in iteration order. The directory appears atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().to(torch.float64).numpy().astype(_LE_F32))
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "extra": extra or {},
        "tensors": entries,
        "total_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix="." + path.name + "."))
    try:
        (tmp / TENSORS).write_bytes(blob)
        (tmp / MANIFEST).write_text(dumps_json(manifest))
        if path.exists():
            old = path.with_name("." + path.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{mpath} not found") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mpath} is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: not an {FORMAT} manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{mpath}: format version {manifest.get('format_version')} is not the supported {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path, dtype: torch.dtype = torch.float64) -> Tuple["OrderedDict[str, torch.Tensor]", dict]:
    """Read and validate a checkpoint; returns (state, manifest)."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / TENSORS).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path / TENSORS} not found") from exc
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{TENSORS} has {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"{TENSORS} checksum mismatch")
    state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    expected = 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        if e["offset"] != expected or e["nbytes"] != 4 * n:
            raise CheckpointError(f"tensor {e['name']!r}: shape {e['shape']} disagrees with its byte range")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=n, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float64)).to(dtype)
        expected += e["nbytes"]
    if expected != len(blob):
        raise CheckpointError(f"{TENSORS} has {len(blob) - expected} trailing bytes")
    return state, manifest


def load_into(module: torch.nn.Module, state: Mapping[str, torch.Tensor]) -> None:
    """Copy ``state`` into ``module`` requiring exactly matching names and shapes."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"state mismatch: missing {missing}, unexpected {unexpected}")
    for k, v in state.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointError(f"tensor {k!r}: checkpoint shape {tuple(v.shape)} vs model {tuple(own[k].shape)}")
    with torch.no_grad():
        for k, v in state.items():
            own[k].copy_(v.to(own[k].dtype))


def save_model(path, model, seed: Optional[int] = None, extra: Optional[dict] = None) -> Path:
    from .captioner import Captioner
    from .encoder import LCLIPModel

    if isinstance(model, LCLIPModel):
        kind, cfg = "lclip", model.config()
    elif isinstance(model, Captioner):
        kind, cfg = "captioner", model.cfg.to_dict()
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    seed = cfg.get("seed", 0) if seed is None else seed
    return save_checkpoint(path, model.state_dict(), kind, cfg, seed, extra)


def load_model(path, dtype: torch.dtype = torch.float64):
    """Rebuild the model recorded in a checkpoint. Returns (model, manifest)."""
    from .captioner import Captioner, CaptionerConfig
    from .encoder import LCLIPModel

    state, manifest = load_checkpoint(path, dtype)
    kind, cfg = manifest["kind"], manifest["config"]
    if kind == "lclip":
        model = LCLIPModel.from_config(cfg, dtype=dtype)
        # the stem is frozen in every trained model
        for p in model.vision.stem.parameters():
            p.requires_grad_(False)
    elif kind == "captioner":
        model = Captioner(CaptionerConfig(**cfg), dtype=dtype)
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    load_into(model, state)
    return model, manifest
