"""Checkpoint directory: ``manifest.json`` + ``weights.bin`` (little-endian float32)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, IoFailure, MissingFile
from .unet import NetworkConfig, parameter_shapes

CHECKPOINT_VERSION = "ciscnet-ckpt-v1"


def save_checkpoint(path, params: dict, cfg: NetworkConfig, extra: dict | None = None) -> None:
    root = Path(path)
    tensors = [
        {"name": name, "shape": list(value.shape), "dtype": "float32"}
        for name, value in params.items()
    ]
    manifest = {
        "version": CHECKPOINT_VERSION,
        "byte_order": "little",
        "network": cfg.to_dict(),
        "tensors": tensors,
        "extra": extra or {},
    }
    try:
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "weights.bin", "wb") as fh:
            for value in params.values():
                fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {root}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict, NetworkConfig, dict]:
    """Return ``(params, config, extra)``; raises CheckpointError on any mismatch."""
    root = Path(path)
    mpath, wpath = root / "manifest.json", root / "weights.bin"
    if not mpath.is_file() or not wpath.is_file():
        raise MissingFile(f"checkpoint {root} needs manifest.json and weights.bin")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    try:
        cfg = NetworkConfig(**manifest["network"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad network config in checkpoint: {exc}") from exc
    expected = parameter_shapes(cfg)
    flat = np.fromfile(wpath, dtype="<f4")
    params, offset = {}, 0
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"tensor {name} has shape {shape}, network expects {expected.get(name)}")
        size = int(np.prod(shape))
        if offset + size > flat.size:
            raise CheckpointError("weights.bin is shorter than the manifest declares")
        params[name] = flat[offset : offset + size].reshape(shape).astype(np.float32)
        offset += size
    if offset != flat.size or set(params) != set(expected):
        raise CheckpointError("checkpoint tensors do not match the network layout")
    return {k: params[k] for k in expected}, cfg, manifest.get("extra", {})
