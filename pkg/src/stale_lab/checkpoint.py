"""Flat named-tensor container: ``<stem>.json`` manifest plus ``<stem>.bin`` little-endian payload."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_tensors(tensors: dict[str, torch.Tensor], path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {dtype}")
        raw = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    manifest = {"tensors": entries, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path.with_suffix(".json")


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out, manifest.get("meta", {})
