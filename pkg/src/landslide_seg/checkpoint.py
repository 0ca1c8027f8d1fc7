"""Directory checkpoints: ``manifest.json`` plus one raw little-endian blob per tensor.

Floating tensors are stored in their own width (``<f4`` for 32-bit runs,
``<f8`` for 64-bit runs) so a round trip is bit-exact in both modes.
"""
from __future__ import annotations

import json
import shutil
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def save_checkpoint_dir(path, tensors: Dict[str, torch.Tensor], meta: Dict[str, object]) -> Path:
    """Write atomically: build in a sibling temp dir, then swap into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "blobs").mkdir(parents=True)
    entries = []
    for i, (name, t) in enumerate(tensors.items()):
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"cannot checkpoint {name} with dtype {t.dtype}")
        code = _DTYPES[t.dtype]
        fname = f"blobs/{i:05d}.bin"
        np.ascontiguousarray(t.numpy()).astype(code, copy=False).tofile(tmp / fname)
        entries.append({"name": name, "file": fname, "shape": list(t.shape), "dtype": code})
    manifest = {"format": FORMAT_VERSION, "meta": meta, "tensors": entries}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint_dir(path) -> Tuple[Dict[str, torch.Tensor], Dict[str, object]]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.fromfile(path / e["file"], dtype=np.dtype(e["dtype"]))
        expected = int(np.prod(e["shape"])) if e["shape"] else 1
        if arr.size != expected:
            raise ValueError(f"blob for {e['name']} holds {arr.size} values, expected {expected}")
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy()).to(_TORCH[e["dtype"]])
    return tensors, manifest["meta"]
