"""Flat tensor container used for model checkpoints and captured attention features.

Layout: magic bytes ``VSPCKPT1``, a 4-byte little-endian unsigned header
length, a UTF-8 JSON header, then the raw little-endian row-major float32
payloads concatenated in header order. The header carries a ``tensors`` list
(name / shape / dtype per entry) plus a free-form ``meta`` dict for small
non-tensor state (model hyperparameters, training step, ...).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import torch

from .numerics import Tensor, require_finite

MAGIC = b"VSPCKPT1"
_DTYPES = {"f32": torch.float32}


def save_tensors(path, tensors: Mapping[str, Tensor], meta: Optional[dict] = None) -> None:
    """Write named tensors (cast to float32) plus an optional JSON-able meta dict."""
    entries = []
    payloads = []
    for name, tensor in tensors.items():
        if not isinstance(name, str) or not name:
            raise ValueError(f"tensor name must be a nonempty string, got {name!r}")
        t = torch.as_tensor(tensor)
        if t.ndim < 1 or any(s <= 0 for s in t.shape):
            raise ValueError(f"tensor {name!r} must have positive extents, got {tuple(t.shape)}")
        require_finite(name, t)
        entries.append({"name": name, "shape": list(t.shape), "dtype": "f32"})
        payloads.append(t.detach().to(torch.float32).contiguous().numpy().tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_tensors(path):
    """Read a container; returns (dict of name -> float32 tensor, meta dict)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC.decode()} checkpoint")
    (header_len,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    header_end = len(MAGIC) + 4 + header_len
    if header_end > len(raw):
        raise ValueError(f"{path}: truncated header")
    header = json.loads(raw[len(MAGIC) + 4 : header_end].decode("utf-8"))
    tensors = {}
    offset = header_end
    for entry in header["tensors"]:
        name, shape, dtype = entry["name"], entry["shape"], entry["dtype"]
        if dtype not in _DTYPES:
            raise ValueError(f"{path}: unsupported dtype {dtype!r} for {name!r}")
        numel = 1
        for s in shape:
            if s <= 0:
                raise ValueError(f"{path}: bad extent {s} in {name!r}")
            numel *= s
        nbytes = numel * 4
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated payload for {name!r}")
        flat = torch.frombuffer(bytearray(raw[offset : offset + nbytes]), dtype=_DTYPES[dtype])
        tensors[name] = flat.reshape(shape).clone()
        require_finite(name, tensors[name])
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payloads")
    return tensors, header.get("meta", {})


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_model(path, model, extra_meta: Optional[dict] = None) -> None:
    """Persist a model plus its construction hyperparameters."""
    from dataclasses import asdict

    meta = {"model_spec": asdict(model.spec)}
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, dict(model.state_dict()), meta)


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model in eval mode, meta)."""
    from .unet import ModelSpec, UNet

    tensors, meta = load_tensors(path)
    if "model_spec" not in meta:
        raise ValueError(f"{path}: checkpoint lacks model hyperparameters")
    spec_dict = dict(meta["model_spec"])
    for key in ("channel_mult", "attention_resolutions"):
        spec_dict[key] = tuple(spec_dict[key])
    model = UNet(ModelSpec(**spec_dict))
    model.load_state_dict(tensors, strict=True)
    model.eval()
    return model, meta
