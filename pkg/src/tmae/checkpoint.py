"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic ``TMCK``
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 header length in bytes
    header        UTF-8 JSON (the plain-text config echo plus bookkeeping)
    payload       named blobs, concatenated in header order

The JSON header carries ``config`` (resolved config echo), ``epoch``,
``global_step``, ``best_loss``, ``epochs_since_improve``, ``rng_torch``
(hex-encoded torch RNG state), and ``entries``: a list of
``{name, dtype, shape, offset, nbytes}`` records with offsets relative to
the start of the payload. Parameters are stored as float32 under
``param.<dotted name>``; AdamW moments as ``opt.exp_avg.<name>`` /
``opt.exp_avg_sq.<name>``. This layout is stable across releases; bump the
version for any incompatible change.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .errors import IncompatibleCheckpoint
from .utils import atomic_write_bytes

MAGIC = b"TMCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


@dataclass
class Checkpoint:
    """In-memory checkpoint: named float arrays plus run bookkeeping."""

    config: dict[str, dict[str, Any]]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    global_step: int = 0
    best_loss: Optional[float] = None
    epochs_since_improve: int = 0
    rng_torch: Optional[bytes] = None

    def param_names(self) -> list[str]:
        return [n[len("param."):] for n in self.arrays if n.startswith("param.")]


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, array in ckpt.arrays.items():
        array = np.asarray(array)
        if array.dtype == np.float64:
            tag = "f64"
        elif np.issubdtype(array.dtype, np.floating):
            tag = "f32"
        elif np.issubdtype(array.dtype, np.integer):
            tag = "i64"
        else:
            raise ValueError(f"unsupported dtype {array.dtype} for entry {name}")
        blob = np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": tag,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        chunks.append(blob)
        offset += len(blob)
    header = {
        "format_version": VERSION,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
        "best_loss": ckpt.best_loss,
        "epochs_since_improve": ckpt.epochs_since_improve,
        "rng_torch": ckpt.rng_torch.hex() if ckpt.rng_torch else None,
        "entries": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        [_PREFIX.pack(MAGIC, VERSION, len(header_bytes)), header_bytes] + chunks
    )
    atomic_write_bytes(path, payload)


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise IncompatibleCheckpoint(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise IncompatibleCheckpoint(f"{path}: truncated")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise IncompatibleCheckpoint(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise IncompatibleCheckpoint(f"{path}: format version {version}, expected {VERSION}")
    header_end = _PREFIX.size + header_len
    try:
        header = json.loads(raw[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IncompatibleCheckpoint(f"{path}: unreadable header: {exc}") from None
    arrays = {}
    base = header_end
    for entry in header["entries"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise IncompatibleCheckpoint(f"{path}: entry {entry['name']} out of bounds")
        flat = np.frombuffer(raw[start:end], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
    rng_hex = header.get("rng_torch")
    return Checkpoint(
        config=header["config"],
        arrays=arrays,
        epoch=header["epoch"],
        global_step=header["global_step"],
        best_loss=header["best_loss"],
        epochs_since_improve=header["epochs_since_improve"],
        rng_torch=bytes.fromhex(rng_hex) if rng_hex else None,
    )


# --- model <-> checkpoint -------------------------------------------------


def arrays_from_model(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        f"param.{name}": p.detach().cpu().numpy()
        for name, p in model.named_parameters()
    }


def load_params_into_model(ckpt: Checkpoint, model: torch.nn.Module) -> None:
    """Copy ``param.*`` entries into the model; names and shapes must match."""
    params = dict(model.named_parameters())
    stored = set(ckpt.param_names())
    missing = sorted(set(params) - stored)
    extra = sorted(stored - set(params))
    if missing or extra:
        raise IncompatibleCheckpoint(
            f"parameter names differ (missing: {missing[:5]}, extra: {extra[:5]})"
        )
    with torch.no_grad():
        for name, p in params.items():
            value = ckpt.arrays[f"param.{name}"]
            if tuple(value.shape) != tuple(p.shape):
                raise IncompatibleCheckpoint(
                    f"shape mismatch for {name}: checkpoint {value.shape}, model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(value).to(p.dtype))
