"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"SGAITCKP"
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON (sorted keys): config, phase, step,
               and the block manifest [{name, shape, dtype}, ...]
    blocks     concatenated tensors; floating blocks as float64, integer
               blocks as int64, in manifest order
    crc32      uint32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .errors import CorruptCheckpoint, ShapeMismatch, VersionMismatch

MAGIC = b"SGAITCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    config: dict
    step: int
    phase: str
    state: dict[str, torch.Tensor] = field(default_factory=dict)

    def module_state(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.state.items() if k.startswith(p)}


def collect_state(modules: Mapping[str, nn.Module]) -> dict[str, torch.Tensor]:
    state = {}
    for prefix, module in modules.items():
        for k, v in module.state_dict().items():
            state[f"{prefix}.{k}"] = v
    return state


def save_checkpoint(path: str | Path, modules: Mapping[str, nn.Module] | None = None, *,
                    config: dict, step: int, phase: str,
                    state: Mapping[str, torch.Tensor] | None = None) -> Path:
    """Write ``modules`` (or a ready-made flat ``state``) to ``path``."""
    if state is None:
        state = collect_state(modules or {})
    manifest, chunks = [], []
    for name, t in state.items():
        t = t.detach().cpu()
        if t.is_floating_point():
            arr = t.to(torch.float64).numpy().astype("<f8", copy=False)
        else:
            arr = t.to(torch.int64).numpy().astype("<i8", copy=False)
        manifest.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")})
        chunks.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps({"config": config, "phase": phase, "step": int(step), "blocks": manifest},
                        sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + 4:
        raise CorruptCheckpoint(f"{path}: file too short ({len(raw)} bytes)")
    magic, version, hdr_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {magic!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or modified file)")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + hdr_len])
    except ValueError as e:
        raise CorruptCheckpoint(f"{path}: unreadable header") from e
    offset = _PREFIX.size + hdr_len
    state = {}
    for block in header["blocks"]:
        count = int(np.prod(block["shape"], dtype=np.int64))
        dt = "<i8" if block["dtype"].startswith(("int", "uint", "bool")) else "<f8"
        nbytes = 8 * count
        if offset + nbytes > len(body):
            raise CorruptCheckpoint(f"{path}: block {block['name']} runs past end of file")
        arr = np.frombuffer(body, dtype=dt, count=count, offset=offset).reshape(block["shape"])
        offset += nbytes
        state[block["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, block["dtype"]))
    if offset != len(body):
        raise CorruptCheckpoint(f"{path}: {len(body) - offset} trailing bytes")
    return Checkpoint(header["config"], header["step"], header["phase"], state)


def restore_module(module: nn.Module, state: Mapping[str, torch.Tensor]) -> None:
    """Copy ``state`` into ``module`` after checking names and shapes exactly."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise ShapeMismatch(f"parameter names differ; missing={missing[:5]} unexpected={extra[:5]}")
    for k, v in own.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise ShapeMismatch(f"{k}: checkpoint shape {tuple(state[k].shape)} != model {tuple(v.shape)}")
    module.load_state_dict({k: state[k].to(own[k].dtype) for k in own})
