"""Binary checkpoint format.

Layout (all integers little-endian u32):

    magic "CFLM" | version | header_len | header JSON (UTF-8)
    | num_params | repeated: name_len, name, rank, dims..., float32 data

The header JSON carries the model shape, mechanism config, vocabulary and
role ("ar"/"nar") so a checkpoint is self-describing. Loading needs only
numpy; torch glue lives at the bottom and is imported lazily by callers
that have a model object.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import CFConfig, ModelConfig, Vocabulary, config_to_dict

MAGIC = b"CFLM"
VERSION = 1


@dataclass(frozen=True)
class CheckpointMeta:
    model: ModelConfig
    cf: CFConfig
    vocab: Vocabulary
    role: str


def _pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def save_checkpoint(
    path: str | Path,
    meta: CheckpointMeta,
    params: Mapping[str, np.ndarray],
) -> None:
    header = json.dumps(
        {
            "model": config_to_dict(meta.model),
            "cf": config_to_dict(meta.cf),
            "vocab": config_to_dict(meta.vocab),
            "role": meta.role,
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_pack_u32(VERSION))
        fh.write(_pack_u32(len(header)))
        fh.write(header)
        fh.write(_pack_u32(len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(_pack_u32(len(encoded)))
            fh.write(encoded)
            fh.write(_pack_u32(arr.ndim))
            for dim in arr.shape:
                fh.write(_pack_u32(dim))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    """Read a checkpoint with numpy only. Raises ValueError on any mismatch."""
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    meta = CheckpointMeta(
        model=ModelConfig(**header["model"]),
        cf=CFConfig(**header["cf"]),
        vocab=Vocabulary(**header["vocab"]),
        role=str(header["role"]),
    )

    params: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(count * 4), dtype="<f4")
        if data.size != count:
            raise ValueError(f"{path}: parameter {name}: shape/data mismatch")
        params[name] = data.reshape(shape).copy()
    if r.off != len(r.blob):
        raise ValueError(f"{path}: {len(r.blob) - r.off} trailing bytes")
    _check_shapes(meta, params, str(path))
    return meta, params


def _expected_shapes(meta: CheckpointMeta) -> dict[str, tuple[int, ...]]:
    m, v = meta.model, meta.vocab
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (v.total_size, m.dim),
        "norm.weight": (m.dim,),
    }
    for b in range(m.num_blocks):
        p = f"blocks.{b}."
        shapes[p + "attn_norm.weight"] = (m.dim,)
        shapes[p + "ffn_norm.weight"] = (m.dim,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w + ".weight"] = (m.dim, m.dim)
        shapes[p + "w1.weight"] = (m.ffn_hidden, m.dim)
        shapes[p + "w3.weight"] = (m.ffn_hidden, m.dim)
        shapes[p + "w2.weight"] = (m.dim, m.ffn_hidden)
    if meta.role == "ar":
        shapes["head.weight"] = (v.speech_size + 1, m.dim)
    else:
        shapes["layer_embed.weight"] = (v.num_layers, m.dim)
        for i in range(v.num_layers - 1):
            shapes[f"upper_embed.{i}.weight"] = (v.speech_size, m.dim)
            shapes[f"heads.{i}.weight"] = (v.speech_size, m.dim)
    return shapes


def _check_shapes(meta: CheckpointMeta, params: dict[str, np.ndarray], path: str) -> None:
    expected = _expected_shapes(meta)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"{path}: parameter set mismatch (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(
                f"{path}: {name} has shape {params[name].shape}, expected {shape}"
            )


# ---------------------------------------------------------------- torch glue


def save_model(path: str | Path, model, cf: CFConfig) -> None:
    """Write a live CodecLM to disk."""
    import torch

    params = {
        name: tensor.detach().cpu().to(torch.float32).numpy()
        for name, tensor in model.state_dict().items()
    }
    meta = CheckpointMeta(model=model.cfg, cf=cf, vocab=model.vocab, role=model.role)
    save_checkpoint(path, meta, params)


def load_model(path: str | Path):
    """Read a checkpoint back into a CodecLM. Returns (model, meta)."""
    import torch

    from .model import CodecLM

    meta, params = load_checkpoint(path)
    model = CodecLM(meta.model, meta.vocab, role=meta.role)
    state = {name: torch.from_numpy(arr) for name, arr in params.items()}
    model.load_state_dict(state)
    model.eval()
    return model, meta
