"""Binary checkpoints: config header + named float64 tensors, little-endian.

Layout: magic ``TPCK``, format version (u32 LE), header length (u64 LE),
UTF-8 JSON header, then raw tensor bytes in manifest order.  The header
carries the model config, the vocabulary hash, the tensor manifest, and
optimizer step counts; loading verifies magic, version, exact byte length,
and (when requested) the vocabulary hash.  Saving the same state twice
produces identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import CheckpointError
from .model import AdamState, ModelConfig, PolicyModel
from .objectives import EdgeProjections
from .vocab import ToolVocabulary

__all__ = [
    "CHECKPOINT_FORMAT_VERSION",
    "CheckpointData",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "projections_from_checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1
_MAGIC = b"TPCK"


@dataclass
class CheckpointData:
    model_config: ModelConfig
    vocab_hash: str
    params: dict[str, Tensor]
    optimizer: AdamState


def _tensor_bytes(t: Tensor) -> bytes:
    arr = t.detach().cpu().numpy().astype("<f8", copy=False)
    return np.ascontiguousarray(arr).tobytes()


def save_checkpoint(
    path: str | Path,
    model_config: ModelConfig,
    params: dict[str, Tensor],
    optimizer: AdamState | None,
    vocab_hash: str,
) -> None:
    """Write parameters (and optimizer moments, if any) to ``path``."""
    optimizer = optimizer or AdamState()
    tensors: dict[str, Tensor] = dict(params)
    for name, t in optimizer.m.items():
        tensors[f"opt.m.{name}"] = t
    for name, t in optimizer.v.items():
        tensors[f"opt.v.{name}"] = t
    manifest = [
        {"name": name, "shape": list(t.shape)} for name, t in tensors.items()
    ]
    header = {
        "model_config": dataclasses.asdict(model_config),
        "vocab_hash": vocab_hash,
        "tensors": manifest,
        "optimizer_steps": dict(optimizer.step),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in tensors:
            fh.write(_tensor_bytes(tensors[name]))


def load_checkpoint(path: str | Path, expected_vocab_hash: str | None = None) -> CheckpointData:
    """Read a checkpoint, verifying structure and optional vocabulary hash."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    vocab_hash = header["vocab_hash"]
    if expected_vocab_hash is not None and vocab_hash != expected_vocab_hash:
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch "
            f"(checkpoint {vocab_hash[:12]}..., expected {expected_vocab_hash[:12]}...)"
        )
    offset = 16 + header_len
    tensors: dict[str, Tensor] = {}
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        count = 1
        for s in shape:
            count *= s
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data at {rec['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[rec["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    params: dict[str, Tensor] = {}
    optimizer = AdamState(step=dict(header.get("optimizer_steps", {})))
    for name, t in tensors.items():
        if name.startswith("opt.m."):
            optimizer.m[name[6:]] = t
        elif name.startswith("opt.v."):
            optimizer.v[name[6:]] = t
        else:
            params[name] = t
    cfg = ModelConfig(**header["model_config"])
    return CheckpointData(
        model_config=cfg, vocab_hash=vocab_hash, params=params, optimizer=optimizer
    )


def model_from_checkpoint(ckpt: CheckpointData, vocab: ToolVocabulary) -> PolicyModel:
    """Rebuild a PolicyModel from checkpoint tensors (hash already checked)."""
    if vocab.content_hash() != ckpt.vocab_hash:
        raise CheckpointError("vocabulary does not match the checkpoint hash")
    model = PolicyModel(ckpt.model_config)
    own = model.named_parameter_dict()
    with torch.no_grad():
        for name, p in own.items():
            src = ckpt.params.get(name)
            if src is None:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            if tuple(src.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"parameter {name!r} has shape {tuple(src.shape)}, "
                    f"expected {tuple(p.shape)}"
                )
            p.copy_(src)
    return model


def projections_from_checkpoint(ckpt: CheckpointData) -> EdgeProjections | None:
    """Rebuild edge projections when the checkpoint carries them."""
    w_h = ckpt.params.get("proj.w_h")
    w_e = ckpt.params.get("proj.w_e")
    if w_h is None or w_e is None:
        return None
    proj = EdgeProjections(hidden_dim=w_h.shape[1], projection_dim=w_h.shape[0])
    with torch.no_grad():
        proj.w_h.copy_(w_h)
        proj.w_e.copy_(w_e)
    return proj
