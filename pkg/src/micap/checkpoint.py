"""Binary checkpoint codec.

Layout::

    b"MICAP-CKPT-1"            12-byte magic
    uint64 little-endian        metadata length in bytes
    metadata                    UTF-8 JSON, keys sorted
    payload                     little-endian float64, parameters in manifest order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointVersionError, NotACheckpointError, PayloadLengthError, ShapeManifestError

MAGIC = b"MICAP-CKPT-1"
MAGIC_FAMILY = b"MICAP-CKPT-"


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray]  # ordered as the manifest

    def to_bytes(self) -> bytes:
        manifest = [{"name": n, "shape": list(a.shape)} for n, a in self.tensors.items()]
        meta = dict(self.metadata, parameters=manifest)
        meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.tensors.values())
        return MAGIC + struct.pack("<Q", len(meta_bytes)) + meta_bytes + payload

    @classmethod
    def from_model(cls, model: torch.nn.Module, metadata: dict) -> "Checkpoint":
        tensors = {n: p.detach().cpu().numpy().astype("<f8", copy=True)
                   for n, p in model.named_parameters()}
        return cls(dict(metadata), tensors)

    def load_into(self, model: torch.nn.Module) -> None:
        params = dict(model.named_parameters())
        if list(params) != list(self.tensors):
            raise ShapeManifestError("parameter names in checkpoint do not match the model")
        with torch.no_grad():
            for name, arr in self.tensors.items():
                p = params[name]
                if tuple(p.shape) != arr.shape:
                    raise ShapeManifestError(f"{name}: checkpoint shape {arr.shape} != model {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr.astype(np.float64)))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    head = data[:len(MAGIC)]
    if not head.startswith(MAGIC_FAMILY):
        raise NotACheckpointError(f"{source}: not a checkpoint (bad magic {head[:16]!r})")
    if head != MAGIC:
        raise CheckpointVersionError(f"{source}: checkpoint version {head!r} != {MAGIC!r}")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise PayloadLengthError(f"{source}: file ends inside the header")
    (meta_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + meta_len:
        raise PayloadLengthError(f"{source}: file ends inside the metadata")
    try:
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        manifest = meta.pop("parameters")
        shapes = [(m["name"], tuple(int(d) for d in m["shape"])) for m in manifest]
    except (ValueError, KeyError, TypeError) as exc:
        raise ShapeManifestError(f"{source}: unreadable parameter manifest ({exc})") from exc
    pos += meta_len
    sizes = [int(np.prod(s, dtype=np.int64)) for _, s in shapes]
    expected = 8 * sum(sizes)
    if len(data) - pos != expected:
        raise PayloadLengthError(
            f"{source}: payload length mismatch ({len(data) - pos} bytes, manifest needs {expected})")
    flat = np.frombuffer(data, dtype="<f8", offset=pos, count=sum(sizes))
    tensors, off = {}, 0
    for (name, shape), n in zip(shapes, sizes):
        tensors[name] = flat[off:off + n].reshape(shape).copy()
        off += n
    return Checkpoint(meta, tensors)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))
