"""Single-file checkpoint container with checksum integrity.

Layout: magic, version, little-endian u64 header length, JSON header
(metadata plus per-tensor name/dtype/shape/offset records), raw tensor bytes,
then a sha256 over everything before the digest. Round-trips are bit-exact.

Adapter tensors of a LoRA-adapted model are stored under
``lora/<target_name>/A`` and ``lora/<target_name>/B``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError, ValidationError

_MAGIC = b"SEGKDCKPT\x00"
_VERSION = 1


@dataclass
class CheckpointBundle:
    """Named parameter map plus free-form metadata."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        fixed = {}
        for name, arr in self.tensors.items():
            a = np.asarray(arr)
            fixed[name] = np.ascontiguousarray(a)
        self.tensors = fixed

    @classmethod
    def from_state_dict(cls, state: dict[str, torch.Tensor], metadata: dict | None = None):
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in state.items()}
        return cls(tensors, dict(metadata or {}))

    def to_state_dict(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}


def save_checkpoint(bundle: CheckpointBundle, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    blobs = []
    offset = 0
    for name in sorted(bundle.tensors):
        arr = bundle.tensors[name]
        raw = arr.tobytes(order="C")
        records.append(
            {
                "name": name,
                "dtype": np.lib.format.dtype_to_descr(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"metadata": bundle.metadata, "tensors": records}, sort_keys=True
    ).encode()
    body = b"".join(
        [_MAGIC, _VERSION.to_bytes(2, "little"), len(header).to_bytes(8, "little"), header]
        + blobs
    )
    digest = hashlib.sha256(body).digest()
    path.write_bytes(body + digest)


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(_MAGIC) + 2 + 8 + 32:
        raise IntegrityError(f"checkpoint too short: {path}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"checksum mismatch (corrupt or truncated file): {path}")
    if body[: len(_MAGIC)] != _MAGIC:
        raise IntegrityError(f"bad magic, not a checkpoint: {path}")
    pos = len(_MAGIC)
    version = int.from_bytes(body[pos : pos + 2], "little")
    if version != _VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}: {path}")
    pos += 2
    hlen = int.from_bytes(body[pos : pos + 8], "little")
    pos += 8
    header = json.loads(body[pos : pos + hlen].decode())
    data_start = pos + hlen
    tensors = {}
    for rec in header["tensors"]:
        start = data_start + rec["offset"]
        chunk = body[start : start + rec["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        tensors[rec["name"]] = arr.copy()
    return CheckpointBundle(tensors, header["metadata"])


@dataclass
class PartialLoadReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (name, reason)


def load_pretrained_partial(target: torch.nn.Module, bundle: CheckpointBundle) -> PartialLoadReport:
    """Copy every name+shape-matched tensor into ``target``; report the rest.

    Shape-mismatched entries (for example positional embeddings recorded at a
    different token count) and unknown names are skipped, never partially
    copied, and never alter the target.
    """
    report = PartialLoadReport()
    state = target.state_dict()
    with torch.no_grad():
        for name in sorted(bundle.tensors):
            if name not in state:
                report.skipped.append((name, "unknown name"))
                continue
            src = bundle.tensors[name]
            dst = state[name]
            if tuple(src.shape) != tuple(dst.shape):
                report.skipped.append(
                    (name, f"shape mismatch: checkpoint {tuple(src.shape)} vs model {tuple(dst.shape)}")
                )
                continue
            dst.copy_(torch.from_numpy(src.copy()).to(dst.dtype))
            report.loaded.append(name)
    return report


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable config mapping."""
    try:
        blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    except TypeError as exc:
        raise ValidationError(f"config is not JSON-serializable: {exc}") from exc
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
