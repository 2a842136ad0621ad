"""Single-file model artifacts for the screening station.

Container layout: magic bytes ``CVM1``, an 8-byte big-endian header length,
a JSON header (graph spec, tensor directory, metadata, weight-block digest),
then the raw weight block.  Loading rebuilds the graph from the embedded
spec, so an artifact is self-describing and survives roundtrips losslessly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .model import BackboneSpec, Mode, ModelHandle, TruncatedMobileNetV2

MAGIC = b"CVM1"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (np.float32, torch.float32),
    "int64": (np.int64, torch.int64),
}


class ArtifactError(RuntimeError):
    pass


class ArtifactVersionError(ArtifactError):
    pass


class ChecksumError(ArtifactError):
    pass


@dataclass(frozen=True)
class ModelArtifact:
    path: Path
    sha256: str
    size_bytes: int
    spec: BackboneSpec
    training_config_hash: str | None
    metrics: dict | None
    created_at: str


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _dtype_name(t: torch.Tensor) -> str:
    name = str(t.dtype).removeprefix("torch.")
    if name not in _DTYPES:
        raise ArtifactError(f"unsupported tensor dtype {name}")
    return name


def export(
    handle: ModelHandle,
    path: str | Path,
    training_config_hash: str | None = None,
    metrics: dict | None = None,
    channel_stats: dict | None = None,
) -> ModelArtifact:
    """Serialize weights, spec, and metadata; reports file size and digest."""
    path = Path(path)
    state = handle.module.state_dict()
    tensors = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        dtype = _dtype_name(tensor)
        arr = tensor.detach().cpu().numpy().astype(_DTYPES[dtype][0])
        raw = arr.tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    block = b"".join(blobs)
    created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    header = {
        "format_version": FORMAT_VERSION,
        "spec": handle.spec.to_dict(),
        "training_config_hash": training_config_hash,
        "metrics": metrics,
        "channel_stats": channel_stats,
        "created_at": created_at,
        "tensors": tensors,
        "weights_sha256": hashlib.sha256(block).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack(">Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(block)
    return ModelArtifact(
        path=path,
        sha256=sha256_file(path),
        size_bytes=path.stat().st_size,
        spec=handle.spec,
        training_config_hash=training_config_hash,
        metrics=metrics,
        created_at=created_at,
    )


def _read_container(path: Path) -> tuple[dict, bytes]:
    if not path.is_file():
        raise ArtifactError(f"artifact not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ArtifactError(f"{path}: not a model artifact (bad magic)")
    (header_len,) = struct.unpack(">Q", raw[4:12])
    header_end = 12 + header_len
    if header_end > len(raw):
        raise ArtifactError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt header: {exc}") from exc
    return header, raw[header_end:]


def read_artifact_header(path: str | Path) -> dict:
    header, _ = _read_container(Path(path))
    return header


def load(path: str | Path, expected_sha256: str | None = None) -> ModelHandle:
    """Rebuild an EVAL-mode model from an artifact, verifying integrity."""
    path = Path(path)
    if expected_sha256 is not None:
        actual = sha256_file(path)
        if actual != expected_sha256:
            raise ChecksumError(
                f"{path}: file digest {actual[:12]}... does not match expected "
                f"{expected_sha256[:12]}..."
            )
    header, block = _read_container(path)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ArtifactVersionError(
            f"{path}: artifact format version {version!r} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    if hashlib.sha256(block).hexdigest() != header["weights_sha256"]:
        raise ChecksumError(f"{path}: weight block digest mismatch (file tampered?)")

    spec = BackboneSpec.from_dict(header["spec"])
    module = TruncatedMobileNetV2(spec)
    state = module.state_dict()
    directory = {t["name"]: t for t in header["tensors"]}
    missing = [k for k in state if k not in directory]
    extra = [k for k in directory if k not in state]
    if missing or extra:
        raise ArtifactError(
            f"{path}: tensor directory mismatch (missing {missing[:3]}, extra {extra[:3]})"
        )
    new_state = {}
    for name, meta in directory.items():
        np_dtype, torch_dtype = _DTYPES[meta["dtype"]]
        raw = block[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(meta["shape"]).copy()
        tensor = torch.from_numpy(arr).to(torch_dtype)
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise ArtifactError(
                f"{path}: tensor {name!r} has shape {tuple(tensor.shape)}, "
                f"model expects {tuple(state[name].shape)}"
            )
        new_state[name] = tensor
    module.load_state_dict(new_state)
    module.eval()
    return ModelHandle(module=module, spec=spec, mode=Mode.EVAL)
