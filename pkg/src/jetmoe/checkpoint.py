"""Versioned checkpoint files.

Layout::

    JETMOE-CKPT <version> <manifest bytes> <manifest sha256>\\n
    <manifest: UTF-8 JSON, sorted keys>
    <payload: raw little-endian tensor bytes>

The manifest lists every tensor (name, group, shape, dtype, byte offset,
byte length) plus the model config, optimizer scalars, RNG state, free-form
``extra`` metadata, and a SHA-256 of the payload. Groups are ``param``,
``adam_m`` and ``adam_v``.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ChecksumError, CorruptManifestError, TruncatedPayloadError,
                     VersionMismatchError)
from .model import JetMoeModel, ModelConfig
from .ndauto import Tensor
from .optim import AdamW, AdamWState

FORMAT_VERSION = 1
MAGIC = b"JETMOE-CKPT"


@dataclass
class Checkpoint:
    model: JetMoeModel
    optimizer: AdamW | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def encode_checkpoint(model: JetMoeModel, optimizer: AdamW | None = None,
                      rng_state: dict | None = None, extra: dict | None = None) -> bytes:
    entries, chunks = [], []
    offset = 0

    def put(group: str, name: str, arr: np.ndarray) -> None:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=_le(arr.dtype)).tobytes()
        entries.append({"group": group, "name": name, "shape": list(arr.shape),
                        "dtype": _le(arr.dtype).str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for name, p in model.params.items():
        put("param", name, p.data)
    opt_meta = None
    if optimizer is not None:
        st = optimizer.state
        for name in model.params:
            if name in st.m:
                put("adam_m", name, st.m[name])
                put("adam_v", name, st.v[name])
        opt_meta = {"t": st.t, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                    "eps": optimizer.eps, "weight_decay": optimizer.weight_decay}
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": entries,
        "optimizer": opt_meta,
        "rng_state": rng_state,
        "extra": extra or {},
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    body = json.dumps(manifest, sort_keys=True, indent=1).encode()
    header = b"%s %d %d %s\n" % (MAGIC, FORMAT_VERSION, len(body), hashlib.sha256(body).hexdigest().encode())
    return header + body + payload


def save_checkpoint(path, model: JetMoeModel, optimizer: AdamW | None = None,
                    rng_state: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(model, optimizer, rng_state, extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def _parse_header(blob: bytes) -> tuple[int, int, str, int]:
    end = blob.find(b"\n", 0, 256)
    if end < 0 or not blob.startswith(MAGIC + b" "):
        raise CorruptManifestError("not a jetmoe checkpoint (bad magic line)")
    parts = blob[:end].split(b" ")
    if len(parts) != 4:
        raise CorruptManifestError("malformed checkpoint header")
    try:
        version, length = int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise CorruptManifestError("malformed checkpoint header") from exc
    return version, length, parts[3].decode("ascii", "replace"), end + 1


def decode_checkpoint(blob: bytes) -> Checkpoint:
    version, length, digest, start = _parse_header(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    body = blob[start:start + length]
    if len(body) != length or hashlib.sha256(body).hexdigest() != digest:
        raise CorruptManifestError("manifest checksum mismatch")
    try:
        manifest = json.loads(body)
        entries = manifest["tensors"]
        payload_bytes = int(manifest["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptManifestError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"manifest format version {manifest.get('format_version')}")

    payload = blob[start + length:]
    if len(payload) < payload_bytes:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, manifest expects {payload_bytes}")
    if len(payload) > payload_bytes:
        raise CorruptManifestError("trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ChecksumError("payload checksum mismatch")

    # offsets must tile the payload exactly
    cursor = 0
    for e in sorted(entries, key=lambda e: e["offset"]):
        if e["offset"] != cursor:
            raise CorruptManifestError(f"tensor {e['name']!r} offset gap/overlap at byte {cursor}")
        if np.prod(e["shape"], dtype=np.int64) * np.dtype(e["dtype"]).itemsize != e["nbytes"]:
            raise CorruptManifestError(f"tensor {e['name']!r} byte length disagrees with its shape")
        cursor += e["nbytes"]
    if cursor != payload_bytes:
        raise CorruptManifestError("manifest entries do not cover the payload")

    cfg = ModelConfig.from_dict(manifest["config"])
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in entries:
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(payload, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=e["offset"])
        arr = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
        if e["group"] not in groups:
            raise CorruptManifestError(f"unknown tensor group {e['group']!r}")
        groups[e["group"]][e["name"]] = arr

    model = JetMoeModel(cfg, {k: Tensor(v, name=k) for k, v in groups["param"].items()})
    optimizer = None
    meta = manifest.get("optimizer")
    if meta is not None:
        state = AdamWState(m=groups["adam_m"], v=groups["adam_v"], t=int(meta["t"]))
        optimizer = AdamW(beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
                          weight_decay=meta["weight_decay"], state=state)
    return Checkpoint(model, optimizer, manifest.get("rng_state"), manifest.get("extra") or {})


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
