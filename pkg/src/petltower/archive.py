"""Binary weight archives.

Layout: 6-byte magic ``UPTWR1``, little-endian u32 header length, UTF-8 JSON
header, then a payload of concatenated little-endian float64 buffers. The
header carries the archive kind, architecture fingerprint, a payload
checksum, optional tuning-module settings, and a manifest of
(name, shape, trainable flag, byte offset) sorted by tensor name.

Round trips are value-exact; loading verifies magic and checksum, and model
assembly verifies fingerprints.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptArchiveError, FingerprintMismatchError
from .tensor import ParamTensor

MAGIC = b"UPTWR1"
KINDS = ("backbone", "delta", "merged")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint_of(config_dict: dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode("utf-8")).hexdigest()


@dataclass
class Archive:
    kind: str
    fingerprint: str
    tensors: dict[str, np.ndarray]
    trainable: dict[str, bool]
    backbone_fingerprint: str | None = None
    merged: bool = False
    petl: dict | None = None
    meta: dict = field(default_factory=dict)


def save_archive(
    path: str | Path,
    tensors: dict[str, ParamTensor] | dict[str, np.ndarray],
    *,
    kind: str,
    fingerprint: str,
    backbone_fingerprint: str | None = None,
    merged: bool = False,
    petl: dict | None = None,
    trainable: dict[str, bool] | None = None,
    meta: dict | None = None,
) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown archive kind {kind!r}")
    arrays: dict[str, np.ndarray] = {}
    flags: dict[str, bool] = {}
    for name, t in tensors.items():
        if isinstance(t, ParamTensor):
            arrays[name] = t.value
            flags[name] = t.trainable
        else:
            arrays[name] = np.asarray(t, dtype=np.float64)
            flags[name] = bool(trainable.get(name, False)) if trainable else False

    manifest = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "trainable": flags[name],
                "offset": len(payload),
            }
        )
        payload.extend(arr.tobytes())

    header = {
        "kind": kind,
        "fingerprint": fingerprint,
        "backbone_fingerprint": backbone_fingerprint,
        "merged": merged,
        "petl": petl,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        "manifest": manifest,
        "meta": meta or {},
    }
    header_bytes = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_archive(path: str | Path) -> Archive:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptArchiveError(f"cannot read archive {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptArchiveError(f"{path}: bad magic, not a weight archive")
    (header_len,) = struct.unpack("<I", blob[len(MAGIC) : len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    if header_start + header_len > len(blob):
        raise CorruptArchiveError(f"{path}: truncated header")
    try:
        header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchiveError(f"{path}: unreadable header: {exc}") from exc

    payload = blob[header_start + header_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptArchiveError(f"{path}: payload checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    trainable: dict[str, bool] = {}
    for row in header["manifest"]:
        shape = tuple(row["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = row["offset"]
        end = start + count * 8
        if end > len(payload):
            raise CorruptArchiveError(f"{path}: tensor {row['name']} exceeds payload")
        arr = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
        tensors[row["name"]] = arr
        trainable[row["name"]] = bool(row["trainable"])

    return Archive(
        kind=header["kind"],
        fingerprint=header["fingerprint"],
        tensors=tensors,
        trainable=trainable,
        backbone_fingerprint=header.get("backbone_fingerprint"),
        merged=bool(header.get("merged", False)),
        petl=header.get("petl"),
        meta=header.get("meta", {}),
    )


def require_fingerprint(archive: Archive, expected: str, what: str) -> None:
    if archive.fingerprint != expected:
        raise FingerprintMismatchError(
            f"{what}: archive fingerprint {archive.fingerprint[:12]}... does not match "
            f"expected {expected[:12]}..."
        )
