"""Checkpoint files: named float64 tensor sections behind a text manifest.

Layout::

    ADSCKPT 1 sha256=<hex digest of every byte after this line>\\n
    meta <compact JSON>\\n
    section <name> <dim,dim,...|-> <byte offset> <byte length>\\n  (one per tensor; - for scalars)
    end\\n
    <concatenated little-endian float64 data>

Offsets are relative to the first byte after ``end``. Saving the result of
a load reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "ADSCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(sections: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    lines = ["meta " + json.dumps(meta or {}, sort_keys=True, separators=(",", ":"))]
    blobs, offset = [], 0
    for name, arr in sections.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"section name {name!r} must be non-empty without whitespace")
        data = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        blob = data.tobytes(order="C")
        shape = ",".join(str(s) for s in data.shape) or "-"
        lines.append(f"section {name} {shape} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    body = ("\n".join(lines) + "\n").encode("utf-8") + b"".join(blobs)
    return f"{MAGIC} {VERSION} sha256={hashlib.sha256(body).hexdigest()}\n".encode("ascii") + body


def save_checkpoint(path: str | Path, sections: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(sections, meta))


def loads_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    first, sep, body = raw.partition(b"\n")
    parts = first.decode("ascii", errors="replace").split(" ")
    if not sep or len(parts) != 3 or parts[0] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic line)")
    if parts[1] != str(VERSION):
        raise CheckpointError(f"unsupported checkpoint version {parts[1]}")
    expected = parts[2].removeprefix("sha256=")
    if hashlib.sha256(body).hexdigest() != expected:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    marker = body.find(b"\nend\n")
    if marker < 0:
        raise CheckpointError("manifest has no end line")
    manifest = body[:marker].decode("utf-8").split("\n")
    data = body[marker + len(b"\nend\n"):]
    meta: dict = {}
    sections: dict[str, np.ndarray] = {}
    for line in manifest:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "section":
            name, shape, off, length = rest.split(" ")
            off, length = int(off), int(length)
            dims = tuple(int(s) for s in shape.split(",")) if shape != "-" else ()
            if off + length > len(data) or length != 8 * int(np.prod(dims, dtype=np.int64)):
                raise CheckpointError(f"section {name} is inconsistent with the data block")
            sections[name] = np.frombuffer(data, dtype="<f8", count=length // 8, offset=off).reshape(dims).copy()
        else:
            raise CheckpointError(f"unknown manifest line {line!r}")
    return sections, meta


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads_checkpoint(Path(path).read_bytes())
