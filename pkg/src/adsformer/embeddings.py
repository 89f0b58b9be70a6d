"""Embedding tables: trainable or frozen, with lookup, pooling and the EMBT file format.

EMBT layout (little-endian)::

    b"EMBT" | u32 version=1 | u32 vocab_size | u32 dim | u8 frozen | vocab_size*dim f32

Float64 weights are rounded to float32 on save.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, embedding_bag_mean, take_rows
from .sequences import PaddedBatch

MAGIC = b"EMBT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIB")

FLAVOR_DIMS = {"air": 256, "visual": 256, "skipgram": 64}


class EmbeddingFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class EmbeddingTable:
    weights: Tensor
    trainable: bool = True
    name: str = ""

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError(f"embedding weights must be 2-D, got {self.weights.shape}")
        self.weights.requires_grad = self.trainable
        if not self.weights.name:
            self.weights.name = self.name

    @classmethod
    def random(cls, vocab_size: int, dim: int, rng: np.random.Generator, name: str = "",
               std: float | None = None) -> "EmbeddingTable":
        """Trainable table drawn i.i.d. normal(0, 1/sqrt(dim)) unless ``std`` is given."""
        scale = 1.0 / np.sqrt(dim) if std is None else std
        return cls(Tensor(rng.normal(0.0, scale, size=(vocab_size, dim))), True, name)

    @classmethod
    def frozen(cls, weights: np.ndarray, name: str = "") -> "EmbeddingTable":
        return cls(Tensor(np.array(weights, dtype=np.float64)), False, name)

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def checksum(self) -> str:
        return hashlib.sha256(self.weights.data.tobytes()).hexdigest()


def lookup(table: EmbeddingTable, batch: PaddedBatch | np.ndarray) -> Tensor:
    """Row gather: ``[batch, M]`` indices to ``[batch, M, dim]`` vectors.

    Padded positions are gathered too (they hold the pad index); pooling
    downstream ignores them through the mask.
    """
    idx = batch.indices if isinstance(batch, PaddedBatch) else np.asarray(batch)
    if idx.size and (idx.min() < 0 or idx.max() >= table.vocab_size):
        raise IndexError(f"index {int(idx.max())} out of range for table {table.name!r} "
                         f"with {table.vocab_size} rows")
    return take_rows(table.weights, idx)


def avg_pool_sequence(table: EmbeddingTable, batch: PaddedBatch) -> Tensor:
    """Masked mean of looked-up rows; an empty sequence pools to zeros."""
    if batch.indices.size and batch.indices.max() >= table.vocab_size:
        raise IndexError(f"index {int(batch.indices.max())} out of range for table {table.name!r} "
                         f"with {table.vocab_size} rows")
    return embedding_bag_mean(table.weights, batch.indices, batch.mask)


def save_table(table: EmbeddingTable, path: str | Path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, table.vocab_size, table.dim, 0 if table.trainable else 1)
    body = table.weights.data.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_table(path: str | Path, expected_dim: int | None = None, flavor: str | None = None,
               name: str | None = None) -> EmbeddingTable:
    """Read an EMBT file as a frozen table, validating the header and length."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EmbeddingFormatError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", len(raw))
    magic, version, vocab_size, dim, _ = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported version {version}", 4)
    need = _HEADER.size + 4 * vocab_size * dim
    if len(raw) != need:
        raise EmbeddingFormatError(f"expected {need} bytes for {vocab_size}x{dim} table, got {len(raw)}",
                                   min(len(raw), need))
    if flavor is not None:
        expected_dim = FLAVOR_DIMS[flavor]
    if expected_dim is not None and dim != expected_dim:
        raise ValueError(f"{path}: table dim {dim} does not match expected {expected_dim}"
                         + (f" for flavor {flavor!r}" if flavor else ""))
    weights = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(vocab_size, dim)
    return EmbeddingTable.frozen(weights.astype(np.float64), name=name or flavor or Path(path).stem)


@dataclass
class PretrainedBundle:
    """Frozen component-two tables keyed by flavor (``air``, ``visual``, ``skipgram``)."""

    tables: dict[str, EmbeddingTable] = field(default_factory=dict)

    def __post_init__(self):
        for flavor, table in self.tables.items():
            self._validate(flavor, table)

    @staticmethod
    def _validate(flavor: str, table: EmbeddingTable) -> None:
        if flavor not in FLAVOR_DIMS:
            raise ValueError(f"unknown pretrained flavor {flavor!r}")
        if table.dim != FLAVOR_DIMS[flavor]:
            raise ValueError(f"{flavor} table has dim {table.dim}, expected {FLAVOR_DIMS[flavor]}")
        if table.trainable:
            raise ValueError(f"{flavor} table must be frozen")

    def add(self, flavor: str, table: EmbeddingTable) -> None:
        self._validate(flavor, table)
        self.tables[flavor] = table

    def __getitem__(self, flavor: str) -> EmbeddingTable:
        return self.tables[flavor]

    def __contains__(self, flavor: str) -> bool:
        return flavor in self.tables


def dump_table(table: EmbeddingTable, ids: list[str] | None = None, limit: int | None = None,
               precision: int = 6) -> str:
    """Text rendering: one ``id<TAB>v0 v1 ...`` line per row."""
    rows = table.weights.data if limit is None else table.weights.data[:limit]
    lines = []
    for i, row in enumerate(rows):
        label = ids[i] if ids is not None and i < len(ids) else str(i)
        lines.append(label + "\t" + " ".join(f"{v:.{precision}g}" for v in row))
    return "\n".join(lines)
