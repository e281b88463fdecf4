"""Labeled feature datasets: synthetic Gaussian clusters, splits, validation and I/O.

Features are held as float32 so that both file formats round-trip bit for bit.
All randomness goes through ``numpy.random.Generator(PCG64)``, whose streams
are identical across platforms for a given seed.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .retrieval import as_label_set

DATA_MAGIC = b"PHDATA01"
_HEADER = struct.Struct("<8sQIIQ")  # magic, n, d, reserved, label-block offset

#: Class centres are unit Gaussians times this factor. Small enough that a
#: random network does not separate the classes by itself.
DEFAULT_SEPARATION = 0.1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: tuple[frozenset[int], ...]

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float32)
        if f.ndim != 2:
            raise DatasetError(f"features must be an n x d matrix, got shape {f.shape}")
        if f.shape[0] != len(self.labels):
            raise DatasetError(f"{f.shape[0]} feature rows but {len(self.labels)} label sets")
        f.flags.writeable = False
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", tuple(as_label_set(lab) for lab in self.labels))

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.count

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabeledDataset)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels == other.labels
        )

    def subset(self, idx: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], tuple(self.labels[i] for i in idx))

    def primary_class(self) -> np.ndarray:
        """Smallest class id of each item; used to stratify splits."""
        return np.array([min(lab) for lab in self.labels], dtype=np.int64)


def validate(ds: LabeledDataset) -> None:
    bad = np.flatnonzero(~np.isfinite(ds.features).all(axis=1))
    if bad.size:
        raise DatasetError(f"non-finite feature values in row {int(bad[0])}")


def generate_synthetic(
    classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    separation: float = DEFAULT_SEPARATION,
) -> LabeledDataset:
    """Isotropic Gaussian clusters, one single-label class per cluster.

    Centres are ``separation * N(0, I)``; samples are ``centre + spread * N(0, I)``.
    Items are returned in a seeded random order so that index-based tie
    breaking in ranking carries no class information.
    """
    if classes < 2 or per_class < 2 or dim < 1:
        raise DatasetError(f"need classes >= 2, per_class >= 2, dim >= 1; got {classes}, {per_class}, {dim}")
    if not spread > 0 or not separation > 0:
        raise DatasetError("spread and separation must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = separation * rng.standard_normal((classes, dim))
    noise = rng.standard_normal((classes, per_class, dim))
    feats = (centers[:, None, :] + spread * noise).reshape(classes * per_class, dim)
    cls = np.repeat(np.arange(classes), per_class)
    perm = rng.permutation(classes * per_class)
    return LabeledDataset(feats[perm], tuple(frozenset([int(c)]) for c in cls[perm]))


@dataclass(frozen=True)
class SplitSpec:
    queries_per_class: int
    train_per_class: int
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Split:
    """Index sets into the source dataset, each sorted ascending."""

    query: np.ndarray
    train: np.ndarray
    database: np.ndarray


def split(ds: LabeledDataset, spec: SplitSpec) -> Split:
    """Per-class seeded sampling of queries and training items.

    The database is every item not chosen as a query, so training items are
    always part of it.
    """
    if spec.queries_per_class < 0 or spec.train_per_class < 0:
        raise DatasetError("per-class counts must be non-negative")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    primary = ds.primary_class()
    query, train = [], []
    for c in np.unique(primary):
        members = np.flatnonzero(primary == c)
        need = spec.queries_per_class + spec.train_per_class
        if need > members.size:
            raise DatasetError(f"class {int(c)} has {members.size} items, split needs {need}")
        perm = rng.permutation(members)
        query.extend(perm[: spec.queries_per_class].tolist())
        train.extend(perm[spec.queries_per_class : need].tolist())
    query_idx = np.array(sorted(query), dtype=np.int64)
    mask = np.ones(ds.count, dtype=bool)
    mask[query_idx] = False
    return Split(query_idx, np.array(sorted(train), dtype=np.int64), np.flatnonzero(mask))


def validate_split(ds: LabeledDataset, sp: Split) -> None:
    """Raise if training triplets are infeasible or a query has nothing relevant."""
    problems = []
    counts: dict[int, int] = {}
    for i in sp.train:
        for c in ds.labels[i]:
            counts[c] = counts.get(c, 0) + 1
    lonely = sorted(c for c, n in counts.items() if n < 2)
    if lonely:
        problems.append(f"classes with fewer than 2 training items: {lonely}")
    db_classes = set().union(*(ds.labels[i] for i in sp.database)) if sp.database.size else set()
    orphans = [int(i) for i in sp.query if not (ds.labels[i] & db_classes)]
    if orphans:
        problems.append(f"queries without a relevant database item: {orphans[:10]}")
    if problems:
        raise DatasetError("; ".join(problems))


# -- CSV ---------------------------------------------------------------------


def save_csv(ds: LabeledDataset, path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"f{j}" for j in range(ds.dim)] + ["labels"])
    for row, lab in zip(ds.features.tolist(), ds.labels):
        writer.writerow([repr(v) for v in row] + [";".join(str(c) for c in sorted(lab))])
    Path(path).write_text(buf.getvalue())


def load_csv(path: str | Path) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    d = len(header) - 1
    if d < 1 or header[-1] != "labels":
        raise DatasetError(f"{path}: header must be feature columns followed by 'labels'")
    feats = np.empty((len(body), d), dtype=np.float32)
    labels = []
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != d + 1:
            raise DatasetError(f"{path}: line {line}: expected {d + 1} fields, got {len(row)}")
        try:
            values = [float(v) for v in row[:d]]
            lab = [int(c) for c in row[d].split(";") if c != ""]
        except ValueError as exc:
            raise DatasetError(f"{path}: line {line}: {exc}") from None
        if not all(math.isfinite(v) for v in values):
            raise DatasetError(f"{path}: line {line}: non-finite feature value")
        if not lab:
            raise DatasetError(f"{path}: line {line}: empty label set")
        feats[i] = values
        labels.append(frozenset(lab))
    return LabeledDataset(feats, tuple(labels))


# -- binary ------------------------------------------------------------------


def save_binary(ds: LabeledDataset, path: str | Path) -> None:
    n, d = ds.features.shape
    offset = _HEADER.size + 4 * n * d
    out = io.BytesIO()
    out.write(_HEADER.pack(DATA_MAGIC, n, d, 0, offset))
    out.write(ds.features.astype("<f4").tobytes())
    for lab in ds.labels:
        ids = sorted(lab)
        out.write(struct.pack("<I", len(ids)))
        out.write(np.asarray(ids, dtype="<u4").tobytes())
    Path(path).write_bytes(out.getvalue())


def load_binary(path: str | Path) -> LabeledDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, n, d, _, offset = _HEADER.unpack_from(data, 0)
    if magic != DATA_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if offset != _HEADER.size + 4 * n * d or offset > len(data):
        raise DatasetError(f"{path}: label block offset {offset} inconsistent with n={n}, d={d}")
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    pos = offset
    labels = []
    for i in range(n):
        if pos + 4 > len(data):
            raise DatasetError(f"{path}: truncated label block at item {i}, offset {pos}")
        (m,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + 4 * m > len(data):
            raise DatasetError(f"{path}: truncated label block at item {i}, offset {pos}")
        labels.append(frozenset(np.frombuffer(data, dtype="<u4", count=m, offset=pos).tolist()))
        pos += 4 * m
    if pos != len(data):
        raise DatasetError(f"{path}: {len(data) - pos} trailing bytes")
    ds = LabeledDataset(feats.astype(np.float32), tuple(labels))
    bad = np.flatnonzero(~np.isfinite(ds.features).all(axis=1))
    if bad.size:
        raise DatasetError(f"{path}: non-finite feature values in row {int(bad[0])}")
    return ds


def load(path: str | Path, fmt: str | None = None) -> LabeledDataset:
    """Load by explicit format name or by extension (``.csv`` / anything else binary)."""
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "binary")
    if not Path(path).exists():
        raise DatasetError(f"{path}: no such file")
    return load_csv(path) if fmt == "csv" else load_binary(path)


def save(ds: LabeledDataset, path: str | Path, fmt: str | None = None) -> None:
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "binary")
    (save_csv if fmt == "csv" else save_binary)(ds, path)
