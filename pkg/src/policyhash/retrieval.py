"""Exhaustive Hamming ranking over a code database and ranking metrics.

Ranking is by ascending Hamming distance with ties broken by ascending
database index. Two items are similar iff their label sets intersect.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import PackedCode, num_words

LabelSet = frozenset

CODES_MAGIC = b"PHCODES1"


class NoRelevantItemsError(ValueError):
    """A query has no similar item in the database, so its AP is undefined."""

    def __init__(self, message: str, query_index: int | None = None):
        super().__init__(message)
        self.query_index = query_index


def as_label_set(labels: Iterable[int]) -> frozenset[int]:
    out = frozenset(int(x) for x in labels)
    if not out:
        raise ValueError("label sets must be non-empty")
    if min(out) < 0:
        raise ValueError("class identifiers must be non-negative")
    return out


class CodeDatabase:
    """Immutable set of packed codes with one label set per code."""

    def __init__(self, codes: PackedCode, labels: Sequence[Iterable[int]]):
        if codes.words.ndim != 2:
            raise ValueError("database codes must be a stack of codes")
        n = codes.words.shape[0]
        if n < 1:
            raise ValueError("database must hold at least one code")
        if len(labels) != n:
            raise ValueError(f"{n} codes but {len(labels)} label sets")
        words = codes.words.copy()
        words.flags.writeable = False
        self._codes = PackedCode(words, codes.code_bits)
        self._labels = tuple(as_label_set(lab) for lab in labels)
        self._classes = sorted(set().union(*self._labels))
        self._class_index = {c: i for i, c in enumerate(self._classes)}
        onehot = np.zeros((n, len(self._classes)), dtype=bool)
        for i, lab in enumerate(self._labels):
            onehot[i, [self._class_index[c] for c in lab]] = True
        onehot.flags.writeable = False
        self._onehot = onehot
        self._rel_cache: dict[frozenset[int], np.ndarray] = {}

    @property
    def codes(self) -> PackedCode:
        return self._codes

    @property
    def labels(self) -> tuple[frozenset[int], ...]:
        return self._labels

    @property
    def code_bits(self) -> int:
        return self._codes.code_bits

    def __len__(self) -> int:
        return self._codes.words.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, CodeDatabase) and self._codes == other._codes and self._labels == other._labels

    def to_bytes(self) -> bytes:
        """Serialise in the code-database file format (``docs/formats.md``)."""
        n, w = self._codes.words.shape
        buf = io.BytesIO()
        buf.write(CODES_MAGIC)
        buf.write(struct.pack("<IIQ", self.code_bits, w, n))
        buf.write(self._codes.words.astype("<u8").tobytes())
        for lab in self._labels:
            ids = sorted(lab)
            buf.write(struct.pack("<I", len(ids)))
            buf.write(np.asarray(ids, dtype="<u4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodeDatabase":
        if data[:8] != CODES_MAGIC:
            raise ValueError("not a code database (bad magic)")
        if len(data) < 24:
            raise ValueError("code database truncated in header")
        code_bits, w, n = struct.unpack_from("<IIQ", data, 8)
        if w != num_words(code_bits):
            raise ValueError(f"header word count {w} inconsistent with {code_bits} bits")
        off = 24
        end = off + 8 * w * n
        if end > len(data):
            raise ValueError(f"code database truncated at byte offset {len(data)}")
        words = np.frombuffer(data, dtype="<u8", count=w * n, offset=off).reshape(n, w).astype(np.uint64)
        off = end
        labels = []
        for i in range(n):
            if off + 4 > len(data):
                raise ValueError(f"label block truncated at item {i}, offset {off}")
            (m,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + 4 * m > len(data):
                raise ValueError(f"label block truncated at item {i}, offset {off}")
            labels.append(np.frombuffer(data, dtype="<u4", count=m, offset=off).tolist())
            off += 4 * m
        if off != len(data):
            raise ValueError(f"{len(data) - off} trailing bytes after label block")
        return cls(PackedCode(words, code_bits), labels)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "CodeDatabase":
        return cls.from_bytes(Path(path).read_bytes())

    def _relevance_row(self, labels: frozenset[int]) -> np.ndarray:
        row = self._rel_cache.get(labels)
        if row is None:
            cols = [self._class_index[c] for c in labels if c in self._class_index]
            row = self._onehot[:, cols].any(axis=1) if cols else np.zeros(len(self), dtype=bool)
            row.flags.writeable = False
            self._rel_cache[labels] = row
        return row

    def relevance(self, query_labels: Sequence[Iterable[int]]) -> np.ndarray:
        """Boolean ``(m, n)`` matrix: query ``i`` is similar to item ``j``."""
        if not query_labels:
            return np.zeros((0, len(self)), dtype=bool)
        return np.stack([self._relevance_row(as_label_set(lab)) for lab in query_labels])


def _check_bits(a: PackedCode, b: PackedCode) -> None:
    if a.code_bits != b.code_bits:
        raise ValueError(f"code length mismatch: {a.code_bits} vs {b.code_bits} bits")


def hamming_distance(a: PackedCode, b: PackedCode) -> int | np.ndarray:
    """Number of differing bits; elementwise for stacks of equal length."""
    _check_bits(a, b)
    d = np.bitwise_count(a.words ^ b.words).sum(axis=-1, dtype=np.int64)
    return int(d) if d.ndim == 0 else d


def hamming_matrix(queries: PackedCode, codes: PackedCode) -> np.ndarray:
    """``(m, n)`` distances between every query and every code."""
    _check_bits(queries, codes)
    q = np.atleast_2d(queries.words)
    x = q[:, None, :] ^ np.atleast_2d(codes.words)[None, :, :]
    # small unsigned dtype lets the stable argsort in rank_batch use radix sort
    dtype = np.uint8 if codes.code_bits < 256 else np.uint16 if codes.code_bits < 65536 else np.int64
    return np.bitwise_count(x).sum(axis=-1, dtype=dtype)


def rank(query: PackedCode, db: CodeDatabase) -> np.ndarray:
    """Database indices by ascending distance, ties by ascending index."""
    if len(db) == 0:
        raise ValueError("cannot rank against an empty database")
    return rank_batch(query, db)[0]


def rank_batch(queries: PackedCode, db: CodeDatabase) -> np.ndarray:
    return np.argsort(hamming_matrix(queries, db.codes), axis=1, kind="stable")


def _ap_rows(rel_sorted: np.ndarray, top: int | None) -> tuple[np.ndarray, np.ndarray]:
    """AP of each row of a rank-ordered relevance matrix, plus N+ per row."""
    n_pos = rel_sorted.sum(axis=1)
    if top is not None:
        rel_sorted = rel_sorted[:, :top]
    hits = np.cumsum(rel_sorted, axis=1)
    ranks = np.arange(1, rel_sorted.shape[1] + 1, dtype=np.float64)
    terms = np.where(rel_sorted, hits / ranks, 0.0)
    # sequential accumulation keeps results identical to a plain loop
    total = np.cumsum(terms, axis=1)[:, -1]
    denom = n_pos if top is None else np.minimum(n_pos, top)
    with np.errstate(invalid="ignore", divide="ignore"):
        return total / denom, n_pos


def batch_average_precision(
    queries: PackedCode,
    query_labels: Sequence[Iterable[int]],
    db: CodeDatabase,
    top: int | None = None,
    strict: bool = True,
) -> np.ndarray:
    """AP of every query against ``db``.

    Args:
        queries: Stack of ``m`` query codes.
        query_labels: ``m`` label sets.
        db: Database to rank.
        top: Optional rank cutoff; normalisation is by ``min(N+, top)``.
        strict: Raise on a query with no relevant item; otherwise its AP is NaN.
    """
    if len(query_labels) != len(queries):
        raise ValueError(f"{len(queries)} query codes but {len(query_labels)} label sets")
    if top is not None and top < 1:
        raise ValueError("top must be >= 1")
    order = rank_batch(queries, db)
    rel = np.take_along_axis(db.relevance(query_labels), order, axis=1)
    ap, n_pos = _ap_rows(rel, top)
    if strict:
        empty = np.flatnonzero(n_pos == 0)
        if empty.size:
            i = int(empty[0])
            raise NoRelevantItemsError(f"query {i} has no relevant items in the database", i)
    return ap


def average_precision(query: PackedCode, query_labels: Iterable[int], db: CodeDatabase, top: int | None = None) -> float:
    """AP of one query: ``(1/N+) * sum_j (N+_j / j) * sim_j`` over the ranked list."""
    words = query.words.reshape(1, -1)
    try:
        return float(batch_average_precision(PackedCode(words, query.code_bits), [query_labels], db, top)[0])
    except NoRelevantItemsError:
        raise NoRelevantItemsError("query has no relevant items in the database") from None


def mean_average_precision(
    queries: PackedCode, query_labels: Sequence[Iterable[int]], db: CodeDatabase, top: int | None = None
) -> float:
    aps = batch_average_precision(queries, query_labels, db, top)
    return sum(aps.tolist()) / len(aps)


def precision_at_hamming_radius(
    queries: PackedCode, query_labels: Sequence[Iterable[int]], db: CodeDatabase, radius: int = 2
) -> float:
    """Mean precision of the items within ``radius``; an empty return scores 0."""
    return sum(_radius_precisions(queries, query_labels, db, radius).tolist()) / len(queries)


def _radius_precisions(queries, query_labels, db, radius) -> np.ndarray:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    within = hamming_matrix(queries, db.codes) <= radius
    rel = db.relevance(query_labels)
    returned = within.sum(axis=1)
    good = (within & rel).sum(axis=1)
    return np.where(returned > 0, good / np.maximum(returned, 1), 0.0)


def precision_at_k(
    queries: PackedCode, query_labels: Sequence[Iterable[int]], db: CodeDatabase, ks: Sequence[int]
) -> list[tuple[int, float]]:
    return [(k, sum(p.tolist()) / len(p)) for k, p in _topk_precisions(queries, query_labels, db, ks)]


def _topk_precisions(queries, query_labels, db, ks):
    n = len(db)
    for k in ks:
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside [1, {n}]")
    order = rank_batch(queries, db)
    rel = np.take_along_axis(db.relevance(query_labels), order, axis=1)
    hits = np.cumsum(rel, axis=1)
    return [(int(k), hits[:, k - 1] / k) for k in ks]


@dataclass
class RankingMetrics:
    map: float
    precision_at_hamming2: float
    precision_at_k: list[tuple[int, float]]
    per_query_ap: list[float]
    per_query_p_at_h2: list[float] = field(default_factory=list)
    per_query_p_at_k: dict[int, list[float]] = field(default_factory=dict)
    query_ids: list[int] = field(default_factory=list)
    excluded_queries: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "map": self.map,
            "p_at_h2": self.precision_at_hamming2,
            "p_at_k": [{"k": k, "precision": p} for k, p in self.precision_at_k],
            "per_query_ap": self.per_query_ap,
            "excluded_queries": self.excluded_queries,
            "num_excluded": len(self.excluded_queries),
        }
        return json.dumps(doc, indent=2) + "\n"

    def to_csv(self) -> str:
        ks = [k for k, _ in self.precision_at_k]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["query", "ap", "p_at_h2", *[f"p_at_{k}" for k in ks]])
        for row, qid in enumerate(self.query_ids):
            writer.writerow(
                [qid, repr(self.per_query_ap[row]), repr(self.per_query_p_at_h2[row])]
                + [repr(self.per_query_p_at_k[k][row]) for k in ks]
            )
        return buf.getvalue()


def evaluate(
    queries: PackedCode,
    query_labels: Sequence[Iterable[int]],
    db: CodeDatabase,
    ks: Sequence[int] = (),
    radius: int = 2,
    top: int | None = None,
) -> RankingMetrics:
    """All metrics at once; queries without a relevant item are excluded and listed."""
    ks = [int(k) for k in ks if k <= len(db)]
    rel_all = db.relevance(query_labels)
    excluded = np.flatnonzero(~rel_all.any(axis=1)).tolist()
    keep = np.flatnonzero(rel_all.any(axis=1))
    if keep.size == 0:
        raise NoRelevantItemsError("no query has a relevant item in the database")
    q = queries[keep]
    labels = [query_labels[i] for i in keep]
    aps = batch_average_precision(q, labels, db, top).tolist()
    radius_p = _radius_precisions(q, labels, db, radius).tolist()
    topk = {k: p.tolist() for k, p in _topk_precisions(q, labels, db, ks)}
    m = len(aps)
    return RankingMetrics(
        map=sum(aps) / m,
        precision_at_hamming2=sum(radius_p) / m,
        precision_at_k=[(k, sum(v) / m) for k, v in topk.items()],
        per_query_ap=aps,
        per_query_p_at_h2=radius_p,
        per_query_p_at_k=topk,
        query_ids=keep.tolist(),
        excluded_queries=excluded,
    )
