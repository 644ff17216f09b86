"""Exact top-n cosine search over report vectors, with creation-date windows.

Vectors are stored at float32 precision (the on-disk precision) and scored
in float64, so an index reloaded from disk answers queries exactly like the
one that was saved. Ties are broken by ascending issue id.
"""
from __future__ import annotations

import datetime as dt
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .corpus import PathLike
from .embed import DimensionMismatchError, EmbeddingVector

MAGIC = b"DSIX"
FORMAT_VERSION = 1
_EPOCH = dt.date(1970, 1, 1).toordinal()
_HEADER = struct.Struct("<4sHBIQ")
_SPARSE_ENTRY = struct.Struct("<QiI")
_PAIR = np.dtype([("index", "<u4"), ("value", "<f4")])
# Cosines closer than this are considered equal; see SearchIndex._top_n.
TIE_TOLERANCE = 1e-12


class IndexFormatError(ValueError):
    pass


def to_day(date: dt.date) -> int:
    return date.toordinal() - _EPOCH


def from_day(day: int) -> dt.date:
    return dt.date.fromordinal(int(day) + _EPOCH)


@dataclass(frozen=True)
class DateWindow:
    """Candidates created within ``lookback_days`` before ``query_date`` (inclusive)."""

    query_date: dt.date
    lookback_days: int

    def __post_init__(self):
        if self.lookback_days <= 0:
            raise ValueError(f"lookback_days must be positive, got {self.lookback_days}")

    def contains(self, created_at: dt.date) -> bool:
        delta = (self.query_date - created_at).days
        return 0 <= delta <= self.lookback_days


@dataclass(frozen=True)
class QueryResult:
    ranked: list[tuple[int, float]]

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.ranked]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.ranked]

    def __len__(self) -> int:
        return len(self.ranked)


def _round32(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).astype(np.float64)


class SearchIndex:
    """Immutable brute-force cosine index. Build with :func:`build_index`."""

    def __init__(self, ids, matrix, days):
        ids = np.asarray(ids, dtype=np.int64)
        days = np.asarray(days, dtype=np.int32)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("index needs at least one entry")
        if np.any(ids <= 0):
            raise ValueError("issue ids must be positive")
        uniq, counts = np.unique(ids, return_counts=True)
        if uniq.size != ids.size:
            raise ValueError(f"duplicate ids in index: {uniq[counts > 1][:5].tolist()}")
        if matrix.shape[0] != ids.size or days.shape != ids.shape:
            raise ValueError("ids, vectors and dates differ in length")
        if sparse.issparse(matrix):
            matrix = sparse.csr_matrix(matrix, dtype=np.float64, copy=True)
            matrix.sort_indices()
            matrix.data = _round32(matrix.data)
            matrix.eliminate_zeros()
            finite = np.all(np.isfinite(matrix.data))
            norms = np.sqrt(np.asarray(matrix.multiply(matrix).sum(axis=1)).ravel())
            self.kind = "sparse"
        else:
            matrix = _round32(matrix)
            if matrix.ndim != 2:
                raise ValueError("dense vectors must form a 2-D array")
            finite = np.all(np.isfinite(matrix))
            norms = np.sqrt(np.einsum("ij,ij->i", matrix, matrix))
            self.kind = "dense"
        if not finite:
            raise ValueError("non-finite vector component")
        self.ids = ids
        self.days = days
        self.matrix = matrix
        self.dim = int(matrix.shape[1])
        self._inv_norm = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        for arr in (self.ids, self.days, self._inv_norm):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return int(self.ids.size)

    def __contains__(self, issue_id) -> bool:
        return bool(np.any(self.ids == issue_id))

    @property
    def dates(self) -> list[dt.date]:
        return [from_day(d) for d in self.days]

    def vector(self, issue_id: int) -> EmbeddingVector:
        row = int(np.flatnonzero(self.ids == issue_id)[0])
        if self.kind == "sparse":
            r = self.matrix.getrow(row)
            return EmbeddingVector.sparse(r.indices, r.data, self.dim)
        return EmbeddingVector.dense(self.matrix[row])

    def _probe_matrix(self, probes):
        if sparse.issparse(probes):
            if probes.shape[1] != self.dim:
                raise DimensionMismatchError(f"probe dimension {probes.shape[1]} != index dimension {self.dim}")
            return sparse.csr_matrix(probes)
        probes = list(probes)
        for p in probes:
            if p.dim != self.dim:
                raise DimensionMismatchError(f"probe dimension {p.dim} != index dimension {self.dim}")
        if self.kind == "dense":
            return np.array([p.to_dense() for p in probes]).reshape(len(probes), self.dim)
        if not probes:
            return sparse.csr_matrix((0, self.dim))
        indptr = np.concatenate([[0], np.cumsum([p.values.size for p in probes])])
        data = np.concatenate([p.values for p in probes])
        indices = np.concatenate([p.indices if p.is_sparse else np.arange(p.dim) for p in probes])
        return sparse.csr_matrix((data, indices, indptr), shape=(len(probes), self.dim))

    def scores(self, probes) -> np.ndarray:
        """Cosine scores of shape (number of probes, len(index)).

        ``probes`` is a sequence of EmbeddingVector or a sparse matrix whose
        rows are L2-normalized.
        """
        p = self._probe_matrix(probes)
        if self.kind == "sparse":
            raw = (self.matrix @ p.T).T.toarray()
        else:
            pd = p.toarray() if sparse.issparse(p) else p
            raw = pd @ self.matrix.T
        out = raw * self._inv_norm
        np.clip(out, -1.0, 1.0, out=out)
        return out

    def window_mask(self, window: DateWindow | None) -> np.ndarray | None:
        if window is None:
            return None
        hi = to_day(window.query_date)
        return (self.days >= hi - window.lookback_days) & (self.days <= hi)

    def candidates(self, window: DateWindow | None = None) -> np.ndarray:
        mask = self.window_mask(window)
        return np.array(self.ids) if mask is None else self.ids[mask]

    def _top_n(self, scores: np.ndarray, n: int, mask: np.ndarray | None) -> QueryResult:
        rows = np.arange(self.ids.size) if mask is None else np.flatnonzero(mask)
        k = min(n, rows.size)
        if k == 0:
            return QueryResult([])
        s = scores[rows]
        if k < rows.size:
            # Keep everything chained to the k-th score by gaps <= TIE_TOLERANCE.
            threshold = np.partition(s, rows.size - k)[rows.size - k] - TIE_TOLERANCE
            while True:
                keep = s >= threshold
                lowest = s[keep].min() - TIE_TOLERANCE
                if lowest >= threshold:
                    break
                threshold = lowest
            rows, s = rows[keep], s[keep]
        ids = self.ids[rows]
        order = np.lexsort((ids, -s))
        s, ids = s[order], ids[order]
        # Scores closer than the tolerance are rounding noise around one value
        # (parallel vectors, say): treat them as a tie and order by id.
        cluster = np.concatenate([[0], np.cumsum(-np.diff(s) > TIE_TOLERANCE)])
        order = np.lexsort((ids, cluster))[:k]
        head = s[np.searchsorted(cluster, cluster)]
        return QueryResult([(int(ids[i]), float(head[i])) for i in order])

    def query(self, probe: EmbeddingVector, n: int, window: DateWindow | None = None) -> QueryResult:
        return self.query_batch([probe], n, [window])[0]

    def query_batch(
        self,
        probes,
        n: int,
        windows: Sequence[DateWindow | None] | None = None,
        block_size: int = 64,
    ) -> list[QueryResult]:
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        count = probes.shape[0] if sparse.issparse(probes) else len(probes)
        if windows is None:
            windows = [None] * count
        if len(windows) != count:
            raise ValueError("one window (or None) is needed per probe")
        results = []
        for start in range(0, count, block_size):
            scores = self.scores(probes[start:start + block_size])
            for j, row in enumerate(scores):
                results.append(self._top_n(row, n, self.window_mask(windows[start + j])))
        return results


def build_index(items: Iterable[tuple[int, EmbeddingVector, dt.date]]) -> SearchIndex:
    """Index ``(issue id, vector, created_at)`` triples."""
    items = list(items)
    if not items:
        raise ValueError("cannot build an index from zero items")
    dims = {vec.dim for _, vec, _ in items}
    if len(dims) != 1:
        raise DimensionMismatchError(f"mixed vector dimensions: {sorted(dims)}")
    kinds = {vec.is_sparse for _, vec, _ in items}
    if len(kinds) != 1:
        raise ValueError("cannot mix sparse and dense vectors in one index")
    dim = dims.pop()
    ids = [issue_id for issue_id, _, _ in items]
    days = [to_day(created) for _, _, created in items]
    vectors = [vec for _, vec, _ in items]
    if kinds.pop():
        indptr = np.concatenate([[0], np.cumsum([v.indices.size for v in vectors])])
        matrix = sparse.csr_matrix(
            (
                np.concatenate([v.values for v in vectors]),
                np.concatenate([v.indices for v in vectors]),
                indptr,
            ),
            shape=(len(vectors), dim),
        )
    else:
        matrix = np.vstack([v.values for v in vectors])
    return SearchIndex(ids, matrix, days)


def index_from_matrix(ids: Sequence[int], matrix, dates: Sequence[dt.date]) -> SearchIndex:
    """Bulk constructor for a ready-made CSR or dense row matrix."""
    return SearchIndex(ids, matrix, [to_day(d) for d in dates])


# -- persistence --------------------------------------------------------------

def _dense_entry(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("day", "<i4"), ("vec", "<f4", (dim,))])


def save_index(index: SearchIndex, path: PathLike) -> None:
    """Write the little-endian ``DSIX`` binary layout."""
    kind = 0 if index.kind == "sparse" else 1
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, kind, index.dim, len(index))]
    if kind == 1:
        rec = np.empty(len(index), dtype=_dense_entry(index.dim))
        rec["id"] = index.ids
        rec["day"] = index.days
        rec["vec"] = index.matrix
        chunks.append(rec.tobytes())
    else:
        m = index.matrix
        for row in range(len(index)):
            lo, hi = m.indptr[row], m.indptr[row + 1]
            chunks.append(_SPARSE_ENTRY.pack(int(index.ids[row]), int(index.days[row]), int(hi - lo)))
            pairs = np.empty(hi - lo, dtype=_PAIR)
            pairs["index"] = m.indices[lo:hi]
            pairs["value"] = m.data[lo:hi]
            chunks.append(pairs.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_index(path: PathLike) -> SearchIndex:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise IndexFormatError(f"{path}: truncated header")
    magic, version, kind, dim, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IndexFormatError(f"{path}: not an index file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise IndexFormatError(
            f"{path}: index format version {version} is not supported (this build reads version {FORMAT_VERSION})"
        )
    offset = _HEADER.size
    if kind == 1:
        entry = _dense_entry(dim)
        if len(data) != offset + count * entry.itemsize:
            raise IndexFormatError(f"{path}: expected {count} dense entries, file size disagrees")
        rec = np.frombuffer(data, dtype=entry, count=count, offset=offset)
        return SearchIndex(rec["id"].astype(np.int64), rec["vec"].astype(np.float64), rec["day"])
    if kind != 0:
        raise IndexFormatError(f"{path}: unknown vector kind {kind}")
    ids = np.empty(count, dtype=np.int64)
    days = np.empty(count, dtype=np.int32)
    indptr = np.zeros(count + 1, dtype=np.int64)
    index_chunks, value_chunks = [], []
    for row in range(count):
        if offset + _SPARSE_ENTRY.size > len(data):
            raise IndexFormatError(f"{path}: truncated at entry {row}")
        ids[row], days[row], nnz = _SPARSE_ENTRY.unpack_from(data, offset)
        offset += _SPARSE_ENTRY.size
        if offset + nnz * _PAIR.itemsize > len(data):
            raise IndexFormatError(f"{path}: truncated at entry {row}")
        pairs = np.frombuffer(data, dtype=_PAIR, count=nnz, offset=offset)
        offset += nnz * _PAIR.itemsize
        index_chunks.append(pairs["index"])
        value_chunks.append(pairs["value"])
        indptr[row + 1] = indptr[row] + nnz
    if offset != len(data):
        raise IndexFormatError(f"{path}: {len(data) - offset} trailing bytes")
    indices = np.concatenate(index_chunks).astype(np.int64) if index_chunks else np.zeros(0, np.int64)
    if indices.size and indices.max() >= dim:
        raise IndexFormatError(f"{path}: vector index out of range for dimension {dim}")
    values = np.concatenate(value_chunks).astype(np.float64) if value_chunks else np.zeros(0)
    matrix = sparse.csr_matrix((values, indices, indptr), shape=(count, dim))
    return SearchIndex(ids, matrix, days)
