"""Document embeddings: a native TF-IDF baseline and externally produced vectors.

Every vector leaving this module is L2-normalized (or empty with norm 0), so
cosine similarity downstream is a plain dot product.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import numpy as np
from scipy import sparse

from .corpus import BugReport, InputError, PathLike

logger = logging.getLogger(__name__)

TOKEN_PATTERN = r"[a-z][a-z0-9]*|[0-9]+[a-z0-9]*"
MIN_TOKEN_LENGTH = 2
_token_re = re.compile(TOKEN_PATTERN)


class EmbeddingError(Exception):
    """Base class for embedding failures."""


class DimensionMismatchError(EmbeddingError, ValueError):
    pass


class ProviderError(EmbeddingError):
    """The embedding endpoint did not produce a usable vector."""


class FitError(EmbeddingError, ValueError):
    pass


# -- preprocessing ------------------------------------------------------------

@dataclass(frozen=True)
class StopWords:
    words: frozenset[str]
    identifier: str

    def __contains__(self, word: str) -> bool:
        return word in self.words


def load_stopwords(path: PathLike | None = None) -> StopWords:
    """Load a one-word-per-line list; defaults to the bundled 318-word English list."""
    if path is None:
        text = resources.files("bugdup").joinpath("data/english_stopwords.txt").read_text("utf-8")
        name = "english"
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read stop-word list {path}: {exc}") from exc
        name = Path(path).stem
    words = frozenset(w.strip().lower() for w in text.splitlines() if w.strip())
    digest = hashlib.sha256("\n".join(sorted(words)).encode()).hexdigest()[:12]
    return StopWords(words, f"{name}-{len(words)}-{digest}")


_default_stopwords: StopWords | None = None


def default_stopwords() -> StopWords:
    global _default_stopwords
    if _default_stopwords is None:
        _default_stopwords = load_stopwords()
    return _default_stopwords


def preprocess(text: str, stopwords: StopWords | None = None) -> list[str]:
    """Lowercase, tokenize and drop stop words, preserving token order.

    >>> preprocess("Crash in Parser v2!")
    ['crash', 'parser', 'v2']
    """
    stop = default_stopwords() if stopwords is None else stopwords
    return [
        tok for tok in _token_re.findall(text.lower())
        if len(tok) >= MIN_TOKEN_LENGTH and tok not in stop
    ]


def document_text(report: BugReport) -> str:
    return f"{report.summary}\n{report.description}"


# -- vectors ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """A sparse (``indices`` set) or dense (``indices`` is None) vector."""

    values: np.ndarray
    dim: int
    norm: float
    indices: np.ndarray | None = None

    @property
    def is_sparse(self) -> bool:
        return self.indices is not None

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    @classmethod
    def dense(cls, values, normalize: bool = True) -> "EmbeddingVector":
        arr = np.asarray(values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(arr)):
            raise ValueError("vector has non-finite components")
        norm = float(np.linalg.norm(arr))
        if normalize and norm > 0:
            arr = arr / norm
            norm = float(np.linalg.norm(arr))
        arr.setflags(write=False)
        return cls(values=arr, dim=arr.size, norm=norm)

    @classmethod
    def sparse(cls, indices, values, dim: int, normalize: bool = True) -> "EmbeddingVector":
        idx = np.asarray(indices, dtype=np.int64).ravel()
        val = np.asarray(values, dtype=np.float64).ravel()
        if idx.size != val.size:
            raise ValueError("indices and values differ in length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= dim):
            raise ValueError("sparse indices must be strictly increasing and < dim")
        if not np.all(np.isfinite(val)):
            raise ValueError("vector has non-finite components")
        keep = val != 0
        idx, val = idx[keep], val[keep]
        norm = float(np.linalg.norm(val))
        if normalize and norm > 0:
            val = val / norm
            norm = float(np.linalg.norm(val))
        idx.setflags(write=False)
        val.setflags(write=False)
        return cls(values=val, dim=int(dim), norm=norm, indices=idx)

    def to_dense(self) -> np.ndarray:
        if self.indices is None:
            return np.array(self.values)
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def items(self) -> dict[int, float]:
        if self.indices is None:
            return {i: float(v) for i, v in enumerate(self.values) if v != 0}
        return dict(zip(self.indices.tolist(), self.values.tolist()))


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity; 0 when either vector is empty."""
    if a.dim != b.dim:
        raise DimensionMismatchError(f"dimension {a.dim} != {b.dim}")
    if a.norm == 0 or b.norm == 0:
        return 0.0
    if a.is_sparse and b.is_sparse:
        common, ia, ib = np.intersect1d(a.indices, b.indices, assume_unique=True, return_indices=True)
        dot = float(np.dot(a.values[ia], b.values[ib])) if common.size else 0.0
    else:
        dot = float(np.dot(a.to_dense(), b.to_dense()))
    return dot / (a.norm * b.norm)


# -- TF-IDF -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TfidfModel:
    vocabulary: dict[str, int]
    idf: np.ndarray
    document_count: int
    token_pattern: str = TOKEN_PATTERN
    stopwords_id: str = ""

    @property
    def dim(self) -> int:
        return len(self.vocabulary)

    def transform(self, docs: Sequence[Sequence[str]]) -> sparse.csr_matrix:
        """Embed many token streams at once as L2-normalized CSR rows."""
        indptr = [0]
        indices: list[int] = []
        counts: list[int] = []
        vocab = self.vocabulary
        for doc in docs:
            tf = Counter(vocab[t] for t in doc if t in vocab)
            for col in sorted(tf):
                indices.append(col)
                counts.append(tf[col])
            indptr.append(len(indices))
        data = np.asarray(counts, dtype=np.float64) * self.idf[np.asarray(indices, dtype=np.int64)]
        matrix = sparse.csr_matrix(
            (data, np.asarray(indices, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
            shape=(len(docs), self.dim),
        )
        norms = np.sqrt(np.asarray(matrix.multiply(matrix).sum(axis=1)).ravel())
        scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        matrix.data *= np.repeat(scale, np.diff(matrix.indptr))
        return matrix

    def save(self, path: PathLike) -> None:
        terms = sorted(self.vocabulary, key=self.vocabulary.__getitem__)
        payload = {
            "format": "bugdup-tfidf/1",
            "token_pattern": self.token_pattern,
            "stopwords_id": self.stopwords_id,
            "document_count": self.document_count,
            "terms": terms,
            "idf": self.idf.tolist(),
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: PathLike) -> "TfidfModel":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            if payload.get("format") != "bugdup-tfidf/1":
                raise ValueError(f"unknown model format {payload.get('format')!r}")
            terms = payload["terms"]
            return cls(
                vocabulary={t: i for i, t in enumerate(terms)},
                idf=np.asarray(payload["idf"], dtype=np.float64),
                document_count=int(payload["document_count"]),
                token_pattern=payload["token_pattern"],
                stopwords_id=payload["stopwords_id"],
            )
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot load TF-IDF model {path}: {exc}") from exc


def fit_tfidf(docs: Sequence[Sequence[str]], stopwords_id: str | None = None) -> TfidfModel:
    """Fit vocabulary and smoothed idf, ``ln((1 + N) / (1 + df)) + 1``."""
    if not docs:
        raise FitError("cannot fit TF-IDF on zero documents")
    df: Counter[str] = Counter()
    for doc in docs:
        df.update(set(doc))
    if not df:
        raise FitError("corpus has no tokens")
    terms = sorted(df)
    n = len(docs)
    doc_freq = np.array([df[t] for t in terms], dtype=np.float64)
    idf = np.log((1.0 + n) / (1.0 + doc_freq)) + 1.0
    idf.setflags(write=False)
    return TfidfModel(
        vocabulary={t: i for i, t in enumerate(terms)},
        idf=idf,
        document_count=n,
        stopwords_id=default_stopwords().identifier if stopwords_id is None else stopwords_id,
    )


def embed_tfidf(model: TfidfModel, doc: Sequence[str]) -> EmbeddingVector:
    """Raw-count tf times idf, out-of-vocabulary terms dropped, L2-normalized."""
    row = model.transform([doc])
    return EmbeddingVector.sparse(row.indices, row.data, model.dim, normalize=True)


# -- precomputed vectors ------------------------------------------------------

def load_vector_file(path: PathLike) -> dict[int, EmbeddingVector]:
    """Read ``{"id": int, "vector": [float, ...]}`` lines, normalizing each vector."""
    vectors: dict[int, EmbeddingVector] = {}
    dim = None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read vector file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                record = json.loads(line)
                issue_id = record["id"]
                values = np.asarray(record["vector"], dtype=np.float64)
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed vector record: {exc}") from exc
            if not isinstance(issue_id, int) or values.ndim != 1:
                raise InputError(f"{path}:{lineno}: id must be an integer and vector a flat list")
            if dim is None:
                dim = values.size
            elif values.size != dim:
                raise DimensionMismatchError(f"{path}:{lineno}: dimension {values.size}, expected {dim}")
            if not np.all(np.isfinite(values)):
                raise InputError(f"{path}:{lineno}: non-finite component in vector {issue_id}")
            if issue_id in vectors:
                raise InputError(f"{path}:{lineno}: duplicate id {issue_id}")
            vectors[issue_id] = EmbeddingVector.dense(values)
    return vectors


def write_vector_file(vectors: Mapping[int, EmbeddingVector | Sequence[float]], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for issue_id in sorted(vectors):
            vec = vectors[issue_id]
            values = vec.to_dense() if isinstance(vec, EmbeddingVector) else vec
            fh.write(json.dumps({"id": int(issue_id), "vector": [float(v) for v in values]}) + "\n")


class EmbeddingClient:
    """HTTP client for a remote embedding endpoint.

    Posts ``{"input": text, "model": label}`` and expects
    ``{"embedding": [...]}``. Transport errors, 429 and 5xx responses are
    retried with exponential backoff; other failures are not. The first
    successful response fixes the dimensionality for the session.
    """

    def __init__(
        self,
        endpoint: str,
        model: str = "",
        *,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.retries = retries
        self.backoff = backoff
        self.max_in_flight = max(1, max_in_flight)
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._dim: int | None = None
        self._dim_lock = threading.Lock()

    @property
    def dim(self) -> int | None:
        return self._dim

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, text: str) -> list:
        last_error = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt:
                delay = self.backoff * 2 ** (attempt - 1)
                self._sleep(delay * (1 + 0.1 * random.random()))
            try:
                response = self._client.post(self.endpoint, json={"input": text, "model": self.model})
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                continue
            if response.is_success:
                try:
                    return response.json()["embedding"]
                except (ValueError, KeyError, TypeError) as exc:
                    raise ProviderError(f"malformed response from {self.endpoint}: {exc}") from exc
            last_error = f"HTTP {response.status_code}"
            if response.status_code != 429 and response.status_code < 500:
                break
        raise ProviderError(f"embedding request to {self.endpoint} failed: {last_error}")

    def fetch(self, text: str) -> EmbeddingVector:
        if not text:
            raise ValueError("cannot embed empty text")
        raw = self._post(text)
        try:
            vector = EmbeddingVector.dense(raw)
        except (ValueError, TypeError) as exc:
            raise ProviderError(f"unusable embedding from {self.endpoint}: {exc}") from exc
        with self._dim_lock:
            if self._dim is None:
                self._dim = vector.dim
            elif vector.dim != self._dim:
                raise DimensionMismatchError(
                    f"endpoint returned dimension {vector.dim}, earlier responses had {self._dim}"
                )
        return vector

    def fetch_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.fetch, texts))


def fetch_vector(endpoint: str, text: str, model: str = "", **client_options) -> EmbeddingVector:
    """One-shot convenience wrapper around :class:`EmbeddingClient`."""
    with EmbeddingClient(endpoint, model, **client_options) as client:
        return client.fetch(text)


# -- embedders: BugReport -> EmbeddingVector ----------------------------------

class TfidfEmbedder:
    """Native TF-IDF embedder fitted on training reports only."""

    label = "tfidf"

    def __init__(self, model: TfidfModel, stopwords: StopWords | None = None):
        self.model = model
        self.stopwords = stopwords or default_stopwords()

    @classmethod
    def fit(cls, reports: Iterable[BugReport], stopwords: StopWords | None = None) -> "TfidfEmbedder":
        stop = stopwords or default_stopwords()
        docs = [preprocess(document_text(r), stop) for r in reports]
        return cls(fit_tfidf(docs, stop.identifier), stop)

    def tokens(self, report: BugReport) -> list[str]:
        return preprocess(document_text(report), self.stopwords)

    def embed_text(self, text: str) -> EmbeddingVector:
        return embed_tfidf(self.model, preprocess(text, self.stopwords))

    def __call__(self, report: BugReport) -> EmbeddingVector:
        return embed_tfidf(self.model, self.tokens(report))

    def embed_many(self, reports: Sequence[BugReport]) -> sparse.csr_matrix:
        return self.model.transform([self.tokens(r) for r in reports])


class VectorFileEmbedder:
    """Looks up precomputed vectors by report id."""

    def __init__(self, vectors: Mapping[int, EmbeddingVector], label: str = "vectors"):
        self.vectors = vectors
        self.label = label

    @classmethod
    def from_file(cls, path: PathLike, label: str | None = None) -> "VectorFileEmbedder":
        return cls(load_vector_file(path), label or Path(path).stem)

    def __call__(self, report: BugReport) -> EmbeddingVector:
        try:
            return self.vectors[report.id]
        except KeyError:
            raise EmbeddingError(f"no vector for report {report.id}") from None


class EndpointEmbedder:
    """Embeds report text through an :class:`EmbeddingClient`."""

    def __init__(self, client: EmbeddingClient, label: str | None = None):
        self.client = client
        self.label = label or client.model or "endpoint"

    def embed_text(self, text: str) -> EmbeddingVector:
        return self.client.fetch(text)

    def __call__(self, report: BugReport) -> EmbeddingVector:
        return self.client.fetch(document_text(report))
