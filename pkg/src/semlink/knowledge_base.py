"""Receiver-side knowledge base: exact nearest-neighbor search under L2.

Distances are accumulated in float64, strictly sequentially over the vector
index. That fixed fold order makes the distance value well defined, so the
optimized search and the brute-force oracle must agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding_io import EmbeddingDataset

_QUERY_CHUNK = 8
_SCAN_BLOCK = 512

try:  # optional compiled kernel; the numpy path is the reference
    import warnings as _warnings

    import numba as _numba

    # numba falls back to another threading layer by itself; the advisory
    # would otherwise print on every CLI run
    _warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

    @_numba.njit(parallel=True, cache=True)
    def _sq_dists_kernel(ent_t, queries, out):  # pragma: no cover - compiled
        dim, m = ent_t.shape
        for qi in _numba.prange(queries.shape[0]):
            acc = out[qi]
            for e in range(m):
                acc[e] = 0.0
            for i in range(dim):
                qv = queries[qi, i]
                row = ent_t[i]
                for e in range(m):
                    d = qv - row[e]
                    acc[e] += d * d

except ImportError:  # pragma: no cover
    _sq_dists_kernel = None

_kernel_broken = False


@dataclass
class Match:
    image_id: int
    label: int
    distance: float


@dataclass(eq=False)
class KnowledgeBase:
    """M labeled embeddings in ascending image_id order, read-only after build."""

    dim: int
    entries: np.ndarray
    labels: np.ndarray
    image_ids: np.ndarray
    _entries64: np.ndarray = field(init=False, repr=False)
    _entries_t64: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("knowledge base needs at least one entry")
        if self.entries.shape != (self.size, self.dim):
            raise ValueError("entries shape disagrees with labels/image_ids")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("KB entries contain NaN or Inf")
        # float64 copies in both layouts: row-major for the oracle's scan,
        # transposed (contiguous per-component rows) for the fold kernel
        self._entries64 = self.entries.astype(np.float64)
        self._entries_t64 = np.ascontiguousarray(self._entries64.T)
        for arr in (self.entries, self.labels, self.image_ids, self._entries64, self._entries_t64):
            arr.setflags(write=False)

    @property
    def size(self) -> int:
        return len(self.image_ids)


def build_kb(dataset: EmbeddingDataset) -> KnowledgeBase:
    """Index every record of the dataset, ordered by ascending image_id."""
    if dataset.n_records == 0:
        raise ValueError("cannot build a knowledge base from an empty dataset")
    order = np.argsort(dataset.image_ids, kind="stable")
    return KnowledgeBase(
        dim=dataset.dim,
        entries=np.ascontiguousarray(dataset.vectors[order]),
        labels=dataset.labels[order].copy(),
        image_ids=dataset.image_ids[order].copy(),
    )


def _check_query(kb: KnowledgeBase, queries: np.ndarray, k: int) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != kb.dim:
        raise ValueError(f"query dim {queries.shape[1]} != KB dim {kb.dim}")
    if not 1 <= k <= kb.size:
        raise ValueError(f"k must lie in [1, {kb.size}], got {k}")
    return queries


def _sq_dists_numpy(ent_t: np.ndarray, queries: np.ndarray, out: np.ndarray) -> None:
    """Squared distances via the mandated fold, vectorized over entries."""
    diff = np.empty((_QUERY_CHUNK, ent_t.shape[1]))
    for start in range(0, queries.shape[0], _QUERY_CHUNK):
        chunk = queries[start : start + _QUERY_CHUNK]
        acc = out[start : start + chunk.shape[0]]
        acc[:] = 0.0
        buf = diff[: chunk.shape[0]]
        # sequential fold over the vector index
        for i in range(ent_t.shape[0]):
            np.subtract(chunk[:, i, None], ent_t[i][None, :], out=buf)
            np.multiply(buf, buf, out=buf)
            np.add(acc, buf, out=acc)


def _sq_dists(kb: KnowledgeBase, queries: np.ndarray) -> np.ndarray:
    """Squared L2 distances (Q, M); both backends realize the identical fold."""
    global _kernel_broken
    out = np.empty((queries.shape[0], kb.size))
    if _sq_dists_kernel is not None and not _kernel_broken:
        try:
            _sq_dists_kernel(kb._entries_t64, np.ascontiguousarray(queries), out)
            return out
        except Exception:  # compilation or runtime failure: use the reference path
            _kernel_broken = True
    _sq_dists_numpy(kb._entries_t64, queries, out)
    return out


def search_batch(kb: KnowledgeBase, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k exact L2 matches for each query row.

    Returns (image_ids, labels, distances), each of shape (Q, k), rows
    ascending by distance with ties broken by ascending image_id.
    """
    queries = _check_query(kb, queries, k)
    n_q = queries.shape[0]
    distances = np.sqrt(_sq_dists(kb, queries))
    # entries are stored ascending by image_id, so a stable sort on distance
    # breaks ties by ascending image_id (argmin picks the first minimum)
    if k == 1:
        top = np.argmin(distances, axis=1)[:, None]
    else:
        top = np.argsort(distances, axis=1, kind="stable")[:, :k]
    rows = np.arange(n_q)[:, None]
    return kb.image_ids[top], kb.labels[top], distances[rows, top]


def search(kb: KnowledgeBase, query: np.ndarray, k: int) -> list[Match]:
    """Top-k matches for one query, ascending by distance."""
    ids, labels, dists = search_batch(kb, np.asarray(query).reshape(1, -1), k)
    return [Match(int(i), int(l), float(d)) for i, l, d in zip(ids[0], labels[0], dists[0])]


def retrieve(kb: KnowledgeBase, query: np.ndarray) -> Match:
    """The single nearest entry (search with k=1)."""
    return search(kb, query, 1)[0]


def brute_force_search(kb: KnowledgeBase, query: np.ndarray, k: int) -> list[Match]:
    """Oracle: plain full scan, one query at a time.

    Each entry row gets a cumulative sum over the vector index, which is
    the same sequential fold the optimized path implements; kept
    independent of search_batch on purpose. Rows are scanned in blocks
    only to bound the scratch memory.
    """
    query = _check_query(kb, np.asarray(query).reshape(1, -1), k)[0]
    sq = np.empty(kb.size)
    for start in range(0, kb.size, _SCAN_BLOCK):
        block = kb._entries64[start : start + _SCAN_BLOCK]
        diff = block - query
        sq[start : start + block.shape[0]] = np.cumsum(diff * diff, axis=1)[:, -1]
    distances = np.sqrt(sq)
    top = np.argsort(distances, kind="stable")[:k]
    return [Match(int(kb.image_ids[i]), int(kb.labels[i]), float(distances[i])) for i in top]
