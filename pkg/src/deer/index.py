"""Retrieval over pre-computed entity encodings.

Three interchangeable structures:

* brute force: rows are L2-normalized once at build, so exact cosine top-k
  is a single matrix-vector product;
* asymmetric hashing (AH): product quantization with per-query lookup
  tables. Database vectors are split into S subspaces and each subvector
  replaced by the index of its nearest k-means centroid; queries stay exact
  and score items by summing S table lookups. An optional rescoring stage
  re-ranks a shortlist with exact dot products (quantized rankings alone
  degrade quickly on weakly clustered data);
* tree + AH: a k-means partition prunes the database to the ``probes`` most
  query-aligned cells, which are then scanned with the same AH tables. All
  partitions share one codebook set, so probing every cell reproduces plain
  AH exactly.

Result ordering is always score-descending with ties broken by ascending
id; stores keep rows sorted by id so row index doubles as the tie rank.
Scan loops are numba-compiled when numba is importable and fall back to
vectorized numpy otherwise.
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import Sequence

import numpy as np

from ._binio import _HAVE_NUMBA, ChecksumReader, ChecksumWriter, FormatError
from .model import DEGENERATE_NORM, DegenerateVectorWarning

_INDEX_MAGIC = b"DEERIDX1"
_INDEX_VERSION = 1
_KIND_BRUTE, _KIND_AH, _KIND_TREE = 0, 1, 2


def kmeans(
    vectors: np.ndarray, k: int, max_iters: int = 25, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Runs until the assignment reaches a fixpoint or ``max_iters`` passes;
    empty clusters are re-seeded from the point currently farthest from its
    centroid. Returns (centroids (k, d), assignments (M,)).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    m = vectors.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if m < k:
        raise ValueError(f"need at least k={k} vectors, got {m}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, vectors.shape[1]), dtype=np.float64)
    first = int(rng.integers(m))
    centroids[0] = vectors[first]
    chosen = {first}
    d2 = ((vectors - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:  # duplicates exhausted the spread; take the first unused point
            idx = next(i for i in range(m) if i not in chosen)
        chosen.add(idx)
        centroids[j] = vectors[idx]
        d2 = np.minimum(d2, ((vectors - centroids[j]) ** 2).sum(axis=1))

    assignments = np.full(m, -1, dtype=np.int64)
    sq_norms = (vectors**2).sum(axis=1)
    for _ in range(max_iters):
        dists = sq_norms[:, None] - 2.0 * (vectors @ centroids.T) + (centroids**2).sum(axis=1)
        new_assignments = np.argmin(dists, axis=1)
        point_cost = dists[np.arange(m), new_assignments]
        # hand farthest points to empty clusters (one at a time, since a
        # donation can empty the donor) before updating means
        while True:
            counts = np.bincount(new_assignments, minlength=k)
            empties = np.flatnonzero(counts == 0)
            if empties.size == 0:
                break
            farthest = int(np.argmax(point_cost))
            new_assignments[farthest] = empties[0]
            point_cost[farthest] = -np.inf
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            centroids[j] = vectors[assignments == j].mean(axis=0)
    return centroids, assignments


def distortion(vectors: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    """Total squared distance of points to their assigned centroids."""
    diffs = np.asarray(vectors, dtype=np.float64) - centroids[assignments]
    return float((diffs**2).sum())


@dataclasses.dataclass
class VectorStore:
    """Unit-normalized vectors with ids, rows sorted by ascending id."""

    matrix: np.ndarray  # (N, D) float32, unit rows
    ids: list[str]

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def width(self) -> int:
        return int(self.matrix.shape[1])


def build_brute(encodings: np.ndarray, ids: Sequence[str]) -> VectorStore:
    """Normalize rows once so search reduces to dot products."""
    encodings = np.asarray(encodings, dtype=np.float64)
    if encodings.ndim != 2 or encodings.shape[0] != len(ids):
        raise ValueError("need one id per encoding row")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    norms = np.linalg.norm(encodings, axis=1)
    dead = np.flatnonzero(norms < DEGENERATE_NORM)
    if dead.size:
        raise ValueError(f"zero vector for id {ids[int(dead[0])]!r} cannot be indexed")
    order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
    matrix = (encodings[order] / norms[order, None]).astype(np.float32)
    return VectorStore(matrix=matrix, ids=[ids[int(i)] for i in order])


def _normalize_query(query: np.ndarray) -> np.ndarray | None:
    query = np.asarray(query, dtype=np.float64)
    norm = np.linalg.norm(query)
    if norm < DEGENERATE_NORM:
        warnings.warn(
            "degenerate (near-zero) query vector; returning no results",
            DegenerateVectorWarning,
        )
        return None
    return (query / norm).astype(np.float32)


def _select_top(scores: np.ndarray, k: int, tie_ranks: np.ndarray | None = None) -> np.ndarray:
    """Indices of the k best scores, score-descending then rank-ascending.

    Boundary ties are resolved exactly: every row tied with the kth score is
    considered before the rank rule cuts the list. ``tie_ranks`` defaults to
    the row index.
    """
    n = scores.shape[0]
    k = min(k, n)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    neg = -scores.astype(np.float64)
    if k < n:
        kth = np.partition(neg, k - 1)[k - 1]
        cand = np.flatnonzero(neg <= kth)
    else:
        cand = np.arange(n)
    ranks = cand if tie_ranks is None else tie_ranks[cand]
    order = np.lexsort((ranks, neg[cand]))
    return cand[order[:k]].astype(np.int64)


def search_brute(store: VectorStore, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact cosine top-k, descending, ties by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _normalize_query(query)
    if q is None:
        return []
    scores = store.matrix @ q
    rows = _select_top(scores, k)
    return [(store.ids[int(r)], float(scores[r])) for r in rows]


@dataclasses.dataclass
class Codebooks:
    """Per-subspace k-means centroids: shape (S, C, D // S)."""

    centroids: np.ndarray  # float32

    @property
    def subspaces(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def centers(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def subspace_width(self) -> int:
        return int(self.centroids.shape[2])


def train_quantizer(
    store: VectorStore,
    subspaces: int,
    centers: int,
    seed: int,
    train_sample: int | None = None,
) -> Codebooks:
    """One k-means per subspace over the store's (normalized) rows.

    ``train_sample`` caps how many rows feed each k-means (codes are still
    assigned to every row); None trains on everything.
    """
    d = store.width
    if subspaces < 1 or d % subspaces != 0:
        raise ValueError(f"subspaces={subspaces} must divide the vector width {d}")
    if store.size < centers:
        raise ValueError(f"need at least centers={centers} vectors, got {store.size}")
    width = d // subspaces
    rows = store.matrix
    seeds = np.random.SeedSequence(seed).spawn(subspaces + 1)
    if train_sample is not None and centers <= train_sample < store.size:
        rng = np.random.default_rng(seeds[subspaces])
        rows = rows[rng.choice(store.size, size=train_sample, replace=False)]
    centroids = np.empty((subspaces, centers, width), dtype=np.float32)
    for s in range(subspaces):
        sub = rows[:, s * width : (s + 1) * width]
        cent, _ = kmeans(sub, centers, seed=int(seeds[s].generate_state(1)[0]))
        centroids[s] = cent.astype(np.float32)
    return Codebooks(centroids=centroids)


def encode_pq(vectors: np.ndarray, codebooks: Codebooks) -> np.ndarray:
    """Nearest-centroid index per subspace (ties to the lowest index)."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
    s, c, width = codebooks.centroids.shape
    if vectors.shape[1] != s * width:
        raise ValueError(
            f"vector width {vectors.shape[1]} does not match codebooks ({s}x{width})"
        )
    dtype = np.uint8 if c <= 256 else np.uint16
    n = vectors.shape[0]
    codes = np.empty((n, s), dtype=dtype)
    chunk = max(1024, (1 << 22) // max(c, 1))  # keep the distance block around 32 MB
    for j in range(s):
        cent = codebooks.centroids[j].astype(np.float64)
        cent_norms = (cent**2).sum(axis=1)
        for lo in range(0, n, chunk):
            sub = vectors[lo : lo + chunk, j * width : (j + 1) * width].astype(np.float64)
            dists = (sub**2).sum(axis=1, keepdims=True) - 2.0 * (sub @ cent.T) + cent_norms
            codes[lo : lo + chunk, j] = np.argmin(dists, axis=1)
    return codes


@dataclasses.dataclass
class AhIndex:
    """Quantization-based asymmetric hashing over a vector store.

    Keeps the exact store alongside the codes so shortlists can be rescored
    with true dot products.
    """

    store: VectorStore
    codebooks: Codebooks
    codes: np.ndarray  # (N, S) uint8 or uint16


def build_ah(
    store: VectorStore,
    subspaces: int,
    centers: int,
    seed: int,
    train_sample: int | None = 20_000,
) -> AhIndex:
    codebooks = train_quantizer(store, subspaces, centers, seed, train_sample=train_sample)
    return AhIndex(store=store, codebooks=codebooks, codes=encode_pq(store.matrix, codebooks))


if _HAVE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _scan_scores(codes, lut, out):
        n, s = codes.shape
        for i in range(n):
            acc = np.float32(0.0)
            for j in range(s):
                acc += lut[j, codes[i, j]]
            out[i] = acc

    @njit(cache=True)
    def _scan_heap(codes, lut, ranks, out_scores, out_ranks):
        """Single-pass ADC scan keeping the top-k by (score desc, rank asc).

        ``out_scores``/``out_ranks`` form a min-heap whose root is the
        current worst kept item.
        """
        n, s = codes.shape
        k = out_scores.shape[0]
        for i in range(n):
            acc = np.float32(0.0)
            for j in range(s):
                acc += lut[j, codes[i, j]]
            rank = ranks[i]
            root_s = out_scores[0]
            if acc < root_s or (acc == root_s and rank > out_ranks[0]):
                continue
            out_scores[0] = acc
            out_ranks[0] = rank
            pos = 0
            while True:
                left = 2 * pos + 1
                right = left + 1
                worst = pos
                if left < k and (
                    out_scores[left] < out_scores[worst]
                    or (out_scores[left] == out_scores[worst] and out_ranks[left] > out_ranks[worst])
                ):
                    worst = left
                if right < k and (
                    out_scores[right] < out_scores[worst]
                    or (out_scores[right] == out_scores[worst] and out_ranks[right] > out_ranks[worst])
                ):
                    worst = right
                if worst == pos:
                    break
                out_scores[pos], out_scores[worst] = out_scores[worst], out_scores[pos]
                out_ranks[pos], out_ranks[worst] = out_ranks[worst], out_ranks[pos]
                pos = worst


def _adc_scores(codes: np.ndarray, lut: np.ndarray) -> np.ndarray:
    """Vectorized table-lookup scores for every coded item (fallback path)."""
    scores = lut[0].take(codes[:, 0])
    tmp = np.empty_like(scores)
    for j in range(1, codes.shape[1]):
        np.take(lut[j], codes[:, j], out=tmp)
        scores = scores + tmp
    return scores


def _query_lut(codebooks: Codebooks, query: np.ndarray) -> np.ndarray:
    s, _, width = codebooks.centroids.shape
    parts = query.reshape(s, width).astype(np.float32)
    return np.einsum("scd,sd->sc", codebooks.centroids, parts).astype(np.float32)


_HEAP_K_LIMIT = 128  # beyond this a full score pass + partition select is faster


def _scan_top(codes: np.ndarray, lut: np.ndarray, ranks: np.ndarray, k: int) -> np.ndarray:
    """Top-k row ranks by ADC score with exact (score, id) tie handling."""
    n = codes.shape[0]
    k = min(k, n)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if _HAVE_NUMBA:
        codes = np.ascontiguousarray(codes)
        if k <= _HEAP_K_LIMIT:
            heap_scores = np.full(k, -np.inf, dtype=np.float32)
            heap_ranks = np.full(k, np.iinfo(np.int64).max, dtype=np.int64)
            _scan_heap(codes, lut, ranks, heap_scores, heap_ranks)
            order = np.lexsort((heap_ranks, -heap_scores.astype(np.float64)))
            return heap_ranks[order]
        scores = np.empty(n, dtype=np.float32)
        _scan_scores(codes, lut, scores)
    else:
        scores = _adc_scores(codes, lut)
    picked = _select_top(scores, k, tie_ranks=ranks)
    return ranks[picked]


def search_ah(
    index: AhIndex, query: np.ndarray, k: int, rescore: int = 0
) -> list[tuple[str, float]]:
    """Approximate top-k via per-query lookup tables.

    With ``rescore`` > 0 the top ``max(k, rescore)`` items by approximate
    score are re-ranked by exact dot products before the final cut; reported
    scores are then exact. With ``rescore`` = 0 rankings and scores come
    straight from the quantized sums.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _normalize_query(query)
    if q is None:
        return []
    lut = _query_lut(index.codebooks, q)
    ranks = np.arange(index.store.size, dtype=np.int64)
    if rescore > 0:
        shortlist = _scan_top(index.codes, lut, ranks, max(k, rescore))
        exact = index.store.matrix[shortlist] @ q
        order = np.lexsort((shortlist, -exact.astype(np.float64)))[: min(k, shortlist.size)]
        return [(index.store.ids[int(shortlist[i])], float(exact[i])) for i in order]
    top = _scan_top(index.codes, lut, ranks, k)
    scores = _adc_scores(index.codes[top], lut) if top.size else np.empty(0)
    return [(index.store.ids[int(r)], float(s)) for r, s in zip(top, scores)]


@dataclasses.dataclass
class TreeAhIndex:
    """Coarse k-means partitions over an AH-coded store.

    Rows are grouped per partition (CSR layout); codebooks are global, so
    scanning all partitions is exactly plain AH.
    """

    store: VectorStore
    codebooks: Codebooks
    centroids: np.ndarray  # (P, D) float32 partition centers
    offsets: np.ndarray  # (P + 1,) int64 into the grouped arrays
    member_ranks: np.ndarray  # (N,) int64 store row per grouped position
    grouped_codes: np.ndarray  # (N, S) codes in grouped order

    @property
    def partitions(self) -> int:
        return int(self.centroids.shape[0])


def build_tree_ah(
    store: VectorStore,
    partitions: int,
    subspaces: int,
    centers: int,
    seed: int,
    coarse_sample: int | None = 20_000,
    train_sample: int | None = 20_000,
) -> TreeAhIndex:
    """Partition with k-means, then AH-code every row with global codebooks.

    ``coarse_sample`` caps how many rows train the partition centroids
    (assignment still covers every row); pass None to train on everything.
    """
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    if store.size < partitions:
        raise ValueError("more partitions than vectors")
    seeds = np.random.SeedSequence(seed).spawn(3)
    codebooks = train_quantizer(
        store, subspaces, centers, int(seeds[0].generate_state(1)[0]), train_sample=train_sample
    )

    rows = store.matrix.astype(np.float64)
    if coarse_sample is not None and store.size > coarse_sample >= partitions:
        rng = np.random.default_rng(seeds[1])
        sample = rows[rng.choice(store.size, size=coarse_sample, replace=False)]
    else:
        sample = rows
    centroids, _ = kmeans(sample, partitions, seed=int(seeds[2].generate_state(1)[0]))
    dists = (
        (rows**2).sum(axis=1, keepdims=True)
        - 2.0 * (rows @ centroids.T)
        + (centroids**2).sum(axis=1)
    )
    assignment = np.argmin(dists, axis=1)

    member_ranks = np.argsort(assignment, kind="stable").astype(np.int64)
    counts = np.bincount(assignment, minlength=partitions)
    offsets = np.zeros(partitions + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    codes = encode_pq(store.matrix, codebooks)
    return TreeAhIndex(
        store=store,
        codebooks=codebooks,
        centroids=centroids.astype(np.float32),
        offsets=offsets,
        member_ranks=member_ranks,
        grouped_codes=np.ascontiguousarray(codes[member_ranks]),
    )


def search_tree_ah(
    index: TreeAhIndex, query: np.ndarray, k: int, probes: int, rescore: int = 0
) -> list[tuple[str, float]]:
    """Scan the ``probes`` partitions whose centroids best match the query,
    scoring members with the shared AH tables."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if probes < 1:
        raise ValueError("probes must be >= 1")
    q = _normalize_query(query)
    if q is None:
        return []
    lut = _query_lut(index.codebooks, q)
    part_scores = index.centroids @ q
    probe_ids = np.argsort(-part_scores.astype(np.float64), kind="stable")[
        : min(probes, index.partitions)
    ]
    spans = [(int(index.offsets[p]), int(index.offsets[p + 1])) for p in probe_ids]
    spans = [(lo, hi) for lo, hi in spans if hi > lo]
    if not spans:
        return []
    codes = np.vstack([index.grouped_codes[lo:hi] for lo, hi in spans])
    ranks = np.concatenate([index.member_ranks[lo:hi] for lo, hi in spans])
    shortlist = _scan_top(codes, lut, ranks, max(k, rescore) if rescore > 0 else k)
    if rescore > 0:
        exact = index.store.matrix[shortlist] @ q
        order = np.lexsort((shortlist, -exact.astype(np.float64)))[: min(k, shortlist.size)]
        return [(index.store.ids[int(shortlist[i])], float(exact[i])) for i in order]
    rank_pos = {int(r): i for i, r in enumerate(ranks)}
    positions = np.array([rank_pos[int(r)] for r in shortlist], dtype=np.int64)
    scores = _adc_scores(codes[positions], lut) if shortlist.size else np.empty(0)
    return [(index.store.ids[int(r)], float(s)) for r, s in zip(shortlist, scores)]


def _write_store(writer: ChecksumWriter, store: VectorStore) -> None:
    writer.write_u32(store.size)
    writer.write_u32(store.width)
    for entity_id in store.ids:
        writer.write_str(entity_id)
    writer.write_f32_array(store.matrix)


def _read_store(reader: ChecksumReader) -> VectorStore:
    n = reader.read_u32()
    d = reader.read_u32()
    ids = [reader.read_str() for _ in range(n)]
    return VectorStore(matrix=reader.read_f32_array((n, d)), ids=ids)


def _write_codes(writer: ChecksumWriter, codes: np.ndarray) -> None:
    writer.write_u32(1 if codes.dtype == np.uint8 else 2)
    writer.write_array(codes, "<u1" if codes.dtype == np.uint8 else "<u2")


def _read_codes(reader: ChecksumReader, shape: tuple) -> np.ndarray:
    tag = reader.read_u32()
    if tag not in (1, 2):
        raise FormatError(f"unknown code dtype tag {tag}")
    return reader.read_array(shape, "<u1" if tag == 1 else "<u2")


def save_index(index: "VectorStore | AhIndex | TreeAhIndex", path) -> None:
    """Serialize any index kind (magic, kind tag, dims, arrays, CRC-32C)."""
    writer = ChecksumWriter(_INDEX_MAGIC)
    writer.write_u32(_INDEX_VERSION)
    if isinstance(index, VectorStore):
        writer.write_u32(_KIND_BRUTE)
        _write_store(writer, index)
    elif isinstance(index, AhIndex):
        writer.write_u32(_KIND_AH)
        _write_store(writer, index.store)
        writer.write_u32(index.codebooks.subspaces)
        writer.write_u32(index.codebooks.centers)
        writer.write_f32_array(index.codebooks.centroids)
        _write_codes(writer, index.codes)
    elif isinstance(index, TreeAhIndex):
        writer.write_u32(_KIND_TREE)
        _write_store(writer, index.store)
        writer.write_u32(index.codebooks.subspaces)
        writer.write_u32(index.codebooks.centers)
        writer.write_f32_array(index.codebooks.centroids)
        writer.write_u32(index.partitions)
        writer.write_f32_array(index.centroids)
        writer.write_array(index.offsets, "<i8")
        writer.write_array(index.member_ranks, "<i8")
        _write_codes(writer, index.grouped_codes)
    else:
        raise TypeError(f"cannot serialize index of type {type(index).__name__}")
    writer.save(path)


def load_index(path) -> "VectorStore | AhIndex | TreeAhIndex":
    reader = ChecksumReader(path, _INDEX_MAGIC)
    version = reader.read_u32()
    if version != _INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    kind = reader.read_u32()
    if kind == _KIND_BRUTE:
        store = _read_store(reader)
        reader.expect_end()
        return store
    if kind == _KIND_AH:
        store = _read_store(reader)
        s = reader.read_u32()
        c = reader.read_u32()
        codebooks = Codebooks(reader.read_f32_array((s, c, store.width // s)))
        codes = _read_codes(reader, (store.size, s))
        reader.expect_end()
        return AhIndex(store=store, codebooks=codebooks, codes=codes)
    if kind == _KIND_TREE:
        store = _read_store(reader)
        s = reader.read_u32()
        c = reader.read_u32()
        codebooks = Codebooks(reader.read_f32_array((s, c, store.width // s)))
        p = reader.read_u32()
        centroids = reader.read_f32_array((p, store.width))
        offsets = reader.read_array((p + 1,), "<i8")
        member_ranks = reader.read_array((store.size,), "<i8")
        codes = _read_codes(reader, (store.size, s))
        reader.expect_end()
        return TreeAhIndex(
            store=store,
            codebooks=codebooks,
            centroids=centroids,
            offsets=offsets,
            member_ranks=member_ranks,
            grouped_codes=codes,
        )
    raise FormatError(f"{path}: unknown index kind tag {kind}")


def default_ah_config(width: int) -> tuple[int, int]:
    """Default (subspaces, centers) for a given vector width."""
    subspaces = max(1, width // 4)
    return subspaces, 16


def default_tree_config(size: int) -> tuple[int, int]:
    """Default (partitions, probes) for a given store size."""
    partitions = max(1, int(np.ceil(np.sqrt(size))))
    return partitions, max(1, partitions // 20)
