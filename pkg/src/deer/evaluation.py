"""Recall@k evaluation and latency benchmarking over a uniform retriever
contract, with text/CSV/JSON comparison reports.

Every system (dense retrieval over any index kind, alias tables, BM25) is
wrapped as a Retriever returning ranked candidate ids for a mention, so the
same harness scores them all. Latency runs are single-threaded; BLAS thread
pools are pinned to one thread during timing when threadpoolctl is present,
keeping methods comparable.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import io
import json
import time
from typing import Callable, Protocol, Sequence

import numpy as np

from .baselines import AliasTable, Bm25Index, alias_lookup, bm25_search
from .corpus import EntityCatalog, MentionExample
from .features import NgramVocabulary
from .index import AhIndex, TreeAhIndex, VectorStore, search_ah, search_brute, search_tree_ah
from .model import ModelParams, encode_mention
from .training import featurize_mention_map


class Retriever(Protocol):
    name: str

    def retrieve(self, example: MentionExample, k: int) -> list[str]:
        """Ranked candidate entity ids, at most k, no duplicates."""


class DenseRetriever:
    """Encodes the mention and searches a vector index (any kind)."""

    def __init__(
        self,
        params: ModelParams,
        vocab: NgramVocabulary,
        index: "VectorStore | AhIndex | TreeAhIndex",
        name: str | None = None,
        probes: int = 1,
        rescore: int = 0,
    ):
        self.params = params
        self.vocab = vocab
        self.index = index
        self.probes = probes
        self.rescore = rescore
        if name is None:
            name = {
                VectorStore: "deer-brute",
                AhIndex: "deer-ah",
                TreeAhIndex: "deer-tree-ah",
            }[type(index)]
        self.name = name

    def encode(self, example: MentionExample) -> np.ndarray:
        return encode_mention(example.features, self.params, self.vocab)

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        if isinstance(self.index, VectorStore):
            return search_brute(self.index, query, k)
        if isinstance(self.index, AhIndex):
            return search_ah(self.index, query, k, rescore=self.rescore)
        return search_tree_ah(self.index, query, k, probes=self.probes, rescore=self.rescore)

    def retrieve(self, example: MentionExample, k: int) -> list[str]:
        return [eid for eid, _ in self.search(self.encode(example), k)]


class AliasTableRetriever:
    def __init__(self, table: AliasTable, name: str = "at-prior"):
        self.table = table
        self.name = name

    def retrieve(self, example: MentionExample, k: int) -> list[str]:
        span_text = " ".join(example.features.span.tokens)
        return [eid for eid, _ in alias_lookup(self.table, span_text, k)]


class Bm25Retriever:
    def __init__(self, index: Bm25Index, name: str = "bm25"):
        self.index = index
        self.name = name

    def retrieve(self, example: MentionExample, k: int) -> list[str]:
        span_text = " ".join(example.features.span.tokens)
        return [eid for eid, _ in bm25_search(self.index, span_text, k)]


def recall_at_k(rankings: Sequence[Sequence[str]], gold: Sequence[str], k: int) -> float:
    """Share of queries whose gold id appears in the first k results."""
    if len(rankings) != len(gold):
        raise ValueError("rankings and gold must align")
    if not rankings:
        raise ValueError("empty query set")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = sum(1 for ranked, g in zip(rankings, gold) if g in list(ranked)[:k])
    return hits / len(gold)


@dataclasses.dataclass
class EvalRow:
    """One system's metrics: recalls keyed by k plus latency summary."""

    name: str
    recalls: dict[int, float]
    mean_ms: float
    p50_ms: float
    p99_ms: float
    queries: int


def evaluate_retriever(
    retriever: Retriever,
    examples: Sequence[MentionExample],
    catalog: EntityCatalog,
    ks: Sequence[int] = (1, 100),
    strict: bool = True,
) -> EvalRow:
    """One retrieval pass at max(ks); recall measured at every requested k.

    Gold entities missing from the catalog are an error (the protocol is
    in-KB); with ``strict=False`` such queries are skipped instead.
    """
    if not examples:
        raise ValueError("empty evaluation set")
    kept: list[MentionExample] = []
    for example in examples:
        if example.gold_entity_id not in catalog:
            if strict:
                raise ValueError(
                    f"gold entity {example.gold_entity_id!r} for mention "
                    f"{example.mention_id!r} is missing from the catalog"
                )
            continue
        kept.append(example)
    if not kept:
        raise ValueError("no evaluable queries after skipping out-of-catalog golds")
    k_max = max(ks)
    rankings: list[list[str]] = []
    timings = np.empty(len(kept))
    for i, example in enumerate(kept):
        started = time.perf_counter()
        ranked = retriever.retrieve(example, k_max)
        timings[i] = time.perf_counter() - started
        if len(ranked) != len(set(ranked)):
            raise ValueError(f"{retriever.name}: duplicate candidates returned")
        if len(ranked) > k_max:
            raise ValueError(f"{retriever.name}: returned more than k candidates")
        rankings.append(ranked)
    gold = [example.gold_entity_id for example in kept]
    recalls = {k: recall_at_k(rankings, gold, k) for k in ks}
    timings_ms = timings * 1e3
    return EvalRow(
        name=retriever.name,
        recalls=recalls,
        mean_ms=float(timings_ms.mean()),
        p50_ms=float(np.percentile(timings_ms, 50)),
        p99_ms=float(np.percentile(timings_ms, 99)),
        queries=len(kept),
    )


@contextlib.contextmanager
def _single_threaded_blas():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


@dataclasses.dataclass
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p99_ms: float


def latency_benchmark(
    search: Callable[[np.ndarray], object],
    queries: Sequence[np.ndarray],
    warmup: int = 5,
    repeats: int = 1,
) -> LatencyStats:
    """Single-threaded per-query wall-clock timing after warmup calls."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if len(queries) == 0:
        raise ValueError("need at least one query")
    with _single_threaded_blas():
        for query in list(queries)[:warmup]:
            search(query)
        samples = np.empty(len(queries) * repeats)
        pos = 0
        for _ in range(repeats):
            for query in queries:
                started = time.perf_counter()
                search(query)
                samples[pos] = time.perf_counter() - started
                pos += 1
    samples *= 1e3
    return LatencyStats(
        mean_ms=float(samples.mean()),
        p50_ms=float(np.percentile(samples, 50)),
        p99_ms=float(np.percentile(samples, 99)),
    )


def ranking_overlap(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """|candidate ∩ reference| / |reference| for two top-k id lists."""
    if not reference:
        raise ValueError("reference ranking is empty")
    return len(set(candidate) & set(reference)) / len(reference)


@dataclasses.dataclass
class BenchmarkRow:
    method: str
    mean_ms: float
    p50_ms: float
    p99_ms: float
    recall_overlap: float


def benchmark_methods(
    methods: dict[str, Callable[[np.ndarray], list[tuple[str, float]]]],
    queries: Sequence[np.ndarray],
    k: int,
    reference: str = "brute",
    warmup: int = 5,
    repeats: int = 1,
) -> list[BenchmarkRow]:
    """Time every search method on the same queries and measure top-k overlap
    against the reference method's results."""
    if reference not in methods:
        raise ValueError(f"reference method {reference!r} not among methods")
    reference_tops = [[eid for eid, _ in methods[reference](q)] for q in queries]
    rows = []
    for name, search in methods.items():
        stats = latency_benchmark(search, queries, warmup=warmup, repeats=repeats)
        overlaps = [
            ranking_overlap([eid for eid, _ in search(q)], ref)
            for q, ref in zip(queries, reference_tops)
            if ref
        ]
        rows.append(
            BenchmarkRow(
                method=name,
                mean_ms=stats.mean_ms,
                p50_ms=stats.p50_ms,
                p99_ms=stats.p99_ms,
                recall_overlap=float(np.mean(overlaps)) if overlaps else float("nan"),
            )
        )
    return rows


def benchmark_csv(rows: Sequence[BenchmarkRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["method", "mean_ms", "p50_ms", "p99_ms", "recall_overlap"])
    for row in rows:
        writer.writerow(
            [row.method, f"{row.mean_ms:.4f}", f"{row.p50_ms:.4f}", f"{row.p99_ms:.4f}",
             f"{row.recall_overlap:.4f}"]
        )
    return out.getvalue()


def comparison_report(rows: Sequence[EvalRow]) -> str:
    """Aligned text table over systems, sorted by name."""
    if not rows:
        raise ValueError("need at least one evaluation row")
    rows = sorted(rows, key=lambda r: r.name)
    ks = sorted({k for row in rows for k in row.recalls})
    headers = ["system"] + [f"r@{k}" for k in ks] + ["mean_ms", "p50_ms", "p99_ms", "queries"]
    table = [headers]
    for row in rows:
        table.append(
            [row.name]
            + [f"{row.recalls.get(k, float('nan')):.4f}" for k in ks]
            + [f"{row.mean_ms:.3f}", f"{row.p50_ms:.3f}", f"{row.p99_ms:.3f}", str(row.queries)]
        )
    widths = [max(len(line[col]) for line in table) for col in range(len(headers))]
    lines = []
    for i, line in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(line)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * widths[c] for c in range(len(headers))))
    return "\n".join(lines) + "\n"


def report_csv(rows: Sequence[EvalRow]) -> str:
    rows = sorted(rows, key=lambda r: r.name)
    ks = sorted({k for row in rows for k in row.recalls})
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["system"] + [f"r_at_{k}" for k in ks]
                    + ["mean_ms", "p50_ms", "p99_ms", "queries"])
    for row in rows:
        writer.writerow(
            [row.name]
            + [f"{row.recalls.get(k, float('nan')):.6f}" for k in ks]
            + [f"{row.mean_ms:.6f}", f"{row.p50_ms:.6f}", f"{row.p99_ms:.6f}", row.queries]
        )
    return out.getvalue()


def report_json(rows: Sequence[EvalRow]) -> str:
    payload = [
        {
            "system": row.name,
            "recalls": {str(k): row.recalls[k] for k in sorted(row.recalls)},
            "mean_ms": row.mean_ms,
            "p50_ms": row.p50_ms,
            "p99_ms": row.p99_ms,
            "queries": row.queries,
        }
        for row in sorted(rows, key=lambda r: r.name)
    ]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_reports(rows: Sequence[EvalRow], outdir) -> None:
    """Emit report.txt / report.csv / report.json side by side."""
    from pathlib import Path

    outdir = Path(outdir)
    (outdir / "report.txt").write_text(comparison_report(rows), encoding="utf-8")
    (outdir / "report.csv").write_text(report_csv(rows), encoding="utf-8")
    (outdir / "report.json").write_text(report_json(rows), encoding="utf-8")
