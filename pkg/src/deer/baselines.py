"""Discrete retrieval baselines.

* AT-Prior: an alias table counting (mention span, entity) pairs in the
  training data; candidates are ordered by the empirical prior
  P(e | m) = count(e, m) / sum_e' count(e', m) and truncated to the top 100.
* AT-Ext: the same table extended with unigrams and bigrams of the span
  text as additional aliases (credited to the gold entity), consulted only
  when the exact alias misses.
* BM25: Okapi BM25 over tokenized entity titles.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import Counter, defaultdict
from typing import Iterable, Sequence

from .corpus import EntityCatalog, MentionExample
from .features import extract_ngrams, tokenize

ALIAS_CANDIDATE_LIMIT = 100


def normalize_alias(text: str) -> str:
    """Tokenizer-based normalization: lowercased tokens joined by one space."""
    return " ".join(tokenize(text))


def _ranked_candidates(
    counts: dict[tuple[str, str], int]
) -> dict[str, list[tuple[str, float]]]:
    per_alias: dict[str, list[tuple[str, int]]] = defaultdict(list)
    for (alias, entity_id), count in counts.items():
        per_alias[alias].append((entity_id, count))
    entries: dict[str, list[tuple[str, float]]] = {}
    for alias, pairs in per_alias.items():
        total = sum(count for _, count in pairs)
        ranked = sorted(pairs, key=lambda p: (-p[1] / total, p[0]))
        entries[alias] = [(eid, count / total) for eid, count in ranked[:ALIAS_CANDIDATE_LIMIT]]
    return entries


@dataclasses.dataclass
class AliasTable:
    """Span-string -> prior-ordered candidates, with optional extension table
    consulted on exact-alias misses."""

    entries: dict[str, list[tuple[str, float]]]
    counts: dict[tuple[str, str], int]
    extension: "AliasTable | None" = None

    def __len__(self) -> int:
        return len(self.entries)


def _span_text(example: MentionExample) -> str:
    return " ".join(example.features.span.tokens)


def build_alias_table(train: Iterable[MentionExample]) -> AliasTable:
    """Count every (normalized span, gold entity) pair in the training set."""
    counts: Counter = Counter()
    for example in train:
        alias = normalize_alias(_span_text(example))
        if alias:
            counts[(alias, example.gold_entity_id)] += 1
    return AliasTable(entries=_ranked_candidates(counts), counts=dict(counts))


def extend_alias_table(
    table: AliasTable, train: Iterable[MentionExample], mode: str = "precedence"
) -> AliasTable:
    """Add span unigrams and bigrams as extra aliases for the gold entity.

    ``precedence`` keeps the original table authoritative and consults the
    extension only when an alias misses; ``merged`` folds the extra counts
    into one table and re-ranks everything.
    """
    if mode not in ("precedence", "merged"):
        raise ValueError(f"unknown extension mode {mode!r}")
    extra: Counter = Counter()
    for example in train:
        tokens = tokenize(_span_text(example))
        unigrams, bigrams = extract_ngrams(tokens)
        aliases = {normalize_alias(u) for u in unigrams}
        aliases.update(" ".join(b) for b in bigrams)
        aliases.discard("")
        for alias in aliases:  # set semantics: one credit per mention
            extra[(alias, example.gold_entity_id)] += 1
    if mode == "merged":
        merged = Counter(table.counts)
        merged.update(extra)
        return AliasTable(entries=_ranked_candidates(merged), counts=dict(merged))
    extension = AliasTable(entries=_ranked_candidates(extra), counts=dict(extra))
    return AliasTable(entries=table.entries, counts=table.counts, extension=extension)


def alias_lookup(table: AliasTable, span_text: str, k: int) -> list[tuple[str, float]]:
    """Exact-match lookup of the normalized span; unknown aliases yield []."""
    if k < 1:
        raise ValueError("k must be >= 1")
    alias = normalize_alias(span_text)
    candidates = table.entries.get(alias)
    if candidates is None and table.extension is not None:
        candidates = table.extension.entries.get(alias)
    if candidates is None:
        return []
    return candidates[:k]


def save_alias_table(table: AliasTable, path) -> None:
    """JSON Lines export; extension aliases follow the originals, so a
    first-occurrence-wins reload reproduces lookup precedence."""
    with open(path, "w", encoding="utf-8") as fh:
        for alias, candidates in sorted(table.entries.items()):
            fh.write(json.dumps({"alias": alias, "candidates": candidates}) + "\n")
        if table.extension is not None:
            for alias, candidates in sorted(table.extension.entries.items()):
                if alias not in table.entries:
                    fh.write(json.dumps({"alias": alias, "candidates": candidates}) + "\n")


def load_alias_table(path) -> AliasTable:
    entries: dict[str, list[tuple[str, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj["alias"] not in entries:
                entries[obj["alias"]] = [(str(e), float(p)) for e, p in obj["candidates"]]
    return AliasTable(entries=entries, counts={})


@dataclasses.dataclass
class Bm25Index:
    """Inverted index over tokenized entity titles."""

    postings: dict[str, list[tuple[int, int]]]  # token -> [(doc index, tf)]
    doc_lengths: list[int]
    avgdl: float
    ids: list[str]
    k1: float = 1.5
    b: float = 0.75

    @property
    def size(self) -> int:
        return len(self.ids)


def build_bm25(catalog: EntityCatalog, k1: float = 1.5, b: float = 0.75) -> Bm25Index:
    postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
    doc_lengths = []
    ids = []
    for idx, record in enumerate(catalog):
        tokens = tokenize(record.title)
        doc_lengths.append(len(tokens))
        ids.append(record.entity_id)
        for token, tf in sorted(Counter(tokens).items()):
            postings[token].append((idx, tf))
    n = len(ids)
    avgdl = sum(doc_lengths) / n if n else 0.0
    return Bm25Index(
        postings=dict(postings), doc_lengths=doc_lengths, avgdl=avgdl, ids=ids, k1=k1, b=b
    )


def bm25_search(index: Bm25Index, span_text: str, k: int) -> list[tuple[str, float]]:
    """Okapi BM25 with idf = ln((N - df + 0.5) / (df + 0.5) + 1); documents
    sharing no query term are not returned."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = tokenize(span_text)
    if not query or index.size == 0 or index.avgdl == 0.0:
        return []
    scores: dict[int, float] = defaultdict(float)
    n = index.size
    for term in query:
        docs = index.postings.get(term)
        if not docs:
            continue
        df = len(docs)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
        for doc, tf in docs:
            dl = index.doc_lengths[doc]
            denom = tf + index.k1 * (1.0 - index.b + index.b * dl / index.avgdl)
            scores[doc] += idf * tf * (index.k1 + 1.0) / denom
    ranked = sorted(scores.items(), key=lambda item: (-item[1], index.ids[item[0]]))
    return [(index.ids[doc], score) for doc, score in ranked[:k] if score > 0.0]
