"""Entity catalog and annotated mention corpus: loading, validation,
train/heldout partitioning, and a synthetic desk-scale corpus generator.

File formats are JSON Lines (UTF-8). Documents arrive pre-tokenized with
explicit sentence boundaries so anchor offsets are unambiguous; anchors are
half-open token ranges paired with a gold entity id.
"""

from __future__ import annotations

import dataclasses
import json
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:  # circular at runtime only through type annotations
    from .features import MentionFeatures


class CorpusError(ValueError):
    """Invalid corpus data: parse failures, bad anchors, duplicate ids."""


@dataclasses.dataclass(frozen=True)
class EntityRecord:
    """One knowledge-base entry: title, first paragraph, category names."""

    entity_id: str
    title: str
    paragraph: str = ""
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.entity_id:
            raise CorpusError("entity_id must be non-empty")
        if not self.title:
            raise CorpusError(f"entity {self.entity_id!r}: title must be non-empty")


class EntityCatalog:
    """Ordered, id-unique collection of :class:`EntityRecord`."""

    def __init__(self, records: Iterable[EntityRecord] = ()):
        self._records: list[EntityRecord] = []
        self._by_id: dict[str, EntityRecord] = {}
        for record in records:
            self.add(record)

    def add(self, record: EntityRecord) -> None:
        if record.entity_id in self._by_id:
            raise CorpusError(f"duplicate entity_id {record.entity_id!r}")
        self._records.append(record)
        self._by_id[record.entity_id] = record

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._by_id

    def __getitem__(self, entity_id: str) -> EntityRecord:
        try:
            return self._by_id[entity_id]
        except KeyError:
            raise CorpusError(f"unknown entity_id {entity_id!r}") from None

    def ids(self) -> list[str]:
        return [r.entity_id for r in self._records]


@dataclasses.dataclass(frozen=True)
class AnnotatedDocument:
    """A tokenized document with sentence ranges and entity-linked anchors.

    ``sentences`` and ``anchors`` use half-open token index ranges. Every
    anchor must fall inside exactly one sentence.
    """

    doc_id: str
    tokens: tuple[str, ...]
    sentences: tuple[tuple[int, int], ...]
    anchors: tuple[tuple[int, int, str], ...]

    def __post_init__(self):
        n = len(self.tokens)
        for start, end in self.sentences:
            if not (0 <= start < end <= n):
                raise CorpusError(
                    f"doc {self.doc_id!r}: sentence range ({start}, {end}) "
                    f"invalid for {n} tokens"
                )
        for start, end, entity_id in self.anchors:
            if not (0 <= start < end <= n):
                raise CorpusError(
                    f"doc {self.doc_id!r}: anchor ({start}, {end}, {entity_id!r}) "
                    f"out of range for {n} tokens"
                )
            if self.containing_sentence(start, end) is None:
                raise CorpusError(
                    f"doc {self.doc_id!r}: anchor ({start}, {end}, {entity_id!r}) "
                    "does not lie within a single sentence"
                )

    def containing_sentence(self, start: int, end: int) -> tuple[int, int] | None:
        """The sentence range containing [start, end), or None."""
        for s_start, s_end in self.sentences:
            if s_start <= start and end <= s_end:
                return (s_start, s_end)
        return None


@dataclasses.dataclass(frozen=True)
class MentionExample:
    """A mention with its extracted features and gold entity id."""

    mention_id: str
    features: "MentionFeatures"
    gold_entity_id: str


@dataclasses.dataclass(frozen=True)
class CorpusSplit:
    """Disjoint train/heldout partition of mention examples."""

    train: tuple[MentionExample, ...]
    heldout: tuple[MentionExample, ...]
    holdout_fraction: float


def _parse_jsonl(path) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_entities(path) -> EntityCatalog:
    """Load a KB file: one ``{"id", "title", "paragraph", "categories"}`` per line."""
    catalog = EntityCatalog()
    for lineno, obj in _parse_jsonl(path):
        try:
            record = EntityRecord(
                entity_id=str(obj["id"]),
                title=str(obj["title"]),
                paragraph=str(obj.get("paragraph", "")),
                categories=tuple(str(c) for c in obj.get("categories", [])),
            )
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
        try:
            catalog.add(record)
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return catalog


def save_entities(catalog: EntityCatalog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in catalog:
            fh.write(
                json.dumps(
                    {
                        "id": r.entity_id,
                        "title": r.title,
                        "paragraph": r.paragraph,
                        "categories": list(r.categories),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_documents(path) -> list[AnnotatedDocument]:
    """Load a documents file: ``{"doc_id", "tokens", "sentences", "anchors"}`` per line."""
    docs = []
    for lineno, obj in _parse_jsonl(path):
        try:
            doc = AnnotatedDocument(
                doc_id=str(obj["doc_id"]),
                tokens=tuple(str(t) for t in obj["tokens"]),
                sentences=tuple((int(a), int(b)) for a, b in obj["sentences"]),
                anchors=tuple((int(a), int(b), str(e)) for a, b, e in obj["anchors"]),
            )
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, CorpusError):
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
            raise CorpusError(f"{path}:{lineno}: malformed document ({exc})") from None
        docs.append(doc)
    return docs


def save_documents(docs: Sequence[AnnotatedDocument], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(
                json.dumps(
                    {
                        "doc_id": d.doc_id,
                        "tokens": list(d.tokens),
                        "sentences": [list(s) for s in d.sentences],
                        "anchors": [list(a) for a in d.anchors],
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def split_examples(
    examples: Sequence[MentionExample], holdout_fraction: float, seed: int
) -> CorpusSplit:
    """Deterministic shuffle-and-partition into train and heldout sets.

    The heldout size is round(fraction * total), clamped to [1, total - 1]
    so both sides are always non-empty.
    """
    if not (0.0 < holdout_fraction < 1.0):
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    if len(examples) < 2:
        raise ValueError(f"need at least 2 examples to split, got {len(examples)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    n_heldout = int(round(holdout_fraction * len(examples)))
    n_heldout = min(max(n_heldout, 1), len(examples) - 1)
    heldout = tuple(examples[i] for i in order[:n_heldout])
    train = tuple(examples[i] for i in order[n_heldout:])
    return CorpusSplit(train=train, heldout=heldout, holdout_fraction=holdout_fraction)


@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic ambiguous-mention corpus.

    ``families`` entities groups share a surname-like span token (up to three
    members each), so a substantial share of mention spans is resolvable only
    from surrounding context. ``topic_vocab`` sizes the pool of context tokens
    from which each entity draws its private topic vocabulary.
    """

    entities: int = 200
    families: int = 40
    topic_vocab: int = 2000
    mentions_per_entity: int = 20

    def __post_init__(self):
        if self.entities <= 0:
            raise ValueError("entities must be positive")
        if self.mentions_per_entity <= 0:
            raise ValueError("mentions_per_entity must be positive")
        if self.families < 0:
            raise ValueError("families must be non-negative")
        if self.topic_vocab <= 0:
            raise ValueError("topic_vocab must be positive")


_PRIVATE_TOPICS = 6
_SHARED_TOPICS = 4
_FAMILY_SIZE = 3
_FILLERS = ("the", "a", "of", "in", "with", "for", "near", "after")
_COMMON = tuple(
    f"{w}" for w in (
        "match", "report", "season", "group", "early", "local", "career", "public",
        "record", "member", "project", "period", "major", "style", "event", "work",
    )
)


def load_synthetic_config(path) -> tuple[SyntheticConfig, int | None]:
    """Parse a key=value synthetic config file; returns (config, seed-or-None)."""
    values: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CorpusError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in {"entities", "families", "topic_vocab", "mentions_per_entity", "seed"}:
                raise CorpusError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = int(raw.strip())
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: {key} must be an integer") from None
    seed = values.pop("seed", None)
    return SyntheticConfig(**values), seed


def _entity_layout(config: SyntheticConfig) -> list[tuple[int, int | None]]:
    """Assign entities to families: list of (entity_index, family_or_None).

    Families target three members and never fewer than two, so every family
    span is genuinely ambiguous; remaining entities are singletons.
    """
    n_fam = min(config.families, config.entities // 2) if config.families else 0
    members = min(config.entities, _FAMILY_SIZE * n_fam) if n_fam else 0
    return [(i, i % n_fam if i < members else None) for i in range(config.entities)]


def generate_synthetic(
    config: SyntheticConfig, seed: int
) -> tuple[EntityCatalog, list[AnnotatedDocument]]:
    """Build a deterministic corpus whose ambiguous spans require context.

    Entities in the same family share their span token and are told apart
    only by context: every entity owns private topic tokens that appear in
    its paragraph and around its mentions. Family members additionally share
    distractor topics, and contexts mix in corpus-wide common words, so the
    margin between siblings is carried by a handful of private tokens.
    """
    rng = np.random.default_rng(seed)
    layout = _entity_layout(config)

    def topic(index: int) -> str:
        return f"topic{index % config.topic_vocab:04d}"

    shared_base = config.entities * _PRIVATE_TOPICS
    catalog = EntityCatalog()
    private: dict[str, list[str]] = {}
    shared: dict[str, list[str]] = {}
    spans: dict[str, list[str]] = {}
    for i, family in layout:
        entity_id = f"E{i:04d}"
        own = [topic(i * _PRIVATE_TOPICS + j) for j in range(_PRIVATE_TOPICS)]
        if family is not None:
            group = [topic(shared_base + family * _SHARED_TOPICS + j) for j in range(_SHARED_TOPICS)]
            surname = f"veld{family:03d}"
            title = f"given{i:04d} {surname}"
            span = [surname]
            categories = (f"family-{family:03d}", f"domain-{i:04d}")
        else:
            group = [topic(shared_base + (config.families + i) * _SHARED_TOPICS + j)
                     for j in range(_SHARED_TOPICS)]
            title = f"solo{i:04d} mark{i:04d}"
            span = [f"solo{i:04d}", f"mark{i:04d}"]
            categories = (f"domain-{i:04d}",)
        paragraph = (
            f"{title} is known for " + " ".join(own[:4]) + " and " + " ".join(group[:2]) + "."
        )
        catalog.add(
            EntityRecord(
                entity_id=entity_id,
                title=title,
                paragraph=paragraph,
                categories=categories,
            )
        )
        private[entity_id] = own
        shared[entity_id] = group
        spans[entity_id] = span

    docs: list[AnnotatedDocument] = []
    doc_no = 0
    for i, _family in layout:
        entity_id = f"E{i:04d}"
        span = spans[entity_id]
        for _ in range(config.mentions_per_entity):
            left = _context_window(rng, private[entity_id], shared[entity_id])
            right = _context_window(rng, private[entity_id], shared[entity_id])
            tokens = left + span + right
            anchor = (len(left), len(left) + len(span), entity_id)
            docs.append(
                AnnotatedDocument(
                    doc_id=f"D{doc_no:05d}",
                    tokens=tuple(tokens),
                    sentences=((0, len(tokens)),),
                    anchors=(anchor,),
                )
            )
            doc_no += 1
    return catalog, docs


def _context_window(
    rng: np.random.Generator, private: list[str], shared: list[str]
) -> list[str]:
    """Five context tokens: one filler plus four draws mixing the entity's
    private topics, its group's shared topics, and common words."""
    window = []
    for _ in range(4):
        roll = rng.random()
        if roll < 0.55:
            window.append(private[int(rng.integers(0, len(private)))])
        elif roll < 0.80:
            window.append(shared[int(rng.integers(0, len(shared)))])
        else:
            window.append(_COMMON[int(rng.integers(0, len(_COMMON)))])
    filler = _FILLERS[int(rng.integers(0, len(_FILLERS)))]
    window.insert(int(rng.integers(0, 5)), filler)
    return window


def ambiguity_stats(docs: Sequence[AnnotatedDocument]) -> dict:
    """Share of anchors whose exact span text is used by >= 2 entities."""
    span_entities: dict[tuple[str, ...], set[str]] = {}
    total = 0
    for doc in docs:
        for start, end, entity_id in doc.anchors:
            span = doc.tokens[start:end]
            span_entities.setdefault(span, set()).add(entity_id)
            total += 1
    ambiguous = 0
    for doc in docs:
        for start, end, _ in doc.anchors:
            if len(span_entities[doc.tokens[start:end]]) >= 2:
                ambiguous += 1
    return {
        "anchors": total,
        "ambiguous_anchors": ambiguous,
        "ambiguous_fraction": ambiguous / total if total else 0.0,
        "distinct_spans": len(span_entities),
    }
