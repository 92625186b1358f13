"""Feature extraction for both towers.

Mention side: span tokens, the five tokens adjacent on each side (padded at
document edges), and the containing sentence with the span collapsed to a
single placeholder token. Entity side: tokenized title and first paragraph,
plus category names passed through verbatim.

All text features are consumed as unigrams and bigrams. In-vocabulary
n-grams carry fixed ids; everything else is hashed into a shared pool of
out-of-vocabulary buckets with 64-bit FNV-1a, so ids are stable across
platforms and runs.
"""

from __future__ import annotations

import dataclasses
import string
from collections import Counter
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from ._binio import ChecksumReader, ChecksumWriter, fnv1a_64
from .corpus import AnnotatedDocument, CorpusError, MentionExample

if TYPE_CHECKING:
    from .corpus import EntityCatalog, EntityRecord

PAD_TOKEN = "<pad>"
MENTION_TOKEN = "<mention>"
PAD_ID = 0
MENTION_ID = 1
CONTEXT_WIDTH = 5

_VOCAB_MAGIC = b"DEERVOC1"

Ngram = "str | tuple[str, str]"


@dataclasses.dataclass(frozen=True)
class TextFeature:
    """An ordered token list feeding one text encoder."""

    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclasses.dataclass(frozen=True)
class MentionFeatures:
    """The four text features describing a mention in context."""

    span: TextFeature
    left_context: TextFeature
    right_context: TextFeature
    sentence: TextFeature

    def __post_init__(self):
        if len(self.left_context) != CONTEXT_WIDTH or len(self.right_context) != CONTEXT_WIDTH:
            raise ValueError("context windows must hold exactly five tokens after padding")
        if self.sentence.tokens.count(MENTION_TOKEN) != 1:
            raise ValueError("sentence feature must contain exactly one placeholder token")


@dataclasses.dataclass(frozen=True)
class EntityFeatures:
    """Tokenized title and paragraph plus verbatim category names."""

    title: TextFeature
    paragraph: TextFeature
    categories: tuple[str, ...]

    def __post_init__(self):
        if not self.title.tokens:
            raise ValueError("entity title feature must be non-empty")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    out = []
    for raw in text.lower().split():
        token = raw.strip(string.punctuation)
        if token:
            out.append(token)
    return out


def extract_ngrams(tokens: Sequence[str]) -> tuple[list[str], list[tuple[str, str]]]:
    """Unigrams (the tokens themselves) and adjacent-pair bigrams, in order."""
    unigrams = list(tokens)
    bigrams = [(tokens[i], tokens[i + 1]) for i in range(len(tokens) - 1)]
    return unigrams, bigrams


def _ngram_bytes(ngram) -> bytes:
    if isinstance(ngram, tuple):
        return f"{ngram[0]} {ngram[1]}".encode("utf-8")
    return ngram.encode("utf-8")


def _ngram_sort_key(ngram) -> str:
    return f"{ngram[0]} {ngram[1]}" if isinstance(ngram, tuple) else ngram


class NgramVocabulary:
    """Fixed ids for frequent unigrams/bigrams plus shared OOV hash buckets.

    Ids 0 and 1 are reserved for the padding and placeholder tokens. In-vocab
    ids occupy [0, vocab_size); bucket ids occupy [vocab_size, vocab_size +
    oov_buckets). Unigrams and bigrams share one id space and one bucket pool.
    """

    def __init__(
        self,
        unigram_ids: dict[str, int],
        bigram_ids: dict[tuple[str, str], int],
        oov_buckets: int,
    ):
        if oov_buckets < 1:
            raise ValueError("oov_buckets must be positive")
        self.unigram_ids = dict(unigram_ids)
        self.bigram_ids = dict(bigram_ids)
        self.oov_buckets = int(oov_buckets)
        self.vocab_size = len(self.unigram_ids) + len(self.bigram_ids)
        ids = sorted(self.unigram_ids.values()) + sorted(self.bigram_ids.values())
        if sorted(ids) != list(range(self.vocab_size)):
            raise ValueError("in-vocabulary ids must be exactly 0..vocab_size-1")

    @property
    def total_ids(self) -> int:
        return self.vocab_size + self.oov_buckets

    def ngram_id(self, ngram) -> int:
        """Fixed id for in-vocab n-grams, FNV-1a bucket id otherwise."""
        if isinstance(ngram, tuple):
            found = self.bigram_ids.get(ngram)
        else:
            found = self.unigram_ids.get(ngram)
        if found is not None:
            return found
        return self.vocab_size + fnv1a_64(_ngram_bytes(ngram)) % self.oov_buckets

    def save(self, path) -> None:
        writer = ChecksumWriter(_VOCAB_MAGIC)
        entries = [(_ngram_sort_key(n), i) for n, i in self.unigram_ids.items()]
        entries += [(_ngram_sort_key(n), i) for n, i in self.bigram_ids.items()]
        entries.sort(key=lambda pair: pair[1])
        writer.write_u32(len(entries))
        for text, idx in entries:
            writer.write_str(text)
            writer.write_u32(idx)
        writer.write_u64(self.oov_buckets)
        writer.save(path)

    @classmethod
    def load(cls, path) -> "NgramVocabulary":
        reader = ChecksumReader(path, _VOCAB_MAGIC)
        count = reader.read_u32()
        unigram_ids: dict[str, int] = {}
        bigram_ids: dict[tuple[str, str], int] = {}
        for _ in range(count):
            text = reader.read_str()
            idx = reader.read_u32()
            if " " in text:
                first, _, second = text.partition(" ")
                bigram_ids[(first, second)] = idx
            else:
                unigram_ids[text] = idx
        oov_buckets = reader.read_u64()
        reader.expect_end()
        return cls(unigram_ids, bigram_ids, oov_buckets)


def ngram_id(ngram, vocab: NgramVocabulary) -> int:
    return vocab.ngram_id(ngram)


def build_vocabulary(
    examples: Iterable[MentionExample],
    catalog: "EntityCatalog",
    max_vocab: int,
    oov_buckets: int,
) -> NgramVocabulary:
    """Most-frequent ``max_vocab`` n-grams over the training text, counted the
    way the encoders consume it (padding stripped, sentence placeholder kept).

    Ties break lexicographically. Everything else lands in OOV buckets.
    """
    if max_vocab < 0:
        raise ValueError("max_vocab must be >= 0")
    counts: Counter = Counter()

    def _count(tokens: Sequence[str]) -> None:
        unigrams, bigrams = extract_ngrams(strip_padding(tokens))
        counts.update(unigrams)
        counts.update(bigrams)

    for example in examples:
        feats = example.features
        for feature in (feats.span, feats.left_context, feats.right_context, feats.sentence):
            _count(feature.tokens)
    for record in catalog:
        _count(tokenize(record.title))
        _count(tokenize(record.paragraph))

    counts.pop(PAD_TOKEN, None)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], _ngram_sort_key(item[0])))
    unigram_ids: dict[str, int] = {PAD_TOKEN: PAD_ID, MENTION_TOKEN: MENTION_ID}
    bigram_ids: dict[tuple[str, str], int] = {}
    next_id = 2
    for ngram, _count_value in ranked[:max_vocab]:
        if isinstance(ngram, tuple):
            bigram_ids[ngram] = next_id
        elif ngram not in unigram_ids:
            unigram_ids[ngram] = next_id
        else:
            continue
        next_id += 1
    return NgramVocabulary(unigram_ids, bigram_ids, oov_buckets)


def strip_padding(tokens: Sequence[str]) -> list[str]:
    """Remove padding tokens; they never contribute to any encoding."""
    return [t for t in tokens if t != PAD_TOKEN]


def feature_ngram_ids(
    feature: TextFeature, vocab: NgramVocabulary
) -> tuple[np.ndarray, np.ndarray]:
    """Unigram and bigram id arrays for one text feature, padding excluded."""
    tokens = strip_padding(feature.tokens)
    unigrams, bigrams = extract_ngrams(tokens)
    uni = np.array([vocab.ngram_id(u) for u in unigrams], dtype=np.int64)
    bi = np.array([vocab.ngram_id(b) for b in bigrams], dtype=np.int64)
    return uni, bi


def mention_features(doc: AnnotatedDocument, anchor: tuple[int, int, str]) -> MentionFeatures:
    """Extract span, both five-token context windows, and the placeholder
    sentence for one anchor."""
    start, end, _entity_id = anchor
    if not (0 <= start < end <= len(doc.tokens)):
        raise CorpusError(
            f"doc {doc.doc_id!r}: anchor span ({start}, {end}) out of range"
        )
    sentence_range = doc.containing_sentence(start, end)
    if sentence_range is None:
        raise CorpusError(
            f"doc {doc.doc_id!r}: anchor span ({start}, {end}) crosses sentence boundaries"
        )
    span = tuple(doc.tokens[start:end])
    left = doc.tokens[max(0, start - CONTEXT_WIDTH) : start]
    right = doc.tokens[end : end + CONTEXT_WIDTH]
    left = (PAD_TOKEN,) * (CONTEXT_WIDTH - len(left)) + tuple(left)
    right = tuple(right) + (PAD_TOKEN,) * (CONTEXT_WIDTH - len(right))
    s_start, s_end = sentence_range
    sentence = doc.tokens[s_start:start] + (MENTION_TOKEN,) + doc.tokens[end:s_end]
    return MentionFeatures(
        span=TextFeature(span),
        left_context=TextFeature(left),
        right_context=TextFeature(right),
        sentence=TextFeature(sentence),
    )


def entity_features(record: "EntityRecord") -> EntityFeatures:
    """Tokenize title and paragraph; categories stay verbatim."""
    return EntityFeatures(
        title=TextFeature(tuple(tokenize(record.title))),
        paragraph=TextFeature(tuple(tokenize(record.paragraph))),
        categories=tuple(record.categories),
    )


def examples_from_documents(
    docs: Sequence[AnnotatedDocument], catalog: "EntityCatalog | None" = None
) -> list[MentionExample]:
    """One MentionExample per anchor; gold ids are checked against the catalog
    when one is supplied."""
    examples = []
    for doc in docs:
        for k, anchor in enumerate(doc.anchors):
            gold = anchor[2]
            if catalog is not None and gold not in catalog:
                raise CorpusError(
                    f"doc {doc.doc_id!r}: anchor gold entity {gold!r} missing from catalog"
                )
            examples.append(
                MentionExample(
                    mention_id=f"{doc.doc_id}#{k}",
                    features=mention_features(doc, anchor),
                    gold_entity_id=gold,
                )
            )
    return examples
