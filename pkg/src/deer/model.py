"""The dual-encoder forward pass.

Each text feature is encoded as the mean of its unigram embeddings
concatenated with the mean of its bigram embeddings, pushed through a
per-feature affine+ReLU layer. Category names are hashed into a dedicated
embedding table, averaged, and projected the same way. Compound encoders
concatenate child encodings and apply a further affine layer: inner
combiners use ReLU, the two final tower layers are linear so encodings can
reach every orthant.

Mention tower: combine(left, right, sentence) -> combine(context, span).
Entity tower:  combine(paragraph, categories) -> combine(document, title).
Scores are cosine similarities of the two tower outputs.

Parameters are stored float32 (and serialized as little-endian float32);
all arithmetic runs in float64 so gradients check out against central
finite differences to tight tolerances.
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import Iterable, Sequence

import numpy as np

from ._binio import ChecksumReader, ChecksumWriter, FormatError, fnv1a_64
from .features import (
    EntityFeatures,
    MentionFeatures,
    NgramVocabulary,
    TextFeature,
    feature_ngram_ids,
)

MENTION_KINDS = ("span", "left", "right", "sentence")
ENTITY_KINDS = ("title", "paragraph")
FEATURE_KINDS = MENTION_KINDS + ENTITY_KINDS

_MODEL_MAGIC = b"DEERMDL1"
_MODEL_VERSION = 1

DEGENERATE_NORM = 1e-12


class DegenerateVectorWarning(UserWarning):
    """A cosine was requested for a (near-)zero vector; the score is 0."""


@dataclasses.dataclass
class AffineLayer:
    """Dense layer ``y = act(W x + b)`` with act in {relu, identity}."""

    weights: np.ndarray  # (out, in) float32
    bias: np.ndarray  # (out,) float32
    activation: str

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length must match output width")


@dataclasses.dataclass
class ModelDims:
    """Width configuration: E = embedding width, D = encoding width."""

    embed_width: int = 64
    encoding_width: int = 64
    category_rows: int = 50_000


@dataclasses.dataclass
class ModelParams:
    """Every learnable tensor, plus the scored-loss scalars.

    ``a`` scales cosine similarities into softmax logits; ``a_h`` and ``b_h``
    map similarities to logits for the hard-pair logistic task (the additive
    term only matters there, softmax being shift-invariant).
    """

    dims: ModelDims
    vocab_size: int
    oov_buckets: int
    unigram_table: np.ndarray
    bigram_table: np.ndarray
    category_table: np.ndarray
    text_layers: dict[str, AffineLayer]
    category_layer: AffineLayer
    mention_context_combiner: AffineLayer
    mention_combiner: AffineLayer
    entity_doc_combiner: AffineLayer
    entity_combiner: AffineLayer
    a: np.ndarray  # 0-d float32
    a_h: np.ndarray
    b_h: np.ndarray

    @property
    def table_rows(self) -> int:
        return self.vocab_size + self.oov_buckets


def _glorot(rng: np.random.Generator, out_w: int, in_w: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_w + out_w))
    return rng.uniform(-limit, limit, size=(out_w, in_w)).astype(np.float32)


def _affine(rng: np.random.Generator, out_w: int, in_w: int, activation: str) -> AffineLayer:
    return AffineLayer(
        weights=_glorot(rng, out_w, in_w),
        bias=np.zeros(out_w, dtype=np.float32),
        activation=activation,
    )


def init_params(
    vocab: NgramVocabulary, dims: ModelDims | None = None, seed: int = 0
) -> ModelParams:
    """Fresh parameters: embeddings uniform in [-0.05, 0.05], Glorot-uniform
    affine weights, zero biases, neutral scalars (a = a_h = 1, b_h = 0)."""
    dims = dims or ModelDims()
    rng = np.random.default_rng(seed)
    e, d = dims.embed_width, dims.encoding_width
    rows = vocab.vocab_size + vocab.oov_buckets

    def table(n_rows: int) -> np.ndarray:
        return rng.uniform(-0.05, 0.05, size=(n_rows, e)).astype(np.float32)

    return ModelParams(
        dims=dims,
        vocab_size=vocab.vocab_size,
        oov_buckets=vocab.oov_buckets,
        unigram_table=table(rows),
        bigram_table=table(rows),
        category_table=table(dims.category_rows),
        text_layers={kind: _affine(rng, d, 2 * e, "relu") for kind in FEATURE_KINDS},
        category_layer=_affine(rng, d, e, "relu"),
        mention_context_combiner=_affine(rng, d, 3 * d, "relu"),
        mention_combiner=_affine(rng, d, 2 * d, "identity"),
        entity_doc_combiner=_affine(rng, d, 2 * d, "relu"),
        entity_combiner=_affine(rng, d, 2 * d, "identity"),
        a=_scalar(1.0),
        a_h=_scalar(1.0),
        b_h=_scalar(0.0),
    )


def parameter_families(params: ModelParams) -> dict[str, np.ndarray]:
    """Named views of every learnable array, in a stable order."""
    families: dict[str, np.ndarray] = {
        "unigram_table": params.unigram_table,
        "bigram_table": params.bigram_table,
        "category_table": params.category_table,
    }
    for kind in FEATURE_KINDS:
        families[f"text_layer.{kind}.weights"] = params.text_layers[kind].weights
        families[f"text_layer.{kind}.bias"] = params.text_layers[kind].bias
    for name in (
        "category_layer",
        "mention_context_combiner",
        "mention_combiner",
        "entity_doc_combiner",
        "entity_combiner",
    ):
        layer = getattr(params, name)
        families[f"{name}.weights"] = layer.weights
        families[f"{name}.bias"] = layer.bias
    families["a"] = params.a
    families["a_h"] = params.a_h
    families["b_h"] = params.b_h
    return families


def parameter_count(params: ModelParams) -> int:
    return sum(int(np.asarray(arr).size) for arr in parameter_families(params).values())


def expected_parameter_count(
    embed_width: int,
    encoding_width: int,
    vocab_size: int,
    oov_buckets: int,
    category_rows: int,
) -> int:
    """Closed-form parameter count for the architecture above."""
    e, d = embed_width, encoding_width
    rows = vocab_size + oov_buckets
    tables = 2 * rows * e + category_rows * e
    text = len(FEATURE_KINDS) * (d * 2 * e + d)
    category = d * e + d
    combiners = (d * 3 * d + d) + 3 * (d * 2 * d + d)
    return tables + text + category + combiners + 3


# scalars are stored as 0-d float32 arrays so updates and file round-trips
# treat them exactly like every other parameter
def _scalar(value: float) -> np.ndarray:
    return np.array(value, dtype=np.float32)


@dataclasses.dataclass(frozen=True)
class FeaturizedMention:
    """Per-kind (unigram ids, bigram ids) ready for table lookups."""

    ids: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclasses.dataclass(frozen=True)
class FeaturizedEntity:
    ids: dict[str, tuple[np.ndarray, np.ndarray]]
    category_ids: np.ndarray


def category_id(name: str, category_rows: int) -> int:
    return fnv1a_64(name.encode("utf-8")) % category_rows


def featurize_mention(features: MentionFeatures, vocab: NgramVocabulary) -> FeaturizedMention:
    return FeaturizedMention(
        ids={
            "span": feature_ngram_ids(features.span, vocab),
            "left": feature_ngram_ids(features.left_context, vocab),
            "right": feature_ngram_ids(features.right_context, vocab),
            "sentence": feature_ngram_ids(features.sentence, vocab),
        }
    )


def featurize_entity(
    features: EntityFeatures, vocab: NgramVocabulary, category_rows: int
) -> FeaturizedEntity:
    return FeaturizedEntity(
        ids={
            "title": feature_ngram_ids(features.title, vocab),
            "paragraph": feature_ngram_ids(features.paragraph, vocab),
        },
        category_ids=np.array(
            sorted(category_id(c, category_rows) for c in features.categories), dtype=np.int64
        ),
    )


@dataclasses.dataclass
class _MeanCache:
    ids: np.ndarray  # concatenated ids across the batch
    row_idx: np.ndarray  # batch row owning each id
    counts: np.ndarray  # (B,) ids per row
    means: np.ndarray  # (B, E) float64


@dataclasses.dataclass
class _LayerCache:
    x: np.ndarray  # (B, in) float64 input
    pre: np.ndarray  # (B, out) pre-activation
    out: np.ndarray  # (B, out) post-activation


@dataclasses.dataclass
class _TextKindCache:
    uni: _MeanCache
    bi: _MeanCache
    layer: _LayerCache


@dataclasses.dataclass
class MentionTowerCache:
    kinds: dict[str, _TextKindCache]
    context: _LayerCache
    final: _LayerCache
    encodings: np.ndarray  # (B, D) float64


@dataclasses.dataclass
class EntityTowerCache:
    kinds: dict[str, _TextKindCache]
    categories: _MeanCache
    category_layer: _LayerCache
    doc: _LayerCache
    final: _LayerCache
    encodings: np.ndarray


def _batched_mean(
    table: np.ndarray, id_arrays: Sequence[np.ndarray], embed_width: int
) -> _MeanCache:
    batch = len(id_arrays)
    counts = np.array([len(ids) for ids in id_arrays], dtype=np.int64)
    ids = np.concatenate(id_arrays) if batch else np.empty(0, dtype=np.int64)
    row_idx = np.repeat(np.arange(batch), counts)
    means = np.zeros((batch, embed_width), dtype=np.float64)
    if ids.size:
        np.add.at(means, row_idx, table[ids].astype(np.float64))
        nonzero = counts > 0
        means[nonzero] /= counts[nonzero, None]
    return _MeanCache(ids=ids, row_idx=row_idx, counts=counts, means=means)


def _apply_layer(layer: AffineLayer, x: np.ndarray) -> _LayerCache:
    pre = x @ layer.weights.astype(np.float64).T + layer.bias.astype(np.float64)
    out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return _LayerCache(x=x, pre=pre, out=out)


def _encode_text_kind(
    kind: str,
    params: ModelParams,
    id_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
) -> _TextKindCache:
    e = params.dims.embed_width
    uni = _batched_mean(params.unigram_table, [p[0] for p in id_pairs], e)
    bi = _batched_mean(params.bigram_table, [p[1] for p in id_pairs], e)
    x = np.concatenate([uni.means, bi.means], axis=1)
    layer = _apply_layer(params.text_layers[kind], x)
    return _TextKindCache(uni=uni, bi=bi, layer=layer)


def encode_mention_batch(
    mentions: Sequence[FeaturizedMention], params: ModelParams
) -> MentionTowerCache:
    kinds = {
        kind: _encode_text_kind(kind, params, [m.ids[kind] for m in mentions])
        for kind in MENTION_KINDS
    }
    ctx_in = np.concatenate(
        [kinds["left"].layer.out, kinds["right"].layer.out, kinds["sentence"].layer.out], axis=1
    )
    context = _apply_layer(params.mention_context_combiner, ctx_in)
    final_in = np.concatenate([context.out, kinds["span"].layer.out], axis=1)
    final = _apply_layer(params.mention_combiner, final_in)
    return MentionTowerCache(kinds=kinds, context=context, final=final, encodings=final.out)


def encode_entity_batch(
    entities: Sequence[FeaturizedEntity], params: ModelParams
) -> EntityTowerCache:
    kinds = {
        kind: _encode_text_kind(kind, params, [ent.ids[kind] for ent in entities])
        for kind in ENTITY_KINDS
    }
    cats = _batched_mean(
        params.category_table, [ent.category_ids for ent in entities], params.dims.embed_width
    )
    category_layer = _apply_layer(params.category_layer, cats.means)
    doc_in = np.concatenate([kinds["paragraph"].layer.out, category_layer.out], axis=1)
    doc = _apply_layer(params.entity_doc_combiner, doc_in)
    final_in = np.concatenate([doc.out, kinds["title"].layer.out], axis=1)
    final = _apply_layer(params.entity_combiner, final_in)
    return EntityTowerCache(
        kinds=kinds,
        categories=cats,
        category_layer=category_layer,
        doc=doc,
        final=final,
        encodings=final.out,
    )


def encode_text_feature(
    feature: TextFeature, kind: str, params: ModelParams, vocab: NgramVocabulary
) -> np.ndarray:
    """Mean-unigram ++ mean-bigram through the kind's affine+ReLU layer."""
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}")
    pair = feature_ngram_ids(feature, vocab)
    cache = _encode_text_kind(kind, params, [pair])
    return cache.layer.out[0]


def encode_categories(categories: Sequence[str], params: ModelParams) -> np.ndarray:
    ids = np.array(
        sorted(category_id(c, params.dims.category_rows) for c in categories), dtype=np.int64
    )
    cache = _batched_mean(params.category_table, [ids], params.dims.embed_width)
    return _apply_layer(params.category_layer, cache.means).out[0]


def combine(children: Sequence[np.ndarray], layer: AffineLayer) -> np.ndarray:
    """Concatenate child encodings and apply the compound layer."""
    x = np.concatenate([np.asarray(c, dtype=np.float64) for c in children])
    if x.shape[0] != layer.weights.shape[1]:
        raise ValueError(
            f"combined child width {x.shape[0]} does not match layer input "
            f"width {layer.weights.shape[1]}"
        )
    return _apply_layer(layer, x[None, :]).out[0]


def encode_mention(
    features: MentionFeatures, params: ModelParams, vocab: NgramVocabulary
) -> np.ndarray:
    """The mention tower applied to one example."""
    return encode_mention_batch([featurize_mention(features, vocab)], params).encodings[0]


def encode_entity(
    features: EntityFeatures, params: ModelParams, vocab: NgramVocabulary
) -> np.ndarray:
    """The entity tower applied to one record's features."""
    featurized = featurize_entity(features, vocab, params.dims.category_rows)
    return encode_entity_batch([featurized], params).encodings[0]


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1]; 0 (with a warning) when either
    vector is numerically zero."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < DEGENERATE_NORM or nv < DEGENERATE_NORM:
        warnings.warn(
            "cosine of a zero vector is undefined; returning 0", DegenerateVectorWarning
        )
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def similarity_matrix(mentions: np.ndarray, entities: np.ndarray) -> np.ndarray:
    """All-pairs cosine matrix; rows are mentions, columns entities."""
    mentions = np.asarray(mentions, dtype=np.float64)
    entities = np.asarray(entities, dtype=np.float64)
    if mentions.ndim != 2 or entities.ndim != 2 or mentions.shape[0] != entities.shape[0]:
        raise ValueError("need matching (B, D) encoding matrices")
    if mentions.shape[0] < 2:
        raise ValueError("in-batch similarity needs at least two pairs")
    m_norm = np.linalg.norm(mentions, axis=1)
    e_norm = np.linalg.norm(entities, axis=1)
    m_norm = np.where(m_norm < DEGENERATE_NORM, np.inf, m_norm)
    e_norm = np.where(e_norm < DEGENERATE_NORM, np.inf, e_norm)
    sims = (mentions @ entities.T) / m_norm[:, None] / e_norm[None, :]
    return np.clip(sims, -1.0, 1.0)


def load_text_vectors(params: ModelParams, vocab: NgramVocabulary, path) -> int:
    """Optional hook: overwrite unigram rows from a text file of
    ``token v1 .. vE`` lines (external pre-trained vectors). Returns the
    number of rows filled; unknown tokens and bigrams are untouched."""
    e = params.dims.embed_width
    filled = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != e + 1:
                raise FormatError(f"{path}:{lineno}: expected token plus {e} values")
            token = parts[0]
            idx = vocab.unigram_ids.get(token)
            if idx is None:
                continue
            params.unigram_table[idx] = np.asarray(parts[1:], dtype=np.float32)
            filled += 1
    return filled


def _write_layer(writer: ChecksumWriter, layer: AffineLayer) -> None:
    writer.write_f32_array(layer.weights)
    writer.write_f32_array(layer.bias)


def _read_layer(
    reader: ChecksumReader, out_w: int, in_w: int, activation: str
) -> AffineLayer:
    return AffineLayer(
        weights=reader.read_f32_array((out_w, in_w)),
        bias=reader.read_f32_array((out_w,)),
        activation=activation,
    )


def persist_params(params: ModelParams, path) -> None:
    """Serialize parameters (magic, version, dims, float32 arrays, CRC-32C)."""
    writer = ChecksumWriter(_MODEL_MAGIC)
    writer.write_u32(_MODEL_VERSION)
    for value in (
        params.dims.embed_width,
        params.dims.encoding_width,
        params.dims.category_rows,
        params.vocab_size,
        params.oov_buckets,
    ):
        writer.write_u32(value)
    writer.write_f32_array(params.unigram_table)
    writer.write_f32_array(params.bigram_table)
    writer.write_f32_array(params.category_table)
    for kind in FEATURE_KINDS:
        _write_layer(writer, params.text_layers[kind])
    _write_layer(writer, params.category_layer)
    _write_layer(writer, params.mention_context_combiner)
    _write_layer(writer, params.mention_combiner)
    _write_layer(writer, params.entity_doc_combiner)
    _write_layer(writer, params.entity_combiner)
    writer.write_f32(float(params.a))
    writer.write_f32(float(params.a_h))
    writer.write_f32(float(params.b_h))
    writer.save(path)


def restore_params(path) -> ModelParams:
    reader = ChecksumReader(path, _MODEL_MAGIC)
    version = reader.read_u32()
    if version != _MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    e = reader.read_u32()
    d = reader.read_u32()
    category_rows = reader.read_u32()
    vocab_size = reader.read_u32()
    oov_buckets = reader.read_u32()
    rows = vocab_size + oov_buckets
    params = ModelParams(
        dims=ModelDims(embed_width=e, encoding_width=d, category_rows=category_rows),
        vocab_size=vocab_size,
        oov_buckets=oov_buckets,
        unigram_table=reader.read_f32_array((rows, e)),
        bigram_table=reader.read_f32_array((rows, e)),
        category_table=reader.read_f32_array((category_rows, e)),
        text_layers={
            kind: _read_layer(reader, d, 2 * e, "relu") for kind in FEATURE_KINDS
        },
        category_layer=_read_layer(reader, d, e, "relu"),
        mention_context_combiner=_read_layer(reader, d, 3 * d, "relu"),
        mention_combiner=_read_layer(reader, d, 2 * d, "identity"),
        entity_doc_combiner=_read_layer(reader, d, 2 * d, "relu"),
        entity_combiner=_read_layer(reader, d, 2 * d, "identity"),
        a=_scalar(reader.read_f32()),
        a_h=_scalar(reader.read_f32()),
        b_h=_scalar(reader.read_f32()),
    )
    reader.expect_end()
    return params


def params_equal(left: ModelParams, right: ModelParams) -> bool:
    """Bit-exact equality of every parameter array."""
    lf, rf = parameter_families(left), parameter_families(right)
    if lf.keys() != rf.keys():
        return False
    return all(np.array_equal(np.asarray(lf[k]), np.asarray(rf[k])) for k in lf)
