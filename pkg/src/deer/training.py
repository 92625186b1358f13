"""Losses, exact manual gradients, SGD with momentum, and the training loop.

Two tasks share one parameter set:

* the in-batch softmax task: every row of the batch similarity matrix is a
  softmax over the batch's entities with the paired entity as the target,
  logits being ``a * cosine``;
* the hard-pair logistic task: mined (mention, entity, label) pairs scored
  by ``sigmoid(a_h * cosine + b_h)`` under binary cross-entropy.

When both are active their mean losses are summed with equal weight.
Backpropagation is hand-written and checked against central finite
differences over every parameter family.
"""

from __future__ import annotations

import dataclasses
import json
import time
from collections import deque
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

import numpy as np

from .corpus import CorpusSplit, EntityCatalog, MentionExample
from .features import NgramVocabulary, entity_features
from .model import (
    ENTITY_KINDS,
    MENTION_KINDS,
    EntityTowerCache,
    FeaturizedEntity,
    FeaturizedMention,
    MentionTowerCache,
    ModelDims,
    ModelParams,
    _LayerCache,
    _MeanCache,
    encode_entity_batch,
    encode_mention_batch,
    featurize_entity,
    featurize_mention,
    init_params,
    parameter_families,
)

if TYPE_CHECKING:
    from .mining import HardPairPool


class NumericsError(RuntimeError):
    """A loss or gradient became non-finite."""


Gradients = dict[str, np.ndarray]


@dataclasses.dataclass
class TrainConfig:
    """Optimizer and loop settings (defaults follow the training protocol:
    batches of 100, SGD momentum 0.9, fixed learning rate 0.01)."""

    batch_size: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    max_steps: int = 20_000
    eval_every: int = 200
    patience: int = 5

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.eval_every < 1 or self.patience < 1:
            raise ValueError("eval_every and patience must be >= 1")


@dataclasses.dataclass(frozen=True)
class HardPair:
    """A labeled (mention, entity) pair for the logistic task; label 1 marks
    the mention's gold entity."""

    mention_id: str
    entity_id: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


def zero_gradients(params: ModelParams) -> Gradients:
    return {
        name: np.zeros_like(np.asarray(arr), dtype=np.float64)
        for name, arr in parameter_families(params).items()
    }


def softmax_loss_and_grad(
    sims: np.ndarray, a: float
) -> tuple[float, np.ndarray, float]:
    """Mean per-row softmax cross-entropy with the diagonal as targets.

    Returns (loss, d_loss/d_sims, d_loss/d_a). Log-sum-exp is stabilized by
    subtracting each row's max.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1] or sims.shape[0] < 2:
        raise ValueError("sims must be square with B >= 2")
    if not np.all(np.isfinite(sims)):
        raise NumericsError("similarity matrix contains non-finite entries")
    b = sims.shape[0]
    logits = a * sims
    row_max = logits.max(axis=1, keepdims=True)
    shifted = logits - row_max
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + row_max
    loss = float(np.mean(log_z[:, 0] - np.diag(logits)))
    probs = np.exp(logits - log_z)
    d_logits = (probs - np.eye(b)) / b
    d_sims = a * d_logits
    d_a = float(np.sum(sims * d_logits))
    return loss, d_sims, d_a


def logistic_loss_and_grad(
    score: float, label: int, a_h: float, b_h: float
) -> tuple[float, float, float, float]:
    """Binary cross-entropy of ``sigmoid(a_h * score + b_h)`` against label.

    Returns (loss, d_score, d_a_h, d_b_h), computed in the numerically
    stable logit form.
    """
    loss, d_s, d_a, d_b = _logistic_batch(
        np.array([score], dtype=np.float64), np.array([label], dtype=np.float64), a_h, b_h
    )
    return loss, float(d_s[0]), d_a, d_b


def _logistic_batch(
    scores: np.ndarray, labels: np.ndarray, a_h: float, b_h: float
) -> tuple[float, np.ndarray, float, float]:
    """Mean BCE over a batch of scored pairs; gradients for scores and the
    two scalar transform parameters."""
    z = a_h * scores + b_h
    # stable: max(z,0) - y*z + log(1 + exp(-|z|))
    losses = np.maximum(z, 0.0) - labels * z + np.log1p(np.exp(-np.abs(z)))
    n = scores.shape[0]
    loss = float(losses.mean())
    sig = 1.0 / (1.0 + np.exp(-z))
    d_z = (sig - labels) / n
    d_scores = a_h * d_z
    d_a_h = float(np.sum(scores * d_z))
    d_b_h = float(np.sum(d_z))
    return loss, d_scores, d_a_h, d_b_h


def _cosine_forward(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All-pairs cosines plus the row/column norms (unclipped; training
    needs the smooth value)."""
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    sims = (u @ v.T) / nu[:, None] / nv[None, :]
    return sims, nu, nv


def _cosine_backward_allpairs(
    u: np.ndarray,
    v: np.ndarray,
    sims: np.ndarray,
    nu: np.ndarray,
    nv: np.ndarray,
    d_sims: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    d_u = ((d_sims / nv[None, :]) @ v) / nu[:, None]
    d_u -= ((d_sims * sims).sum(axis=1) / nu**2)[:, None] * u
    d_v = ((d_sims.T / nu[None, :]) @ u) / nv[:, None]
    d_v -= ((d_sims * sims).sum(axis=0) / nv**2)[:, None] * v
    return d_u, d_v


def _cosine_rowwise(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    scores = (u * v).sum(axis=1) / (nu * nv)
    return scores, nu, nv


def _cosine_backward_rowwise(
    u: np.ndarray,
    v: np.ndarray,
    scores: np.ndarray,
    nu: np.ndarray,
    nv: np.ndarray,
    d_scores: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    d_u = d_scores[:, None] * (v / (nu * nv)[:, None] - scores[:, None] * u / (nu**2)[:, None])
    d_v = d_scores[:, None] * (u / (nu * nv)[:, None] - scores[:, None] * v / (nv**2)[:, None])
    return d_u, d_v


def _layer_backward(
    layer, cache: _LayerCache, d_out: np.ndarray, grads: Gradients, prefix: str
) -> np.ndarray:
    g = d_out * (cache.pre > 0.0) if layer.activation == "relu" else d_out
    grads[f"{prefix}.weights"] += g.T @ cache.x
    grads[f"{prefix}.bias"] += g.sum(axis=0)
    return g @ layer.weights.astype(np.float64)


def _mean_backward(cache: _MeanCache, d_means: np.ndarray, grad_table: np.ndarray) -> None:
    if cache.ids.size == 0:
        return
    scaled = d_means / np.maximum(cache.counts, 1)[:, None]
    np.add.at(grad_table, cache.ids, scaled[cache.row_idx])


def _backward_text_kind(
    kind: str, cache, params: ModelParams, d_out: np.ndarray, grads: Gradients
) -> None:
    e = params.dims.embed_width
    d_x = _layer_backward(
        params.text_layers[kind], cache.layer, d_out, grads, f"text_layer.{kind}"
    )
    _mean_backward(cache.uni, d_x[:, :e], grads["unigram_table"])
    _mean_backward(cache.bi, d_x[:, e:], grads["bigram_table"])


def _backward_mention_tower(
    cache: MentionTowerCache, params: ModelParams, d_enc: np.ndarray, grads: Gradients
) -> None:
    d = params.dims.encoding_width
    d_final_in = _layer_backward(
        params.mention_combiner, cache.final, d_enc, grads, "mention_combiner"
    )
    d_ctx, d_span = d_final_in[:, :d], d_final_in[:, d:]
    d_ctx_in = _layer_backward(
        params.mention_context_combiner, cache.context, d_ctx, grads, "mention_context_combiner"
    )
    _backward_text_kind("left", cache.kinds["left"], params, d_ctx_in[:, :d], grads)
    _backward_text_kind("right", cache.kinds["right"], params, d_ctx_in[:, d : 2 * d], grads)
    _backward_text_kind("sentence", cache.kinds["sentence"], params, d_ctx_in[:, 2 * d :], grads)
    _backward_text_kind("span", cache.kinds["span"], params, d_span, grads)


def _backward_entity_tower(
    cache: EntityTowerCache, params: ModelParams, d_enc: np.ndarray, grads: Gradients
) -> None:
    d = params.dims.encoding_width
    d_final_in = _layer_backward(
        params.entity_combiner, cache.final, d_enc, grads, "entity_combiner"
    )
    d_doc, d_title = d_final_in[:, :d], d_final_in[:, d:]
    d_doc_in = _layer_backward(
        params.entity_doc_combiner, cache.doc, d_doc, grads, "entity_doc_combiner"
    )
    d_para, d_cat = d_doc_in[:, :d], d_doc_in[:, d:]
    _backward_text_kind("paragraph", cache.kinds["paragraph"], params, d_para, grads)
    _backward_text_kind("title", cache.kinds["title"], params, d_title, grads)
    d_cat_means = _layer_backward(
        params.category_layer, cache.category_layer, d_cat, grads, "category_layer"
    )
    _mean_backward(cache.categories, d_cat_means, grads["category_table"])


@dataclasses.dataclass
class StepResult:
    loss: float
    softmax_loss: float
    hard_loss: float | None
    sims: np.ndarray
    grads: Gradients
    relu_signature: bytes = b""


def _relu_signature(caches: Iterable) -> bytes:
    """Packed ReLU on/off pattern across tower caches; two parameter points
    with different signatures straddle a kink, where finite differences are
    meaningless."""
    parts = []
    for cache in caches:
        for kind_cache in cache.kinds.values():
            parts.append(np.packbits(kind_cache.layer.pre > 0.0).tobytes())
        if isinstance(cache, MentionTowerCache):
            parts.append(np.packbits(cache.context.pre > 0.0).tobytes())
        else:
            parts.append(np.packbits(cache.category_layer.pre > 0.0).tobytes())
            parts.append(np.packbits(cache.doc.pre > 0.0).tobytes())
    return b"".join(parts)


def backward_featurized(
    mentions: Sequence[FeaturizedMention],
    entities: Sequence[FeaturizedEntity],
    params: ModelParams,
    hard_mentions: Sequence[FeaturizedMention] = (),
    hard_entities: Sequence[FeaturizedEntity] = (),
    hard_labels: np.ndarray | None = None,
) -> StepResult:
    """One multi-task forward/backward pass over featurized inputs."""
    if len(mentions) != len(entities):
        raise ValueError("batch mention and entity counts must match")
    if len(mentions) < 2:
        raise ValueError("in-batch softmax needs at least two pairs")
    grads = zero_gradients(params)

    m_cache = encode_mention_batch(mentions, params)
    e_cache = encode_entity_batch(entities, params)
    caches = [m_cache, e_cache]
    sims, nu, nv = _cosine_forward(m_cache.encodings, e_cache.encodings)
    softmax_loss, d_sims, d_a = softmax_loss_and_grad(sims, float(params.a))
    grads["a"] += d_a
    d_u, d_v = _cosine_backward_allpairs(
        m_cache.encodings, e_cache.encodings, sims, nu, nv, d_sims
    )
    _backward_mention_tower(m_cache, params, d_u, grads)
    _backward_entity_tower(e_cache, params, d_v, grads)

    hard_loss = None
    if hard_labels is not None and len(hard_mentions):
        hm_cache = encode_mention_batch(hard_mentions, params)
        he_cache = encode_entity_batch(hard_entities, params)
        caches += [hm_cache, he_cache]
        scores, hnu, hnv = _cosine_rowwise(hm_cache.encodings, he_cache.encodings)
        hard_loss, d_scores, d_a_h, d_b_h = _logistic_batch(
            scores, np.asarray(hard_labels, dtype=np.float64), float(params.a_h), float(params.b_h)
        )
        grads["a_h"] += d_a_h
        grads["b_h"] += d_b_h
        d_hu, d_hv = _cosine_backward_rowwise(
            hm_cache.encodings, he_cache.encodings, scores, hnu, hnv, d_scores
        )
        _backward_mention_tower(hm_cache, params, d_hu, grads)
        _backward_entity_tower(he_cache, params, d_hv, grads)

    total = softmax_loss + (hard_loss if hard_loss is not None else 0.0)
    if not np.isfinite(total):
        raise NumericsError(
            f"non-finite loss (softmax={softmax_loss}, hard={hard_loss})"
        )
    return StepResult(
        loss=total,
        softmax_loss=softmax_loss,
        hard_loss=hard_loss,
        sims=sims,
        grads=grads,
        relu_signature=_relu_signature(caches),
    )


def _as_mention_features(obj):
    return obj.features if isinstance(obj, MentionExample) else obj


def _as_entity_features(obj):
    from .corpus import EntityRecord

    return entity_features(obj) if isinstance(obj, EntityRecord) else obj


def backward_batch(
    batch: Sequence[tuple],
    params: ModelParams,
    vocab: NgramVocabulary,
    hard_pairs: Sequence[tuple] = (),
) -> tuple[float, Gradients]:
    """Loss and exact gradients for a batch of (mention, entity) pairs,
    optionally joined by (mention, entity, label) hard pairs.

    Accepts MentionExample/EntityRecord or their extracted feature bundles.
    """
    rows = params.dims.category_rows
    mentions = [featurize_mention(_as_mention_features(m), vocab) for m, _ in batch]
    entities = [featurize_entity(_as_entity_features(e), vocab, rows) for _, e in batch]
    hm = [featurize_mention(_as_mention_features(m), vocab) for m, _, _ in hard_pairs]
    he = [featurize_entity(_as_entity_features(e), vocab, rows) for _, e, _ in hard_pairs]
    labels = np.array([y for _, _, y in hard_pairs], dtype=np.float64) if hard_pairs else None
    result = backward_featurized(mentions, entities, params, hm, he, labels)
    return result.loss, result.grads


def sgd_momentum_step(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    learning_rate: float,
    momentum: float,
) -> None:
    """In-place standard momentum update: v <- mu v + g; p <- p - lr v."""
    for name, param in arrays.items():
        grad = grads[name]
        if np.asarray(param).shape != np.asarray(grad).shape:
            raise ValueError(f"{name}: gradient shape {np.asarray(grad).shape} "
                             f"does not match parameter shape {np.asarray(param).shape}")
        vel = velocity[name]
        vel *= momentum
        vel += grad
        param -= learning_rate * vel


def zero_velocity(params: ModelParams) -> dict[str, np.ndarray]:
    return {
        name: np.zeros_like(np.asarray(arr))
        for name, arr in parameter_families(params).items()
    }


def inbatch_recall_at_1(sims: np.ndarray) -> float:
    """Fraction of rows whose diagonal strictly beats every other column
    (ties count as misses)."""
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1] or sims.shape[0] < 2:
        raise ValueError("sims must be square with B >= 2")
    b = sims.shape[0]
    diag = np.diag(sims)
    off = sims.copy()
    off[np.arange(b), np.arange(b)] = -np.inf
    return float(np.mean(diag > off.max(axis=1)))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties
    counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def central_difference_error(
    loss_fn: Callable[[], float],
    coords: Sequence[tuple[np.ndarray, int, float]],
    epsilon: float,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``coords`` holds (array, flat_index, analytic_gradient) triples. The
    difference quotient divides by the step actually realized after storage
    rounding, so float32 parameters check cleanly.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    worst = 0.0
    for array, flat_index, analytic in coords:
        flat = array.reshape(-1)
        original = flat[flat_index].item()
        flat[flat_index] = original + epsilon
        realized_plus = flat[flat_index].item()
        loss_plus = loss_fn()
        flat[flat_index] = original - epsilon
        realized_minus = flat[flat_index].item()
        loss_minus = loss_fn()
        flat[flat_index] = original
        numeric = (loss_plus - loss_minus) / (realized_plus - realized_minus)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def _touched_table_rows(
    mentions: Iterable[FeaturizedMention],
    entities: Iterable[FeaturizedEntity],
) -> dict[str, np.ndarray]:
    uni, bi, cat = [], [], []
    for m in mentions:
        for kind in MENTION_KINDS:
            uni.append(m.ids[kind][0])
            bi.append(m.ids[kind][1])
    for ent in entities:
        for kind in ENTITY_KINDS:
            uni.append(ent.ids[kind][0])
            bi.append(ent.ids[kind][1])
        cat.append(ent.category_ids)

    def uniq(parts):
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))

    return {"unigram_table": uniq(uni), "bigram_table": uniq(bi), "category_table": uniq(cat)}


def finite_difference_check(
    params: ModelParams,
    mentions: Sequence[FeaturizedMention],
    entities: Sequence[FeaturizedEntity],
    epsilon: float = 1e-4,
    samples: int = 200,
    seed: int = 0,
    hard_mentions: Sequence[FeaturizedMention] = (),
    hard_entities: Sequence[FeaturizedEntity] = (),
    hard_labels: np.ndarray | None = None,
) -> float:
    """Compare analytic gradients to central differences on ``samples``
    coordinates stratified across every parameter family. Embedding-table
    coordinates are drawn from rows the batch actually touches."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    run = lambda: backward_featurized(
        mentions, entities, params, hard_mentions, hard_entities, hard_labels
    )
    base = run()
    analytic = base.grads

    families = parameter_families(params)
    touched = _touched_table_rows(
        list(mentions) + list(hard_mentions), list(entities) + list(hard_entities)
    )
    names = list(families)
    # oversample: coordinates probing across a ReLU kink are discarded, since
    # the loss is not differentiable there and central differences say nothing
    per_family = max(3, (2 * samples) // len(names))
    coords: list[tuple[np.ndarray, int, float]] = []
    for name in names:
        array = np.asarray(families[name])
        flat_grad = analytic[name].reshape(-1)
        if name in touched:
            rows = touched[name]
            if rows.size == 0:
                continue
            width = array.shape[1]
            pool = np.unique(
                (rows[:, None] * width + rng.integers(0, width, size=(rows.size, 4))).reshape(-1)
            )
        else:
            pool = np.arange(array.size)
        take = min(per_family, pool.size)
        chosen = rng.choice(pool, size=take, replace=False)
        for flat_index in chosen:
            coords.append((array, int(flat_index), float(flat_grad[flat_index])))

    order = rng.permutation(len(coords))
    worst = 0.0
    checked = 0
    target = min(samples, len(coords))
    for pos in order:
        array, flat_index, analytic_value = coords[int(pos)]
        flat = array.reshape(-1)
        original = flat[flat_index].item()
        flat[flat_index] = original + epsilon
        realized_plus = flat[flat_index].item()
        plus = run()
        flat[flat_index] = original - epsilon
        realized_minus = flat[flat_index].item()
        minus = run()
        flat[flat_index] = original
        if plus.relu_signature != minus.relu_signature:
            continue  # non-differentiable within the probe interval
        numeric = (plus.loss - minus.loss) / (realized_plus - realized_minus)
        err = abs(analytic_value - numeric) / max(abs(analytic_value), abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
        if checked >= target:
            break
    return worst


def random_check_setup(
    width: int = 8, batch: int = 4, seed: int = 0, hard: int = 6
) -> tuple[
    ModelParams,
    list[FeaturizedMention],
    list[FeaturizedEntity],
    list[FeaturizedMention],
    list[FeaturizedEntity],
    np.ndarray,
]:
    """A small random model plus a featurized batch and hard pairs, touching
    every parameter family; used by gradient verification."""
    from .features import (
        MENTION_TOKEN,
        PAD_TOKEN,
        EntityFeatures,
        MentionFeatures,
        NgramVocabulary,
        TextFeature,
    )
    from .model import ModelDims, parameter_families

    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(24)]
    unigram_ids = {PAD_TOKEN: 0, MENTION_TOKEN: 1}
    for i, word in enumerate(words[:10]):
        unigram_ids[word] = 2 + i
    bigram_ids = {(words[0], words[1]): 12, (words[2], words[3]): 13}
    vocab = NgramVocabulary(unigram_ids, bigram_ids, oov_buckets=16)
    params = init_params(
        vocab, ModelDims(embed_width=width, encoding_width=width, category_rows=32), seed=seed
    )
    # move biases and scalars off their neutral initialization so every
    # gradient path is exercised away from kinks
    for name, arr in parameter_families(params).items():
        if name.endswith(".bias"):
            arr += rng.uniform(-0.1, 0.1, size=arr.shape).astype(np.float32)
    params.a[...] = np.float32(1.25)
    params.a_h[...] = np.float32(0.8)
    params.b_h[...] = np.float32(0.15)

    def pick(n: int) -> list[str]:
        return [words[int(i)] for i in rng.integers(0, len(words), size=n)]

    def mention() -> FeaturizedMention:
        left = pick(int(rng.integers(3, 6)))
        left = [PAD_TOKEN] * (5 - len(left)) + left
        right = pick(int(rng.integers(3, 6)))
        right = right + [PAD_TOKEN] * (5 - len(right))
        sentence = pick(int(rng.integers(2, 5))) + [MENTION_TOKEN] + pick(2)
        feats = MentionFeatures(
            span=TextFeature(tuple(pick(int(rng.integers(1, 3))))),
            left_context=TextFeature(tuple(left)),
            right_context=TextFeature(tuple(right)),
            sentence=TextFeature(tuple(sentence)),
        )
        return featurize_mention(feats, vocab)

    def entity() -> FeaturizedEntity:
        feats = EntityFeatures(
            title=TextFeature(tuple(pick(int(rng.integers(1, 4))))),
            paragraph=TextFeature(tuple(pick(int(rng.integers(0, 7))))),
            categories=tuple(f"cat{int(c)}" for c in rng.integers(0, 9, size=rng.integers(1, 3))),
        )
        return featurize_entity(feats, vocab, params.dims.category_rows)

    mentions = [mention() for _ in range(batch)]
    entities = [entity() for _ in range(batch)]
    hard_mentions = [mention() for _ in range(hard)]
    hard_entities = [entity() for _ in range(hard)]
    labels = (rng.uniform(size=hard) < 0.5).astype(np.float64)
    return params, mentions, entities, hard_mentions, hard_entities, labels


@dataclasses.dataclass
class TrainingLog:
    """Evaluation rows plus a run summary, exportable as CSV and JSON."""

    rows: list[tuple[int, float, float]] = dataclasses.field(default_factory=list)
    summary: dict = dataclasses.field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,loss,heldout_r_at_1\n")
            for step, loss, r1 in self.rows:
                fh.write(f"{step},{loss:.6f},{r1:.6f}\n")

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


class _EntityUniqueBatcher:
    """Cycles through examples so no batch repeats a gold entity.

    Duplicate golds in one batch would make their similarity-matrix columns
    identical and recall@1 undecidable, so batches draw at most one mention
    per entity; mentions of one entity rotate across epochs.
    """

    def __init__(self, examples: Sequence[MentionExample], rng: np.random.Generator):
        self._rng = rng
        by_entity: dict[str, list[MentionExample]] = {}
        for ex in examples:
            by_entity.setdefault(ex.gold_entity_id, []).append(ex)
        self._entities = sorted(by_entity)
        self._pools = {eid: by_entity[eid] for eid in self._entities}
        self._queues: dict[str, deque] = {eid: deque() for eid in self._entities}

    def next_batch(self, size: int) -> list[MentionExample]:
        order = self._rng.permutation(len(self._entities))
        batch = []
        for idx in order[: min(size, len(self._entities))]:
            eid = self._entities[idx]
            queue = self._queues[eid]
            if not queue:
                refill = list(self._pools[eid])
                self._rng.shuffle(refill)
                queue.extend(refill)
            batch.append(queue.popleft())
        return batch


def featurize_mention_map(
    examples: Iterable[MentionExample], vocab: NgramVocabulary
) -> dict[str, FeaturizedMention]:
    return {ex.mention_id: featurize_mention(ex.features, vocab) for ex in examples}


class EntityFeaturizer:
    """Memoized record -> FeaturizedEntity lookup for one catalog."""

    def __init__(self, catalog: EntityCatalog, vocab: NgramVocabulary, category_rows: int):
        self._catalog = catalog
        self._vocab = vocab
        self._rows = category_rows
        self._cache: dict[str, FeaturizedEntity] = {}

    def __call__(self, entity_id: str) -> FeaturizedEntity:
        found = self._cache.get(entity_id)
        if found is None:
            record = self._catalog[entity_id]
            found = featurize_entity(entity_features(record), self._vocab, self._rows)
            self._cache[entity_id] = found
        return found


def _heldout_eval_batches(
    heldout: Sequence[MentionExample],
    batch_size: int,
    rng: np.random.Generator,
) -> list[list[MentionExample]]:
    """Fixed, seeded, entity-unique heldout batches for comparable metrics."""
    batcher = _EntityUniqueBatcher(heldout, rng)
    n_batches = max(1, len(heldout) // batch_size)
    batches = []
    for _ in range(n_batches):
        batch = batcher.next_batch(batch_size)
        if len(batch) >= 2:
            batches.append(batch)
    return batches


def heldout_inbatch_recall(
    batches: Sequence[Sequence[MentionExample]],
    params: ModelParams,
    mention_map: dict[str, FeaturizedMention],
    entity_featurizer: EntityFeaturizer,
) -> float:
    total, weight = 0.0, 0
    for batch in batches:
        mentions = [mention_map[ex.mention_id] for ex in batch]
        entities = [entity_featurizer(ex.gold_entity_id) for ex in batch]
        m_enc = encode_mention_batch(mentions, params).encodings
        e_enc = encode_entity_batch(entities, params).encodings
        sims, _, _ = _cosine_forward(m_enc, e_enc)
        total += inbatch_recall_at_1(sims) * len(batch)
        weight += len(batch)
    return total / weight if weight else 0.0


def train(
    split: CorpusSplit,
    catalog: EntityCatalog,
    vocab: NgramVocabulary,
    config: TrainConfig,
    seed: int,
    *,
    dims: ModelDims | None = None,
    params: ModelParams | None = None,
    hard_pool: "HardPairPool | None" = None,
) -> tuple[ModelParams, TrainingLog]:
    """Run the (optionally multi-task) training loop.

    Batches cycle through training mentions with in-batch negatives; heldout
    in-batch recall@1 is evaluated every ``eval_every`` steps on fixed seeded
    batches. Training stops at ``max_steps`` or once the metric has failed to
    improve by more than 1e-3 for ``patience`` consecutive evaluations.
    Passing ``params`` resumes an existing model; a non-empty ``hard_pool``
    adds the logistic task with equal weight.
    """
    if len(split.train) < 2:
        raise ValueError("need at least 2 training examples")
    seeds = np.random.SeedSequence(seed).spawn(4)
    init_seed = int(seeds[0].generate_state(1)[0])
    batch_rng = np.random.default_rng(seeds[1])
    hard_rng = np.random.default_rng(seeds[2])
    eval_rng = np.random.default_rng(seeds[3])

    if params is None:
        params = init_params(vocab, dims, seed=init_seed)
    mention_map = featurize_mention_map(list(split.train) + list(split.heldout), vocab)
    entity_featurizer = EntityFeaturizer(catalog, vocab, params.dims.category_rows)

    hard_train: list[HardPair] = list(hard_pool.training_pairs()) if hard_pool else []
    hard_eval: list[HardPair] = list(hard_pool.heldout_pairs()) if hard_pool else []
    hard_eval_m = [mention_map[p.mention_id] for p in hard_eval]
    hard_eval_e = [entity_featurizer(p.entity_id) for p in hard_eval]
    hard_eval_labels = [p.label for p in hard_eval]

    def stopping_metric(r1: float) -> float:
        """Plateau detection uses the held-out in-batch recall alone for the
        single-task loop and the two-task average once hard pairs exist."""
        if len(set(hard_eval_labels)) < 2:
            return r1
        u = encode_mention_batch(hard_eval_m, params).encodings
        v = encode_entity_batch(hard_eval_e, params).encodings
        scores, _, _ = _cosine_rowwise(u, v)
        return 0.5 * (r1 + auc(scores, np.array(hard_eval_labels)))

    batcher = _EntityUniqueBatcher(split.train, batch_rng)
    eval_batches = _heldout_eval_batches(split.heldout, config.batch_size, eval_rng)
    velocity = zero_velocity(params)
    families = parameter_families(params)

    log = TrainingLog()
    started = time.perf_counter()
    best_metric = -np.inf
    stalled = 0
    final_r1 = 0.0
    step = 0
    while step < config.max_steps:
        step += 1
        batch = batcher.next_batch(config.batch_size)
        mentions = [mention_map[ex.mention_id] for ex in batch]
        entities = [entity_featurizer(ex.gold_entity_id) for ex in batch]

        hm: list[FeaturizedMention] = []
        he: list[FeaturizedEntity] = []
        labels = None
        if hard_train:
            picks = hard_rng.integers(0, len(hard_train), size=config.batch_size)
            chosen = [hard_train[int(i)] for i in picks]
            hm = [mention_map[p.mention_id] for p in chosen]
            he = [entity_featurizer(p.entity_id) for p in chosen]
            labels = np.array([p.label for p in chosen], dtype=np.float64)

        result = backward_featurized(mentions, entities, params, hm, he, labels)
        sgd_momentum_step(
            families, result.grads, velocity, config.learning_rate, config.momentum
        )

        if step % config.eval_every == 0 or step == config.max_steps:
            r1 = heldout_inbatch_recall(eval_batches, params, mention_map, entity_featurizer)
            log.rows.append((step, result.loss, r1))
            final_r1 = r1
            metric = stopping_metric(r1)
            if metric > best_metric + 1e-3:
                best_metric = metric
                stalled = 0
            else:
                stalled += 1
                if stalled >= config.patience:
                    break

    log.summary = {
        "steps": step,
        "final_r1": final_r1,
        "wall_seconds": round(time.perf_counter() - started, 3),
    }
    return params, log
