"""Unsupervised hard-negative mining.

A trained model tends to beat random negatives by matching span text against
entity titles; the pairs it still gets wrong carry the context signal. Each
round: encode every training mention and every catalog entity with the
current model, pull each mention's top-k neighbors, and harvest the entities
ranked above the gold one as label-0 pairs. Those join the (label-1) gold
pairs in a growing classification pool used by the logistic task while
softmax training resumes. Later rounds mine fewer and fewer new pairs, so
the process converges naturally.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np

from ._binio import fnv1a_64
from .corpus import CorpusSplit, EntityCatalog, MentionExample
from .features import NgramVocabulary
from .model import (
    DEGENERATE_NORM,
    ModelParams,
    encode_entity_batch,
    encode_mention_batch,
)
from .training import (
    EntityFeaturizer,
    HardPair,
    TrainConfig,
    auc,
    featurize_mention_map,
    train,
)

_ENCODE_CHUNK = 512
_HOLDOUT_BUCKETS = 10  # one in ten pool pairs is held out for AUC tracking


@dataclasses.dataclass
class EncodingSnapshot:
    """Dense encodings of all training mentions and all catalog entities,
    with gold alignment. Rows follow ``mention_ids`` / ``entity_ids``."""

    mention_matrix: np.ndarray
    entity_matrix: np.ndarray
    mention_ids: list[str]
    entity_ids: list[str]
    mention_gold: np.ndarray  # entity row index per mention

    def entity_row(self, entity_id: str) -> int:
        return self._entity_rows[entity_id]

    def __post_init__(self):
        self._entity_rows = {eid: i for i, eid in enumerate(self.entity_ids)}


def encode_all_mentions(
    examples: Sequence[MentionExample],
    params: ModelParams,
    vocab: NgramVocabulary,
) -> np.ndarray:
    mention_map = featurize_mention_map(examples, vocab)
    rows = []
    feats = [mention_map[ex.mention_id] for ex in examples]
    for lo in range(0, len(feats), _ENCODE_CHUNK):
        rows.append(encode_mention_batch(feats[lo : lo + _ENCODE_CHUNK], params).encodings)
    return np.vstack(rows) if rows else np.empty((0, params.dims.encoding_width))


def encode_all_entities(
    catalog: EntityCatalog, params: ModelParams, vocab: NgramVocabulary
) -> np.ndarray:
    featurizer = EntityFeaturizer(catalog, vocab, params.dims.category_rows)
    feats = [featurizer(eid) for eid in catalog.ids()]
    rows = []
    for lo in range(0, len(feats), _ENCODE_CHUNK):
        rows.append(encode_entity_batch(feats[lo : lo + _ENCODE_CHUNK], params).encodings)
    return np.vstack(rows) if rows else np.empty((0, params.dims.encoding_width))


def snapshot_encodings(
    params: ModelParams,
    examples: Sequence[MentionExample],
    catalog: EntityCatalog,
    vocab: NgramVocabulary,
) -> EncodingSnapshot:
    """Encode the full corpus with the current model (entities without any
    training mention included)."""
    entity_ids = catalog.ids()
    entity_rows = {eid: i for i, eid in enumerate(entity_ids)}
    return EncodingSnapshot(
        mention_matrix=encode_all_mentions(examples, params, vocab),
        entity_matrix=encode_all_entities(catalog, params, vocab),
        mention_ids=[ex.mention_id for ex in examples],
        entity_ids=entity_ids,
        mention_gold=np.array(
            [entity_rows[ex.gold_entity_id] for ex in examples], dtype=np.int64
        ),
    )


def _normalized(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / np.where(norms < DEGENERATE_NORM, np.inf, norms)


def cosine_rankings(snapshot: EncodingSnapshot) -> np.ndarray:
    """Entity rows ordered best-first per mention; ties break by entity id."""
    scores = _normalized(snapshot.mention_matrix) @ _normalized(snapshot.entity_matrix).T
    id_rank = np.argsort(np.argsort(snapshot.entity_ids))
    order = np.lexsort(
        (np.broadcast_to(id_rank, scores.shape), -scores), axis=1
    )
    return order


def mine_hard_negatives(snapshot: EncodingSnapshot, k: int = 10) -> list[HardPair]:
    """Label-0 pairs for every retrieved entity ranked above the gold one.

    Per mention, only the top ``k`` by cosine are examined: nothing is mined
    when the gold entity comes first, and all ``k`` are mined when it is
    absent from the shortlist altogether.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    order = cosine_rankings(snapshot)[:, :k]
    negatives: list[HardPair] = []
    for m, top in enumerate(order):
        gold_row = snapshot.mention_gold[m]
        gold_positions = np.flatnonzero(top == gold_row)
        cut = int(gold_positions[0]) if gold_positions.size else k
        mention_id = snapshot.mention_ids[m]
        for row in top[:cut]:
            negatives.append(HardPair(mention_id, snapshot.entity_ids[int(row)], 0))
    return negatives


def _pair_bucket(pair: HardPair) -> int:
    return fnv1a_64(f"{pair.mention_id}\x00{pair.entity_id}".encode("utf-8")) % _HOLDOUT_BUCKETS


class HardPairPool:
    """Append-only pool of labeled pairs for the classification task.

    Gold (label-1) pairs enter once at construction; mined negatives are
    appended round by round with (mention, entity) deduplication. A stable
    hash routes one pair in ten to a heldout slice used for AUC tracking.
    """

    def __init__(self, positives: Sequence[HardPair] = ()):
        self._pairs: list[HardPair] = []
        self._seen: set[tuple[str, str]] = set()
        self._gold: dict[str, str] = {}
        self.per_round_added: list[int] = []
        for pair in positives:
            if pair.label != 1:
                raise ValueError("pool construction accepts only label-1 pairs")
            self._gold[pair.mention_id] = pair.entity_id
            self._append(pair)

    @classmethod
    def from_examples(cls, examples: Sequence[MentionExample]) -> "HardPairPool":
        return cls([HardPair(ex.mention_id, ex.gold_entity_id, 1) for ex in examples])

    def _append(self, pair: HardPair) -> bool:
        key = (pair.mention_id, pair.entity_id)
        if key in self._seen:
            return False
        self._seen.add(key)
        self._pairs.append(pair)
        return True

    def add_negatives(self, pairs: Sequence[HardPair]) -> int:
        """Append mined label-0 pairs; returns how many were actually new."""
        added = 0
        for pair in pairs:
            if pair.label != 0:
                raise ValueError("mined pairs must carry label 0")
            if self._gold.get(pair.mention_id) == pair.entity_id:
                raise ValueError(
                    f"refusing to label gold pair ({pair.mention_id}, {pair.entity_id}) "
                    "as a negative"
                )
            if self._append(pair):
                added += 1
        self.per_round_added.append(added)
        return added

    def __len__(self) -> int:
        return len(self._pairs)

    def pairs(self) -> list[HardPair]:
        return list(self._pairs)

    def training_pairs(self) -> list[HardPair]:
        return [p for p in self._pairs if _pair_bucket(p) != 0]

    def heldout_pairs(self) -> list[HardPair]:
        return [p for p in self._pairs if _pair_bucket(p) == 0]


def full_catalog_recall_at_1(
    params: ModelParams,
    examples: Sequence[MentionExample],
    catalog: EntityCatalog,
    vocab: NgramVocabulary,
) -> float:
    """Strict top-1 accuracy retrieving against the whole catalog."""
    snapshot = snapshot_encodings(params, examples, catalog, vocab)
    best = cosine_rankings(snapshot)[:, 0]
    return float(np.mean(best == snapshot.mention_gold))


def pool_auc(
    params: ModelParams,
    pairs: Sequence[HardPair],
    split: CorpusSplit,
    catalog: EntityCatalog,
    vocab: NgramVocabulary,
) -> float:
    """AUC of the logit-transformed pair scores; NaN when a class is missing."""
    if not pairs:
        return float("nan")
    labels = [p.label for p in pairs]
    if len(set(labels)) < 2:
        return float("nan")
    mention_map = featurize_mention_map(list(split.train) + list(split.heldout), vocab)
    featurizer = EntityFeaturizer(catalog, vocab, params.dims.category_rows)
    mentions = [mention_map[p.mention_id] for p in pairs]
    entities = [featurizer(p.entity_id) for p in pairs]
    scores = []
    for lo in range(0, len(pairs), _ENCODE_CHUNK):
        u = encode_mention_batch(mentions[lo : lo + _ENCODE_CHUNK], params).encodings
        v = encode_entity_batch(entities[lo : lo + _ENCODE_CHUNK], params).encodings
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        denom = np.where(nu * nv < DEGENERATE_NORM, np.inf, nu * nv)
        scores.append((u * v).sum(axis=1) / denom)
    return auc(np.concatenate(scores), np.array(labels))


@dataclasses.dataclass
class RoundMetrics:
    round_index: int
    new_negatives: int
    pool_size: int
    r1_before: float
    r1_after: float
    auc_before: float
    auc_after: float


def mining_round(
    params: ModelParams,
    split: CorpusSplit,
    catalog: EntityCatalog,
    vocab: NgramVocabulary,
    pool: HardPairPool,
    config: TrainConfig,
    round_index: int,
    seed: int,
    k: int = 10,
) -> tuple[ModelParams, RoundMetrics]:
    """One mine-then-resume-training cycle over an existing model."""
    r1_before = full_catalog_recall_at_1(params, split.heldout, catalog, vocab)
    auc_before = pool_auc(params, pool.heldout_pairs(), split, catalog, vocab)

    snapshot = snapshot_encodings(params, split.train, catalog, vocab)
    added = pool.add_negatives(mine_hard_negatives(snapshot, k))

    params, _log = train(
        split,
        catalog,
        vocab,
        config,
        seed=seed,
        params=params,
        hard_pool=pool if len(pool.training_pairs()) else None,
    )
    r1_after = full_catalog_recall_at_1(params, split.heldout, catalog, vocab)
    auc_after = pool_auc(params, pool.heldout_pairs(), split, catalog, vocab)
    return params, RoundMetrics(
        round_index=round_index,
        new_negatives=added,
        pool_size=len(pool),
        r1_before=r1_before,
        r1_after=r1_after,
        auc_before=auc_before,
        auc_after=auc_after,
    )


@dataclasses.dataclass
class MiningReport:
    """Per-round metrics plus the recall curve (round 0 = pre-mining)."""

    rounds: list[RoundMetrics]
    r1_curve: list[float]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("round,new_negatives,pool_size,heldout_r1,auc\n")
            for m in self.rounds:
                fh.write(
                    f"{m.round_index},{m.new_negatives},{m.pool_size},"
                    f"{m.r1_after:.6f},{m.auc_after:.6f}\n"
                )

    def write_curve(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([round(v, 6) for v in self.r1_curve], fh)
            fh.write("\n")


def run_iterative_mining(
    params: ModelParams,
    split: CorpusSplit,
    catalog: EntityCatalog,
    vocab: NgramVocabulary,
    rounds: int,
    config: TrainConfig,
    seed: int,
    k: int = 10,
    pool: HardPairPool | None = None,
) -> tuple[ModelParams, HardPairPool, MiningReport]:
    """Apply ``rounds`` mining cycles, tracking the recall-vs-round curve."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    pool = pool if pool is not None else HardPairPool.from_examples(split.train)
    seeds = np.random.SeedSequence(seed).spawn(rounds)
    metrics: list[RoundMetrics] = []
    curve: list[float] = []
    for r in range(rounds):
        params, m = mining_round(
            params,
            split,
            catalog,
            vocab,
            pool,
            config,
            round_index=r + 1,
            seed=int(seeds[r].generate_state(1)[0]),
            k=k,
        )
        if not curve:
            curve.append(m.r1_before)
        curve.append(m.r1_after)
        metrics.append(m)
    return params, pool, MiningReport(rounds=metrics, r1_curve=curve)
