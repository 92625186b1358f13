"""deer: dense entity retrieval.

A dual-encoder maps mentions-in-context and knowledge-base entities into one
vector space; retrieval is nearest-neighbor search over pre-computed entity
encodings (exact, or quantization-based approximate). Training uses in-batch
random negatives refined by iterative unsupervised hard-negative mining, and
ships with alias-table and BM25 baselines plus a recall/latency harness.
"""

__version__ = "0.1.0"

from .corpus import (
    AnnotatedDocument,
    CorpusError,
    CorpusSplit,
    EntityCatalog,
    EntityRecord,
    MentionExample,
    SyntheticConfig,
    generate_synthetic,
    load_documents,
    load_entities,
    split_examples,
)
from .features import (
    EntityFeatures,
    MentionFeatures,
    NgramVocabulary,
    TextFeature,
    build_vocabulary,
    entity_features,
    examples_from_documents,
    extract_ngrams,
    mention_features,
    ngram_id,
    tokenize,
)
from .model import (
    AffineLayer,
    ModelDims,
    ModelParams,
    cosine,
    encode_categories,
    encode_entity,
    encode_mention,
    encode_text_feature,
    init_params,
    persist_params,
    restore_params,
    similarity_matrix,
)
from .training import (
    Gradients,
    HardPair,
    TrainConfig,
    TrainingLog,
    auc,
    backward_batch,
    finite_difference_check,
    inbatch_recall_at_1,
    logistic_loss_and_grad,
    sgd_momentum_step,
    softmax_loss_and_grad,
    train,
)
from .mining import (
    EncodingSnapshot,
    HardPairPool,
    MiningReport,
    mine_hard_negatives,
    mining_round,
    run_iterative_mining,
    snapshot_encodings,
)
from .index import (
    AhIndex,
    Codebooks,
    TreeAhIndex,
    VectorStore,
    build_ah,
    build_brute,
    build_tree_ah,
    encode_pq,
    kmeans,
    load_index,
    save_index,
    search_ah,
    search_brute,
    search_tree_ah,
    train_quantizer,
)
from .baselines import (
    AliasTable,
    Bm25Index,
    alias_lookup,
    bm25_search,
    build_alias_table,
    build_bm25,
    extend_alias_table,
)
from .evaluation import (
    AliasTableRetriever,
    Bm25Retriever,
    DenseRetriever,
    EvalRow,
    comparison_report,
    evaluate_retriever,
    latency_benchmark,
    recall_at_k,
)
