"""Command-line pipelines over the library.

One key=value config file (any key overridable with ``--set key=value``)
plus a mandatory seed drive every stage:

    synth        write a synthetic KB + annotated documents
    ingest       validate a corpus and build the n-gram vocabulary
    train        train the dual encoder with in-batch negatives
    mine         run iterative hard-negative mining rounds
    build-index  encode all entities and build a retrieval index
    evaluate     compare retrievers (dense + baselines) with recall@k
    query        retrieve entities for one span-in-context
    benchmark    latency/overlap comparison of search methods
    gradcheck    verify analytic gradients against finite differences

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every run writes ``run_manifest.json`` (config snapshot, seed, versions,
wall time) into the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._binio import FormatError
from .baselines import build_alias_table, build_bm25, extend_alias_table
from .corpus import (
    CorpusError,
    SyntheticConfig,
    ambiguity_stats,
    generate_synthetic,
    load_documents,
    load_entities,
    load_synthetic_config,
    save_documents,
    save_entities,
    split_examples,
)
from .evaluation import (
    AliasTableRetriever,
    Bm25Retriever,
    DenseRetriever,
    benchmark_csv,
    benchmark_methods,
    evaluate_retriever,
    write_reports,
)
from .features import (
    NgramVocabulary,
    build_vocabulary,
    examples_from_documents,
    mention_features,
    tokenize,
)
from .index import (
    build_ah,
    build_brute,
    build_tree_ah,
    default_ah_config,
    default_tree_config,
    load_index,
    save_index,
    search_ah,
    search_brute,
    search_tree_ah,
)
from .mining import encode_all_entities, run_iterative_mining
from .model import ModelDims, init_params, persist_params, restore_params
from .training import (
    NumericsError,
    TrainConfig,
    finite_difference_check,
    random_check_setup,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_TOLERANCE = 1e-4


class UsageError(ValueError):
    """Bad arguments or configuration."""


@dataclasses.dataclass
class RunConfig:
    """Everything a pipeline stage may need; unset paths default into outdir."""

    outdir: str = "out"
    kb: str = ""
    docs: str = ""
    vocab: str = ""
    model: str = ""
    index: str = ""
    embed_width: int = 64
    encoding_width: int = 64
    category_rows: int = 50_000
    max_vocab: int = 50_000
    oov_buckets: int = 4_096
    holdout_fraction: float = 0.001
    batch_size: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    max_steps: int = 20_000
    eval_every: int = 200
    patience: int = 5
    mining_rounds: int = 2
    mining_k: int = 10
    mining_max_steps: int = 2_000
    index_kind: str = "brute"
    subspaces: int = 0  # 0 = derive from vector width
    centers: int = 16
    partitions: int = 0  # 0 = derive from store size
    probes: int = 0
    rescore: int = 0
    bm25_k1: float = 1.5
    bm25_b: float = 0.75
    synth_entities: int = 200
    synth_families: int = 40
    synth_topic_vocab: int = 2_000
    synth_mentions_per_entity: int = 20
    benchmark_n: int = 100_000
    benchmark_d: int = 64
    benchmark_queries: int = 50
    benchmark_k: int = 10
    eval_ks: str = "1,100"
    seed: int | None = None

    def path(self, key: str, default_name: str) -> Path:
        configured = getattr(self, key)
        return Path(configured) if configured else Path(self.outdir) / default_name

    def require_seed(self) -> int:
        if self.seed is None:
            raise UsageError("a seed is mandatory; pass --seed or set seed= in the config")
        return int(self.seed)

    def ks(self) -> list[int]:
        try:
            return sorted({int(part) for part in self.eval_ks.split(",") if part.strip()})
        except ValueError:
            raise UsageError(f"eval_ks must be comma-separated integers, got {self.eval_ks!r}")


_FIELD_TYPES = {field.name: field.type for field in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise UsageError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int" or kind == "int | None":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"config key {key} expects {kind}, got {raw!r}") from None


def load_run_config(path: str | None, overrides: list[str], seed: int | None) -> RunConfig:
    values: dict = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise CorpusError(f"config file {path!r} does not exist")
        for lineno, line in enumerate(config_path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            values[key.strip()] = _coerce(key.strip(), raw.strip())
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        values[key.strip()] = _coerce(key.strip(), raw.strip())
    if seed is not None:
        values["seed"] = seed
    return RunConfig(**values)


def _write_manifest(config: RunConfig, command: str, started: float) -> None:
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": dataclasses.asdict(config),
        "seed": config.seed,
        "versions": {
            "deer": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_seconds": round(time.perf_counter() - started, 3),
    }
    (outdir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_corpus(config: RunConfig):
    catalog = load_entities(config.path("kb", "kb.jsonl"))
    docs = load_documents(config.path("docs", "docs.jsonl"))
    examples = examples_from_documents(docs, catalog)
    return catalog, docs, examples


def _load_split(config: RunConfig, examples):
    return split_examples(examples, config.holdout_fraction, config.require_seed())


def _train_config(config: RunConfig, max_steps: int | None = None) -> TrainConfig:
    return TrainConfig(
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        max_steps=config.max_steps if max_steps is None else max_steps,
        eval_every=config.eval_every,
        patience=config.patience,
    )


def _dims(config: RunConfig) -> ModelDims:
    return ModelDims(
        embed_width=config.embed_width,
        encoding_width=config.encoding_width,
        category_rows=config.category_rows,
    )


def cmd_synth(config: RunConfig, args) -> int:
    seed = config.require_seed()
    if args.synth_config:
        synth_config, file_seed = load_synthetic_config(args.synth_config)
        if config.seed is None and file_seed is not None:
            seed = file_seed
    else:
        synth_config = SyntheticConfig(
            entities=config.synth_entities,
            families=config.synth_families,
            topic_vocab=config.synth_topic_vocab,
            mentions_per_entity=config.synth_mentions_per_entity,
        )
    catalog, docs = generate_synthetic(synth_config, seed)
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_entities(catalog, outdir / "kb.jsonl")
    save_documents(docs, outdir / "docs.jsonl")
    stats = ambiguity_stats(docs)
    print(json.dumps({"entities": len(catalog), **stats}, sort_keys=True))
    return EXIT_OK


def cmd_ingest(config: RunConfig, args) -> int:
    catalog, docs, examples = _load_corpus(config)
    split = _load_split(config, examples)
    vocab = build_vocabulary(split.train, catalog, config.max_vocab, config.oov_buckets)
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    vocab.save(outdir / "vocab.bin")
    print(
        json.dumps(
            {
                "entities": len(catalog),
                "documents": len(docs),
                "examples": len(examples),
                "train": len(split.train),
                "heldout": len(split.heldout),
                "vocab_size": vocab.vocab_size,
                "oov_buckets": vocab.oov_buckets,
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_train(config: RunConfig, args) -> int:
    catalog, _docs, examples = _load_corpus(config)
    vocab = NgramVocabulary.load(config.path("vocab", "vocab.bin"))
    split = _load_split(config, examples)
    params, log = train(
        split,
        catalog,
        vocab,
        _train_config(config),
        seed=config.require_seed(),
        dims=_dims(config),
    )
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    persist_params(params, outdir / "model.bin")
    log.write_csv(outdir / "training_log.csv")
    log.write_summary(outdir / "training_summary.json")
    print(json.dumps(log.summary, sort_keys=True))
    return EXIT_OK


def cmd_mine(config: RunConfig, args) -> int:
    catalog, _docs, examples = _load_corpus(config)
    vocab = NgramVocabulary.load(config.path("vocab", "vocab.bin"))
    params = restore_params(config.path("model", "model.bin"))
    split = _load_split(config, examples)
    params, _pool, report = run_iterative_mining(
        params,
        split,
        catalog,
        vocab,
        rounds=config.mining_rounds,
        config=_train_config(config, max_steps=config.mining_max_steps),
        seed=config.require_seed(),
        k=config.mining_k,
    )
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    persist_params(params, outdir / "model.bin")
    report.write_csv(outdir / "mining_rounds.csv")
    report.write_curve(outdir / "r1_curve.json")
    print(json.dumps({"r1_curve": [round(v, 6) for v in report.r1_curve]}))
    return EXIT_OK


def _build_index_for(config: RunConfig, encodings, ids):
    seed = config.require_seed()
    store = build_brute(encodings, ids)
    if config.index_kind == "brute":
        return store
    subspaces = config.subspaces or default_ah_config(store.width)[0]
    if config.index_kind == "ah":
        return build_ah(store, subspaces, config.centers, seed)
    if config.index_kind == "tree":
        partitions = config.partitions or default_tree_config(store.size)[0]
        return build_tree_ah(store, partitions, subspaces, config.centers, seed)
    raise UsageError(f"unknown index_kind {config.index_kind!r} (brute|ah|tree)")


def cmd_build_index(config: RunConfig, args) -> int:
    catalog = load_entities(config.path("kb", "kb.jsonl"))
    vocab = NgramVocabulary.load(config.path("vocab", "vocab.bin"))
    params = restore_params(config.path("model", "model.bin"))
    encodings = encode_all_entities(catalog, params, vocab)
    index = _build_index_for(config, encodings, catalog.ids())
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    target = outdir / f"index_{config.index_kind}.bin"
    save_index(index, target)
    print(json.dumps({"index": str(target), "kind": config.index_kind, "size": len(catalog)}))
    return EXIT_OK


def cmd_evaluate(config: RunConfig, args) -> int:
    catalog, _docs, examples = _load_corpus(config)
    vocab = NgramVocabulary.load(config.path("vocab", "vocab.bin"))
    params = restore_params(config.path("model", "model.bin"))
    index = load_index(config.path("index", f"index_{config.index_kind}.bin"))
    split = _load_split(config, examples)

    probes = config.probes or default_tree_config(getattr(index, "store", index).size)[1]
    retrievers = [
        DenseRetriever(params, vocab, index, probes=probes, rescore=config.rescore),
        AliasTableRetriever(build_alias_table(split.train), name="at-prior"),
        AliasTableRetriever(
            extend_alias_table(build_alias_table(split.train), split.train), name="at-ext"
        ),
        Bm25Retriever(build_bm25(catalog, k1=config.bm25_k1, b=config.bm25_b)),
    ]
    rows = [
        evaluate_retriever(r, split.heldout, catalog, ks=config.ks()) for r in retrievers
    ]
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_reports(rows, outdir)
    print((outdir / "report.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_query(config: RunConfig, args) -> int:
    vocab = NgramVocabulary.load(config.path("vocab", "vocab.bin"))
    params = restore_params(config.path("model", "model.bin"))
    index = load_index(config.path("index", f"index_{config.index_kind}.bin"))

    span_tokens = tokenize(args.span)
    context_tokens = tokenize(args.context)
    if not span_tokens:
        raise UsageError("--span produced no tokens")
    doc_tokens, start = _plant_span(span_tokens, context_tokens)
    from .corpus import AnnotatedDocument

    doc = AnnotatedDocument(
        doc_id="query",
        tokens=tuple(doc_tokens),
        sentences=((0, len(doc_tokens)),),
        anchors=((start, start + len(span_tokens), "query"),),
    )
    features = mention_features(doc, doc.anchors[0])
    retriever = DenseRetriever(
        params, vocab, index, probes=config.probes or 1, rescore=config.rescore
    )
    query_vec = retriever.encode(_QueryExample(features))
    results = retriever.search(query_vec, args.k)
    print(json.dumps([{"id": eid, "score": round(score, 6)} for eid, score in results]))
    return EXIT_OK


@dataclasses.dataclass
class _QueryExample:
    features: object
    mention_id: str = "query"
    gold_entity_id: str = ""


def _plant_span(span_tokens: list[str], context_tokens: list[str]) -> tuple[list[str], int]:
    """Locate the span inside the context tokens; if absent, prepend it."""
    n = len(span_tokens)
    for start in range(0, max(0, len(context_tokens) - n) + 1):
        if context_tokens[start : start + n] == span_tokens:
            return context_tokens, start
    return span_tokens + context_tokens, 0


def cmd_benchmark(config: RunConfig, args) -> int:
    seed = config.require_seed()
    rng = np.random.default_rng(seed)
    if config.model and config.kb and config.vocab:
        catalog = load_entities(config.path("kb", "kb.jsonl"))
        vocab = NgramVocabulary.load(config.path("vocab", "vocab.bin"))
        params = restore_params(config.path("model", "model.bin"))
        encodings = encode_all_entities(catalog, params, vocab)
        ids = catalog.ids()
    else:
        encodings = rng.standard_normal((config.benchmark_n, config.benchmark_d))
        encodings /= np.linalg.norm(encodings, axis=1, keepdims=True)
        ids = [f"V{i:07d}" for i in range(config.benchmark_n)]
    store = build_brute(encodings, ids)
    subspaces = config.subspaces or default_ah_config(store.width)[0]
    partitions = config.partitions or default_tree_config(store.size)[0]
    probes = config.probes or default_tree_config(store.size)[1]
    ah = build_ah(store, subspaces, config.centers, seed)
    tree = build_tree_ah(store, partitions, subspaces, config.centers, seed)

    queries = rng.standard_normal((config.benchmark_queries, store.width))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    k, rescore = config.benchmark_k, config.rescore
    methods = {
        "brute": lambda q: search_brute(store, q, k),
        "ah": lambda q: search_ah(ah, q, k, rescore=rescore),
        "tree-ah": lambda q: search_tree_ah(tree, q, k, probes=probes, rescore=rescore),
    }
    rows = benchmark_methods(methods, list(queries), k=k)
    csv_text = benchmark_csv(rows)
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "benchmark.csv").write_text(csv_text, encoding="utf-8")
    print(csv_text, end="")
    print(
        f"# config: n={store.size} d={store.width} subspaces={subspaces} "
        f"centers={config.centers} partitions={partitions} probes={probes} "
        f"rescore={rescore} k={k}"
    )
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, args) -> int:
    seed = config.require_seed()
    params, mentions, entities, hm, he, labels = random_check_setup(
        width=args.dims, batch=args.batch, seed=seed
    )
    error = finite_difference_check(
        params,
        mentions,
        entities,
        epsilon=args.epsilon,
        samples=args.samples,
        seed=seed,
        hard_mentions=hm,
        hard_entities=he,
        hard_labels=labels,
    )
    print(f"max relative error: {error:.3e} over >= {args.samples} coordinates")
    if not np.isfinite(error) or error >= GRADCHECK_TOLERANCE:
        raise NumericsError(f"gradient check failed: {error:.3e} >= {GRADCHECK_TOLERANCE}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deer", description="dense entity retrieval pipelines"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override one config key",
        )
        p.add_argument("--seed", type=int, help="global random seed (mandatory)")
        p.add_argument("--outdir", help="output directory (shorthand for --set outdir=...)")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--synth-config", help="synthetic corpus key=value file")
    p.set_defaults(func=cmd_synth)

    for name, func, extra in (
        ("ingest", cmd_ingest, None),
        ("train", cmd_train, None),
        ("mine", cmd_mine, None),
        ("build-index", cmd_build_index, None),
        ("evaluate", cmd_evaluate, None),
        ("benchmark", cmd_benchmark, None),
    ):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("query", help="retrieve entities for one mention")
    common(p)
    p.add_argument("--span", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--dims", type=int, default=8, help="embedding/encoding width")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--samples", type=int, default=240)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    started = time.perf_counter()
    config = None
    try:
        overrides = list(args.overrides)
        if args.outdir:
            overrides.append(f"outdir={args.outdir}")
        config = load_run_config(args.config, overrides, args.seed)
        code = args.func(config, args)
        _write_manifest(config, args.command, started)
        return code
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        if config is not None:
            _write_manifest(config, args.command, started)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if config is not None:
            _write_manifest(config, args.command, started)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))
