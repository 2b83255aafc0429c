"""Command-line surface tying the pipeline together.

Subcommands: gen-synthetic, index, retrieve, train-align, train-rank,
rerank, eval, bench. Every command is deterministic given its inputs and
seed, and writes a JSON manifest (config, seed, SHA-256 of inputs and
outputs) next to its primary output so reruns can be verified by hash.

Exit codes: 0 success, 1 usage error, 2 data error. Options may also come
from a JSON config file (--config); explicit flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .decoding import WindowSchedule, sliding_window_rerank
from .errors import DataError, EmbrankError, StageOrderError, UsageError
from .evaluation import (
    CostModel,
    Run,
    TokenStats,
    measure_cost,
    ndcg_at_k,
    paired_ttest,
    predict_cost,
    read_qrels,
    read_run,
    write_efficiency_report,
    write_qrels,
    write_run,
)
from .lm import DecoderLm, LmConfig, rank_prompt_length
from .projector import Projector
from .retrieval import (
    Bm25Index,
    HashEncoder,
    Retriever,
    VectorIndex,
    load_bm25,
    read_corpus,
    read_embeddings,
    read_queries,
    save_bm25,
    write_corpus,
    write_embeddings,
    write_queries,
)
from .synthetic import SyntheticSpec, generate
from .templates import RANK_EMBEDDING_ONLY
from .training import (
    LexicalTeacher,
    TrainConfig,
    build_alignment_dataset,
    build_rank_sample,
    filter_by_length,
    read_rank_dataset,
    train,
)
from .numerics import make_rng


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        raise UsageError(message)


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(primary_output: str | Path, command: str, config: dict,
                    inputs: list[str | Path], outputs: list[str | Path],
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(config.items())},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    path = Path(str(primary_output) + ".manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed config JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return obj


class _Options:
    """Flag values override config-file values override hard defaults."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = vars(args)
        self.config = _load_config_file(self.args.get("config"))
        self.resolved: dict = {}

    def get(self, name: str, default=None):
        flag = self.args.get(name)
        if flag is not None:
            value = flag
        elif name in self.config:
            value = self.config[name]
        else:
            value = default
        self.resolved[name] = value
        return value

    def require(self, name: str):
        value = self.get(name)
        if value is None:
            raise UsageError(f"missing required option --{name.replace('_', '-')}")
        return value


def _build_lm(opts: _Options) -> tuple[LmConfig, int]:
    cfg = LmConfig(
        vocab_size=int(opts.get("vocab_size", 2048)),
        d_lm=int(opts.get("d_lm", 64)),
        n_layers=int(opts.get("n_layers", 2)),
        n_heads=int(opts.get("n_heads", 2)),
        max_seq=int(opts.get("max_seq", 512)),
    )
    return cfg, int(opts.get("seed", 0))


def _build_encoder(opts: _Options) -> HashEncoder:
    return HashEncoder(
        dim=int(opts.get("dim", 64)),
        vocab_hash_size=int(opts.get("vocab_hash", 4096)),
        pooling=str(opts.get("pooling", "mean")),
        seed=int(opts.get("encoder_seed", 0)),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_gen_synthetic(opts: _Options) -> int:
    out_dir = Path(opts.require("out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(
        n_passages=int(opts.get("passages", 200)),
        n_queries=int(opts.get("queries", 40)),
        passage_len=int(opts.get("passage_len", 25)),
        noise_words_per_query=int(opts.get("noise_words", 2)),
        seed=int(opts.get("seed", 0)),
    )
    passages, queries, qrels = generate(spec)
    corpus_path = out_dir / "corpus.jsonl"
    queries_path = out_dir / "queries.jsonl"
    qrels_path = out_dir / "qrels.txt"
    write_corpus(corpus_path, passages)
    write_queries(queries_path, queries)
    write_qrels(qrels_path, qrels)
    _write_manifest(
        corpus_path, "gen-synthetic", opts.resolved, [],
        [corpus_path, queries_path, qrels_path],
    )
    print(f"wrote {len(passages)} passages, {len(queries)} queries to {out_dir}")
    return 0


def _cmd_index(opts: _Options) -> int:
    corpus_path = opts.require("corpus")
    out_dir = Path(opts.require("out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    passages = read_corpus(corpus_path)
    if not passages:
        raise DataError(f"{corpus_path}: empty corpus")
    encoder = _build_encoder(opts)
    bm25 = Bm25Index.build(
        passages, k1=float(opts.get("k1", 0.9)), b=float(opts.get("b", 0.4))
    )
    vindex = VectorIndex.from_encoder(passages, encoder)
    bm25_path = out_dir / "bm25.json"
    emb_path = out_dir / "embeddings.jsonl"
    enc_path = out_dir / "encoder.json"
    save_bm25(bm25_path, bm25)
    write_embeddings(emb_path, vindex.ids, vindex.matrix)
    with open(enc_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "dim": encoder.dim,
                "vocab_hash_size": encoder.vocab_hash_size,
                "pooling": encoder.pooling,
                "seed": encoder.seed,
            },
            fh,
            sort_keys=True,
        )
        fh.write("\n")
    _write_manifest(
        bm25_path, "index", opts.resolved, [corpus_path], [bm25_path, emb_path, enc_path]
    )
    print(f"indexed {len(passages)} passages into {out_dir}")
    return 0


def _load_index_encoder(index_dir: Path) -> HashEncoder:
    enc_path = index_dir / "encoder.json"
    try:
        with open(enc_path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {enc_path}: {exc}") from exc
    return HashEncoder(
        dim=cfg["dim"], vocab_hash_size=cfg["vocab_hash_size"],
        pooling=cfg["pooling"], seed=cfg["seed"],
    )


def _cmd_retrieve(opts: _Options) -> int:
    corpus_path = opts.require("corpus")
    queries_path = opts.require("queries")
    index_dir = Path(opts.require("index_dir"))
    out_path = opts.require("out")
    backend = str(opts.get("backend", "dense"))
    k = int(opts.get("k", 100))
    passages = read_corpus(corpus_path)
    queries = read_queries(queries_path)
    encoder = _load_index_encoder(index_dir)
    bm25 = load_bm25(index_dir / "bm25.json")
    ids, matrix = read_embeddings(index_dir / "embeddings.jsonl")
    retriever = Retriever(passages, encoder, bm25=bm25, vindex=VectorIndex(ids, matrix))
    run = Run(tag=f"embrank-{backend}")
    for query in queries:
        hits = retriever.topk(query, k, backend)
        run.set_ranking(query.id, [(h.passage.id, h.score) for h in hits])
    write_run(out_path, run)
    _write_manifest(
        out_path, "retrieve", opts.resolved,
        [corpus_path, queries_path, index_dir / "bm25.json", index_dir / "embeddings.jsonl"],
        [out_path],
    )
    print(f"retrieved top-{k} ({backend}) for {len(queries)} queries -> {out_path}")
    return 0


def _cmd_train_align(opts: _Options) -> int:
    corpus_path = opts.require("corpus")
    out_path = opts.require("out")
    seed = int(opts.get("seed", 0))
    passages = read_corpus(corpus_path)
    encoder = _build_encoder(opts)
    lm_cfg, _ = _build_lm(opts)
    lm = DecoderLm(lm_cfg, seed=seed)
    projector = Projector(
        d_enc=encoder.dim, d_lm=lm_cfg.d_lm,
        activation=str(opts.get("activation", "gelu")), seed=seed,
    )
    rng = make_rng(seed)
    dataset = build_alignment_dataset(
        [p.text for p in passages], encoder, lm, rng,
        max_target_tokens=opts.get("max_target_tokens"),
    )
    config = TrainConfig(
        stage="align",
        lr=float(opts.get("lr", 1e-4)),
        batch_size=int(opts.get("batch", 128)),
        epochs=int(opts.get("epochs", 1)),
        seed=seed,
    )
    result = train("align", dataset, lm, projector, encoder, config)
    ckpt.save_checkpoint(out_path, encoder, projector, lm, stage="align", seed=seed)
    loss_path = Path(str(out_path) + ".losses.tsv")
    loss_path.write_text("".join(line + "\n" for line in result.log_lines), encoding="utf-8")
    _write_manifest(
        out_path, "train-align", opts.resolved, [corpus_path], [out_path, loss_path],
        extra={"steps": result.steps, "final_loss": result.losses[-1]},
    )
    print(f"align stage: {result.steps} steps, final loss {result.losses[-1]:.4f} -> {out_path}")
    return 0


def _cmd_train_rank(opts: _Options) -> int:
    out_path = opts.require("out")
    seed = int(opts.get("seed", 0))
    no_align = bool(opts.get("no_align", False))
    init_path = opts.get("init")

    if init_path:
        bundle = ckpt.load_checkpoint(init_path)
        if not no_align and bundle.meta.get("stage") != "align":
            raise StageOrderError(
                f"train-rank needs an align-stage checkpoint, got stage "
                f"{bundle.meta.get('stage')!r}; run train-align first or pass --no-align"
            )
        encoder, projector, lm = bundle.encoder, bundle.projector, bundle.lm
    elif no_align:
        encoder = _build_encoder(opts)
        lm_cfg, _ = _build_lm(opts)
        lm = DecoderLm(lm_cfg, seed=seed)
        projector = Projector(
            d_enc=encoder.dim, d_lm=lm_cfg.d_lm,
            activation=str(opts.get("activation", "gelu")), seed=seed,
        )
    else:
        raise StageOrderError(
            "train-rank needs --init pointing at an align-stage checkpoint, "
            "or --no-align to skip the alignment stage"
        )

    content_max = opts.get("content_max_tokens")
    inputs: list = []
    train_file = opts.get("train_file")
    if train_file:
        samples = read_rank_dataset(train_file, encoder, lm, content_max_tokens=content_max)
        inputs.append(train_file)
    else:
        corpus_path = opts.require("corpus")
        queries_path = opts.require("queries")
        n_cand = int(opts.get("candidates", 20))
        backend = str(opts.get("backend", "dense"))
        passages = read_corpus(corpus_path)
        queries = read_queries(queries_path)
        retriever = Retriever(passages, encoder)
        teacher = LexicalTeacher(passages)
        samples = []
        for query in queries:
            hits = retriever.topk(query, n_cand, backend)
            samples.append(
                build_rank_sample(
                    query,
                    [h.passage for h in hits],
                    np.stack([h.embedding for h in hits]),
                    teacher,
                    lm,
                    content_max_tokens=content_max,
                )
            )
        inputs.extend([corpus_path, queries_path])
    kept = filter_by_length(samples, lm)
    if len(kept) < len(samples):
        print(f"length filter dropped {len(samples) - len(kept)} of {len(samples)} samples")
    if not kept:
        raise DataError("no rank-training samples fit the LM context window")

    config = TrainConfig(
        stage="rank",
        lr=float(opts.get("lr", 2e-5)),
        batch_size=int(opts.get("batch", 32)),
        epochs=int(opts.get("epochs", 1)),
        alpha=float(opts.get("alpha", 0.2)),
        seed=seed,
        shuffle_augment=not bool(opts.get("no_shuffle", False)),
    )
    result = train("rank", kept, lm, projector, encoder, config)
    ckpt.save_checkpoint(
        out_path, encoder, projector, lm, stage="rank", seed=seed,
        extra_meta={"alignment_skipped": no_align},
    )
    loss_path = Path(str(out_path) + ".losses.tsv")
    loss_path.write_text("".join(line + "\n" for line in result.log_lines), encoding="utf-8")
    if init_path:
        inputs.append(init_path)
    _write_manifest(
        out_path, "train-rank", opts.resolved, inputs, [out_path, loss_path],
        extra={"steps": result.steps, "final_loss": result.losses[-1]},
    )
    print(f"rank stage: {result.steps} steps, final loss {result.losses[-1]:.4f} -> {out_path}")
    return 0


def _require_rank_checkpoint(path: str) -> ckpt.CheckpointBundle:
    bundle = ckpt.load_checkpoint(path)
    if bundle.meta.get("stage") != "rank":
        raise StageOrderError(
            f"this command needs a rank-stage checkpoint, got stage "
            f"{bundle.meta.get('stage')!r}; run train-rank first"
        )
    return bundle


def _candidates_for(run: Run, query_id: str, k: int) -> list[str]:
    if query_id not in run.results:
        raise DataError(f"query {query_id!r} missing from first-stage run")
    return [pid for pid, _ in run.results[query_id][:k]]


def _cmd_rerank(opts: _Options) -> int:
    corpus_path = opts.require("corpus")
    queries_path = opts.require("queries")
    run_path = opts.require("run")
    ckpt_path = opts.require("checkpoint")
    out_path = opts.require("out")
    k = int(opts.get("k", 100))
    w = int(opts.get("window", 20))
    s = int(opts.get("step", 10))

    bundle = _require_rank_checkpoint(ckpt_path)
    passages = {p.id: p for p in read_corpus(corpus_path)}
    queries = read_queries(queries_path)
    first_stage = read_run(run_path)
    emb_file = opts.get("embeddings")
    stored: dict[str, np.ndarray] = {}
    if emb_file:
        ids, matrix = read_embeddings(emb_file)
        stored = dict(zip(ids, matrix))

    out_run = Run(tag="embrank-rerank")
    total_stats = TokenStats()
    passes = None
    for query in queries:
        cand_ids = _candidates_for(first_stage, query.id, k)
        if stored:
            embeddings = np.stack([stored[pid] for pid in cand_ids])
        else:
            embeddings = bundle.encoder.encode_batch([passages[pid].text for pid in cand_ids])
        schedule = WindowSchedule(n=len(cand_ids), w=w, s=s)
        passes = schedule.passes
        ranking = sliding_window_rerank(
            bundle.lm, bundle.projector, query.text, embeddings, schedule,
            candidate_ids=cand_ids,
        )
        total_stats.add(ranking.stats)
        n = len(ranking.ids)
        out_run.set_ranking(query.id, [(pid, float(n - i)) for i, pid in enumerate(ranking.ids)])
    write_run(out_path, out_run)
    _write_manifest(
        out_path, "rerank", opts.resolved,
        [corpus_path, queries_path, run_path, ckpt_path], [out_path],
        extra={
            "passes": passes,
            "processed_tokens": total_stats.processed,
            "generated_tokens": total_stats.generated,
        },
    )
    print(
        f"reranked top-{k} for {len(queries)} queries "
        f"(w={w}, s={s}, passes={passes}) -> {out_path}"
    )
    return 0


def _cmd_eval(opts: _Options) -> int:
    run_path = opts.require("run")
    qrels_path = opts.require("qrels")
    k = int(opts.get("k", 10))
    run = read_run(run_path)
    qrels = read_qrels(qrels_path)
    result = ndcg_at_k(run, qrels, k=k, gain=str(opts.get("gain", "exp")))
    for qid in sorted(result.per_query):
        print(f"ndcg@{k}\t{qid}\t{result.per_query[qid]:.4f}")
    print(f"ndcg@{k}\tmean\t{result.mean:.4f}")
    if result.missing_from_qrels:
        print(f"warning: {len(result.missing_from_qrels)} queries missing from qrels, excluded",
              file=sys.stderr)
    if result.zero_ideal:
        print(f"warning: {len(result.zero_ideal)} queries have all-zero judgments", file=sys.stderr)
    compare_path = opts.get("compare")
    if compare_path:
        other = ndcg_at_k(read_run(compare_path), qrels, k=k, gain=str(opts.get("gain", "exp")))
        shared = sorted(set(result.per_query) & set(other.per_query))
        ttest = paired_ttest(
            {q: result.per_query[q] for q in shared},
            {q: other.per_query[q] for q in shared},
        )
        print(f"paired-t\tt={ttest.t:.4f}\tp={ttest.p:.4f}"
              + (f"\tflag={ttest.flag}" if ttest.flag else ""))
    out_path = opts.get("out")
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump({"k": k, "mean": result.mean, "per_query": result.per_query},
                      fh, sort_keys=True, indent=2)
            fh.write("\n")
        _write_manifest(out_path, "eval", opts.resolved, [run_path, qrels_path], [out_path])
    return 0


def _cmd_bench(opts: _Options) -> int:
    corpus_path = opts.require("corpus")
    queries_path = opts.require("queries")
    run_path = opts.require("run")
    ckpt_path = opts.require("checkpoint")
    out_path = opts.require("out")
    n = int(opts.get("n", 20))
    w = int(opts.get("window", 20))
    s = int(opts.get("step", 10))
    repeats = max(5, int(opts.get("repeats", 5)))
    max_queries = int(opts.get("max_queries", 4))

    bundle = _require_rank_checkpoint(ckpt_path)
    lm, projector, encoder = bundle.lm, bundle.projector, bundle.encoder
    passages = {p.id: p for p in read_corpus(corpus_path)}
    queries = read_queries(queries_path)[:max_queries]
    first_stage = read_run(run_path)
    schedule = WindowSchedule(n=n, w=w, s=s)

    per_repeat: list[TokenStats] = []
    for _ in range(repeats):
        stats = TokenStats()
        for query in queries:
            cand_ids = _candidates_for(first_stage, query.id, n)
            embeddings = encoder.encode_batch([passages[pid].text for pid in cand_ids])
            ranking = sliding_window_rerank(
                lm, projector, query.text, embeddings, schedule, candidate_ids=cand_ids
            )
            stats.add(measure_cost(ranking))
        per_repeat.append(stats)

    measured = TokenStats(
        processed=per_repeat[0].processed / len(queries),
        generated=per_repeat[0].generated / len(queries),
        prefill_seconds=statistics.median(r.prefill_seconds for r in per_repeat) / len(queries),
        decode_seconds=statistics.median(r.decode_seconds for r in per_repeat) / len(queries),
        passes=per_repeat[0].passes // len(queries),
    )
    l_query = statistics.mean(len(lm.tokenize(q.text)) for q in queries)
    prompt_len = statistics.mean(
        rank_prompt_length(lm, RANK_EMBEDDING_ONLY, q.text, schedule.effective_window)
        for q in queries
    )
    l_instruction = prompt_len - l_query - schedule.effective_window
    l_passage = statistics.mean(
        len(lm.tokenize(p.text)) for p in passages.values()
    )
    emb_model = CostModel("embedding", l_instruction, l_query, l_passage)
    text_model = CostModel("text", l_instruction, l_query, l_passage, m=float(opts.get("m", 4.5)))
    predicted_emb = predict_cost(emb_model, n, schedule)
    predicted_text = predict_cost(text_model, n, schedule)

    def _row(system: str, st: TokenStats) -> dict:
        return {
            "system": system, "n": n, "w": w, "s": s,
            "processed": round(st.processed, 1), "generated": round(st.generated, 1),
            "prefill_s": round(st.prefill_seconds, 6), "decode_s": round(st.decode_seconds, 6),
        }

    rows = [
        _row("embedding-measured", measured),
        _row("embedding-predicted", predicted_emb),
        _row("text-predicted", predicted_text),
    ]
    write_efficiency_report(out_path, rows)
    _write_manifest(
        out_path, "bench", opts.resolved,
        [corpus_path, queries_path, run_path, ckpt_path], [out_path],
        extra={"repeats": repeats, "queries_used": len(queries)},
    )
    for row in rows:
        print("\t".join(str(row[c]) for c in
                        ("system", "n", "w", "s", "processed", "generated")))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags win")
    p.add_argument("--seed", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="embrank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write the bundled synthetic corpus")
    _add_common(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--passages", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--passage-len", dest="passage_len", type=int)
    p.add_argument("--noise-words", dest="noise_words", type=int)
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("index", help="build BM25 + dense index artifacts")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--dim", type=int)
    p.add_argument("--vocab-hash", dest="vocab_hash", type=int)
    p.add_argument("--pooling")
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("retrieve", help="first-stage retrieval to a run file")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--index-dir", dest="index_dir")
    p.add_argument("--backend", choices=["bm25", "dense"])
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("train-align", help="alignment stage: train the projector")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-target-tokens", dest="max_target_tokens", type=int)
    for flag, dest in (("--dim", "dim"), ("--vocab-hash", "vocab_hash"),
                       ("--vocab-size", "vocab_size"), ("--d-lm", "d_lm"),
                       ("--n-layers", "n_layers"), ("--n-heads", "n_heads"),
                       ("--max-seq", "max_seq"), ("--encoder-seed", "encoder_seed")):
        p.add_argument(flag, dest=dest, type=int)
    p.add_argument("--pooling")
    p.add_argument("--activation")
    p.set_defaults(func=_cmd_train_align)

    p = sub.add_parser("train-rank", help="learning-to-rank stage")
    _add_common(p)
    p.add_argument("--init", help="align-stage checkpoint")
    p.add_argument("--no-align", dest="no_align", action="store_true", default=None)
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--train-file", dest="train_file")
    p.add_argument("--candidates", type=int)
    p.add_argument("--backend", choices=["bm25", "dense"])
    p.add_argument("--out")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--no-shuffle", dest="no_shuffle", action="store_true", default=None)
    p.add_argument("--content-max-tokens", dest="content_max_tokens", type=int)
    for flag, dest in (("--dim", "dim"), ("--vocab-hash", "vocab_hash"),
                       ("--vocab-size", "vocab_size"), ("--d-lm", "d_lm"),
                       ("--n-layers", "n_layers"), ("--n-heads", "n_heads"),
                       ("--max-seq", "max_seq"), ("--encoder-seed", "encoder_seed")):
        p.add_argument(flag, dest=dest, type=int)
    p.add_argument("--pooling")
    p.add_argument("--activation")
    p.set_defaults(func=_cmd_train_rank)

    p = sub.add_parser("rerank", help="rerank a first-stage run with a trained checkpoint")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--embeddings", help="reuse stored embeddings instead of re-encoding")
    p.add_argument("--k", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--step", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_rerank)

    p = sub.add_parser("eval", help="NDCG@k of a run against qrels")
    _add_common(p)
    p.add_argument("--run")
    p.add_argument("--qrels")
    p.add_argument("--k", type=int)
    p.add_argument("--gain", choices=["exp", "linear"])
    p.add_argument("--compare", help="second run for a paired two-sided t-test")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="token/latency accounting report")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--step", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--max-queries", dest="max_queries", type=int)
    p.add_argument("--m", type=float)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(_Options(args))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except EmbrankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
