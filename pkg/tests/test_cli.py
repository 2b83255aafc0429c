"""End-to-end exercises of the command-line surface on a miniature corpus."""

import json
from pathlib import Path

import pytest

from embrank.cli import main
from embrank.evaluation import read_run

TINY_MODEL_FLAGS = [
    "--dim", "24", "--vocab-hash", "512", "--vocab-size", "256",
    "--d-lm", "24", "--n-layers", "1", "--n-heads", "2", "--max-seq", "320",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-synthetic + index + retrieve once; downstream tests reuse it."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    assert main(["gen-synthetic", "--out-dir", str(data), "--passages", "30",
                 "--queries", "6", "--seed", "3"]) == 0
    idx = root / "idx"
    assert main(["index", "--corpus", str(data / "corpus.jsonl"),
                 "--out-dir", str(idx), "--dim", "24", "--vocab-hash", "512"]) == 0
    run = root / "dense.run"
    assert main(["retrieve", "--corpus", str(data / "corpus.jsonl"),
                 "--queries", str(data / "queries.jsonl"), "--index-dir", str(idx),
                 "--backend", "dense", "--k", "8", "--out", str(run)]) == 0
    return root


def test_index_empty_corpus_is_error(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["index", "--corpus", str(empty), "--out-dir", str(tmp_path / "idx")]) == 2
    assert "empty corpus" in capsys.readouterr().err


def test_index_three_doc_corpus_embedding_count(tmp_path):
    corpus = tmp_path / "three.jsonl"
    corpus.write_text(
        '{"id": "a", "text": "alpha beta"}\n'
        '{"id": "b", "text": "gamma delta"}\n'
        '{"id": "c", "text": "epsilon zeta"}\n'
    )
    assert main(["index", "--corpus", str(corpus), "--out-dir", str(tmp_path / "idx"),
                 "--dim", "16"]) == 0
    header = json.loads((tmp_path / "idx" / "embeddings.jsonl").read_text().splitlines()[0])
    assert header["count"] == 3


def test_gen_synthetic_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["gen-synthetic", "--out-dir", str(tmp_path / sub),
                     "--passages", "20", "--queries", "4", "--seed", "9"]) == 0
    for name in ("corpus.jsonl", "queries.jsonl", "qrels.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_index_rebuild_is_byte_identical(workspace, tmp_path):
    corpus = workspace / "data" / "corpus.jsonl"
    for sub in ("i1", "i2"):
        assert main(["index", "--corpus", str(corpus), "--out-dir", str(tmp_path / sub),
                     "--dim", "24", "--vocab-hash", "512"]) == 0
    for name in ("bm25.json", "embeddings.jsonl", "encoder.json"):
        assert (tmp_path / "i1" / name).read_bytes() == (tmp_path / "i2" / name).read_bytes()


def test_retrieve_writes_contiguous_ranks(workspace):
    run = read_run(workspace / "dense.run")
    assert len(run.query_ids) == 6
    for qid in run.query_ids:
        assert len(run.results[qid]) == 8


def test_manifest_written_with_hashes(workspace):
    manifest = json.loads((workspace / "dense.run.manifest.json").read_text())
    assert manifest["command"] == "retrieve"
    assert all(len(h) == 64 for h in manifest["inputs"].values())
    assert str(workspace / "dense.run") in manifest["outputs"]


@pytest.fixture(scope="module")
def trained(workspace):
    data = workspace / "data"
    align = workspace / "align.ckpt"
    rank = workspace / "rank.ckpt"
    assert main(["train-align", "--corpus", str(data / "corpus.jsonl"),
                 "--out", str(align), "--epochs", "1", "--lr", "1e-3",
                 "--batch", "8", "--seed", "1", *TINY_MODEL_FLAGS]) == 0
    assert main(["train-rank", "--init", str(align),
                 "--corpus", str(data / "corpus.jsonl"),
                 "--queries", str(data / "queries.jsonl"),
                 "--candidates", "5", "--epochs", "1", "--lr", "1e-3",
                 "--batch", "4", "--seed", "1", "--out", str(rank)]) == 0
    return workspace


def test_stage_order_violation_names_missing_stage(workspace, tmp_path, capsys):
    code = main(["train-rank", "--corpus", str(workspace / "data" / "corpus.jsonl"),
                 "--queries", str(workspace / "data" / "queries.jsonl"),
                 "--out", str(tmp_path / "x.ckpt")])
    assert code == 2
    err = capsys.readouterr().err
    assert "align" in err and "--no-align" in err


def test_rerank_requires_rank_stage(trained, tmp_path, capsys):
    code = main(["rerank", "--corpus", str(trained / "data" / "corpus.jsonl"),
                 "--queries", str(trained / "data" / "queries.jsonl"),
                 "--run", str(trained / "dense.run"),
                 "--checkpoint", str(trained / "align.ckpt"),
                 "--k", "5", "--out", str(tmp_path / "r.run")])
    assert code == 2
    assert "train-rank" in capsys.readouterr().err


def test_rerank_single_window_records_one_pass(trained):
    out = trained / "rerank.run"
    assert main(["rerank", "--corpus", str(trained / "data" / "corpus.jsonl"),
                 "--queries", str(trained / "data" / "queries.jsonl"),
                 "--run", str(trained / "dense.run"),
                 "--checkpoint", str(trained / "rank.ckpt"),
                 "--k", "5", "--window", "10", "--step", "5",
                 "--out", str(out)]) == 0
    manifest = json.loads((Path(str(out) + ".manifest.json")).read_text())
    assert manifest["passes"] == 1
    rerank_run = read_run(out)
    dense_run = read_run(trained / "dense.run")
    for qid in dense_run.query_ids:
        assert sorted(pid for pid, _ in rerank_run.results[qid]) == sorted(
            pid for pid, _ in dense_run.results[qid][:5]
        )


def test_rerank_with_stored_embeddings_matches_on_the_fly(trained, tmp_path):
    args = ["rerank", "--corpus", str(trained / "data" / "corpus.jsonl"),
            "--queries", str(trained / "data" / "queries.jsonl"),
            "--run", str(trained / "dense.run"),
            "--checkpoint", str(trained / "rank.ckpt"),
            "--k", "5", "--window", "10", "--step", "5"]
    a = tmp_path / "fly.run"
    b = tmp_path / "stored.run"
    assert main([*args, "--out", str(a)]) == 0
    assert main([*args, "--embeddings", str(trained / "idx" / "embeddings.jsonl"),
                 "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_rank_from_dataset_file(workspace, tmp_path):
    """The rank-training dataset file is a first-class input surface."""
    from embrank.lm import DecoderLm, LmConfig
    from embrank.retrieval import HashEncoder, Retriever, read_corpus, read_queries
    from embrank.training import LexicalTeacher, build_rank_sample, write_rank_dataset
    import numpy as np

    passages = read_corpus(workspace / "data" / "corpus.jsonl")
    queries = read_queries(workspace / "data" / "queries.jsonl")[:3]
    encoder = HashEncoder(dim=24, vocab_hash_size=512, seed=0)
    retriever = Retriever(passages, encoder)
    teacher = LexicalTeacher(passages)
    lm = DecoderLm(LmConfig(vocab_size=256, d_lm=24, n_layers=1, n_heads=2, max_seq=320), seed=0)
    samples = []
    for q in queries:
        hits = retriever.topk(q, 4, "dense")
        samples.append(build_rank_sample(
            q, [h.passage for h in hits],
            np.stack([h.embedding for h in hits]), teacher, lm,
        ))
    train_file = tmp_path / "rank_train.jsonl"
    write_rank_dataset(train_file, samples)

    out = tmp_path / "fromfile.ckpt"
    assert main(["train-rank", "--no-align", "--train-file", str(train_file),
                 "--epochs", "1", "--lr", "1e-3", "--batch", "2", "--seed", "4",
                 "--out", str(out), *TINY_MODEL_FLAGS]) == 0
    manifest = json.loads((tmp_path / "fromfile.ckpt.manifest.json").read_text())
    assert str(train_file) in manifest["inputs"]


def test_alpha_zero_zeroes_kl_column(trained, tmp_path):
    out = tmp_path / "a0.ckpt"
    assert main(["train-rank", "--init", str(trained / "align.ckpt"),
                 "--corpus", str(trained / "data" / "corpus.jsonl"),
                 "--queries", str(trained / "data" / "queries.jsonl"),
                 "--candidates", "4", "--epochs", "1", "--lr", "1e-3",
                 "--batch", "4", "--seed", "2", "--alpha", "0",
                 "--out", str(out)]) == 0
    for line in Path(str(out) + ".losses.tsv").read_text().splitlines():
        assert float(line.split("\t")[5]) == 0.0


def test_eval_reports_mean(trained, capsys):
    assert main(["eval", "--run", str(trained / "dense.run"),
                 "--qrels", str(trained / "data" / "qrels.txt"), "--k", "10"]) == 0
    out = capsys.readouterr().out
    assert "mean" in out


def test_eval_compare_runs_ttest(trained, capsys):
    assert main(["eval", "--run", str(trained / "rerank.run"),
                 "--qrels", str(trained / "data" / "qrels.txt"), "--k", "10",
                 "--compare", str(trained / "dense.run")]) == 0
    assert "paired-t" in capsys.readouterr().out


def test_bench_writes_report(trained, tmp_path):
    out = tmp_path / "bench.tsv"
    assert main(["bench", "--corpus", str(trained / "data" / "corpus.jsonl"),
                 "--queries", str(trained / "data" / "queries.jsonl"),
                 "--run", str(trained / "dense.run"),
                 "--checkpoint", str(trained / "rank.ckpt"),
                 "--n", "5", "--window", "5", "--step", "2",
                 "--repeats", "5", "--max-queries", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].split("\t") == ["system", "n", "w", "s", "processed",
                                    "generated", "prefill_s", "decode_s"]
    measured = lines[1].split("\t")
    predicted = lines[2].split("\t")
    assert measured[0] == "embedding-measured" and predicted[0] == "embedding-predicted"
    assert float(measured[5]) == float(predicted[5])  # generated counts agree exactly


def test_usage_error_exit_code_one(capsys):
    assert main(["retrieve"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_command_exit_code_one():
    assert main(["frobnicate"]) == 1


def test_missing_file_exit_code_two(tmp_path, capsys):
    assert main(["eval", "--run", str(tmp_path / "nope.run"),
                 "--qrels", str(tmp_path / "nope.txt")]) == 2


def test_config_file_supplies_defaults_and_flags_win(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"passages": 12, "queries": 3, "seed": 5}))
    out1 = tmp_path / "from_cfg"
    assert main(["gen-synthetic", "--config", str(cfg), "--out-dir", str(out1)]) == 0
    assert sum(1 for _ in open(out1 / "corpus.jsonl")) == 12
    out2 = tmp_path / "flag_wins"
    assert main(["gen-synthetic", "--config", str(cfg), "--out-dir", str(out2),
                 "--passages", "15"]) == 0
    assert sum(1 for _ in open(out2 / "corpus.jsonl")) == 15
