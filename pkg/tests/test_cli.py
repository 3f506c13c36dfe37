"""End-to-end command tests: every subcommand, exit codes, determinism,
and the artifact files a run directory must carry."""

import json

import numpy as np
import pytest

from sstag.cli import main
from sstag.graph import load_binary
from sstag.ppr import WalkMatrix, push_ppr
from sstag.util import format_float, sha256_file

# small-but-alive model; keeps each pretrain well under a second
TINY = [
    "--set", "steps=6", "--set", "d=16", "--set", "n_anchors=32",
    "--set", "batch_size=8", "--set", "max_len=16", "--set", "d_p=8",
]


@pytest.fixture(scope="module")
def graph_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "g.sstg"
    assert main(["synth", "--out", str(path), "--nodes", "60", "--seed", "3"]) == 0
    return path


@pytest.fixture(scope="module")
def trained(graph_file):
    run = graph_file.parent / "run"
    assert main(["pretrain", "--graph", str(graph_file), "--out-dir", str(run),
                 *TINY, "--seed", "5"]) == 0
    return run


# -- synth / ingest ---------------------------------------------------------------


def test_synth_deterministic_bytes(tmp_path):
    a, b, c = tmp_path / "a.sstg", tmp_path / "b.sstg", tmp_path / "c.sstg"
    assert main(["synth", "--out", str(a), "--nodes", "30", "--seed", "7"]) == 0
    assert main(["synth", "--out", str(b), "--nodes", "30", "--seed", "7"]) == 0
    assert main(["synth", "--out", str(c), "--nodes", "30", "--seed", "8"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_ingest_roundtrip_and_idempotent(tmp_path):
    nodes = tmp_path / "nodes.jsonl"
    edges = tmp_path / "edges.jsonl"
    nodes.write_text(
        '{"id": 10, "text": "alpha beta", "label": 0}\n'
        '{"id": 11, "text": "beta gamma", "label": 1}\n'
        '{"id": 12, "text": "delta"}\n'
    )
    edges.write_text('{"src": 10, "dst": 11}\n{"src": 11, "dst": 12}\n')
    out1, out2 = tmp_path / "g1.sstg", tmp_path / "g2.sstg"
    assert main(["ingest", "--nodes", str(nodes), "--edges", str(edges), "--out", str(out1)]) == 0
    assert main(["ingest", "--nodes", str(nodes), "--edges", str(edges), "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    g = load_binary(out1)
    assert g.n_nodes == 3
    assert list(g.original_ids) == [10, 11, 12]
    assert g.node_texts[2] == "delta"


def test_ingest_dangling_edge_exit2_with_line(tmp_path, capsys):
    nodes = tmp_path / "n.jsonl"
    edges = tmp_path / "e.jsonl"
    nodes.write_text('{"id": 1, "text": "one"}\n')
    edges.write_text('{"src": 1, "dst": 1}\n{"src": 1, "dst": 9}\n')
    assert main(["ingest", "--nodes", str(nodes), "--edges", str(edges),
                 "--out", str(tmp_path / "x.sstg")]) == 2
    err = capsys.readouterr().err
    assert "e.jsonl:2" in err and "9" in err


def test_missing_graph_exit2(tmp_path):
    assert main(["ppr", "--graph", str(tmp_path / "nope.sstg"), "--seed-node", "0"]) == 2


# -- ppr --------------------------------------------------------------------------


def test_ppr_csv_matches_library(graph_file, tmp_path):
    out = tmp_path / "pi.csv"
    assert main(["ppr", "--graph", str(graph_file), "--seed-node", "4",
                 "--alpha", "0.2", "--epsilon", "1e-7", "--out", str(out)]) == 0
    g = load_binary(graph_file)
    pi = push_ppr(WalkMatrix.from_graph(g), 4, 0.2, 1e-7)
    order = np.argsort(-pi.scores, kind="stable")
    expected = "node,score\n" + "".join(
        f"{int(pi.ids[i])},{format_float(pi.scores[i])}\n" for i in order
    )
    assert out.read_text() == expected


def test_ppr_topk_and_exact(graph_file, tmp_path, capsys):
    out = tmp_path / "top.csv"
    assert main(["ppr", "--graph", str(graph_file), "--seed-node", "0",
                 "--exact", "--topk", "3", "--out", str(out)]) == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "node,score"
    assert len(lines) == 4
    scores = [float(l.split(",")[1]) for l in lines[1:]]
    assert scores == sorted(scores, reverse=True)


def test_ppr_teleport_only_alpha_one(graph_file, capsys):
    assert main(["ppr", "--graph", str(graph_file), "--seed-node", "5",
                 "--alpha", "1.0", "--topk", "1"]) == 0
    top = capsys.readouterr().out.strip().split("\n")[1]
    nid, score = top.split(",")
    assert int(nid) == 5
    assert float(score) == 1.0


# -- sample -----------------------------------------------------------------------


def test_sample_node_deterministic(graph_file, capsys):
    argv = ["sample", "--graph", str(graph_file), "--task", "node", "--anchor", "2"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out == first
    obj = json.loads(first)
    assert obj["anchors"] == [2]
    assert obj["task_kind"] == "node"


def test_sample_edge_requires_anchor2(graph_file, capsys):
    assert main(["sample", "--graph", str(graph_file), "--task", "edge",
                 "--anchor", "1"]) == 2
    assert "anchor2" in capsys.readouterr().err
    assert main(["sample", "--graph", str(graph_file), "--task", "edge",
                 "--anchor", "1", "--anchor2", "2"]) == 0
    obj = json.loads(capsys.readouterr().out)
    assert obj["anchors"] == [1, 2]


def test_sample_graph_task_covers_everything(graph_file, capsys):
    assert main(["sample", "--graph", str(graph_file), "--task", "graph"]) == 0
    obj = json.loads(capsys.readouterr().out)
    assert obj["task_kind"] == "graph"
    assert len(obj["local_to_global"]) == 60
    assert len(obj["feature_matrix"]) == 60


# -- pretrain ---------------------------------------------------------------------


def test_pretrain_run_directory_contents(graph_file, trained):
    for name in ("ckpt.sstc", "vocab.tsv", "loss_curve.csv", "config.resolved", "meta.json"):
        assert (trained / name).exists(), name
    assert not (trained / ".lock").exists()
    meta = json.loads((trained / "meta.json").read_text())
    assert meta["inputs"]["graph"] == sha256_file(graph_file)
    assert "vocab" in meta["inputs"]
    resolved = (trained / "config.resolved").read_text()
    assert "steps = 6" in resolved and "d = 16" in resolved
    rows = (trained / "loss_curve.csv").read_text().strip().split("\n")
    assert rows[0] == "step,l_mask,l_st,l_me,total,lr"
    assert len(rows) == 7
    assert rows[1].startswith("1,") and rows[6].startswith("6,")


def test_pretrain_seed_determinism(graph_file, trained, tmp_path):
    rerun = tmp_path / "rerun"
    assert main(["pretrain", "--graph", str(graph_file), "--out-dir", str(rerun),
                 *TINY, "--seed", "5"]) == 0
    assert (rerun / "loss_curve.csv").read_text() == (trained / "loss_curve.csv").read_text()
    assert (rerun / "ckpt.sstc").read_bytes() == (trained / "ckpt.sstc").read_bytes()

    other = tmp_path / "other"
    assert main(["pretrain", "--graph", str(graph_file), "--out-dir", str(other),
                 *TINY, "--seed", "6"]) == 0
    assert (other / "loss_curve.csv").read_text() != (trained / "loss_curve.csv").read_text()


def test_pretrain_ablation_zeroes_terms(graph_file, tmp_path):
    run = tmp_path / "ab"
    assert main(["pretrain", "--graph", str(graph_file), "--out-dir", str(run),
                 *TINY, "--set", "steps=3", "--seed", "5", "--ablate", "st"]) == 0
    rows = (run / "loss_curve.csv").read_text().strip().split("\n")[1:]
    for row in rows:
        step, l_mask, l_st, l_me, total, lr = row.split(",")
        assert float(l_st) == 0.0
        assert float(total) == float(l_mask) + float(l_me)


def test_pretrain_resume_matches_uninterrupted(graph_file, trained, tmp_path):
    part = tmp_path / "part"
    assert main(["pretrain", "--graph", str(graph_file), "--out-dir", str(part),
                 *TINY, "--seed", "5", "--until", "3"]) == 0
    rows = (part / "loss_curve.csv").read_text().strip().split("\n")
    assert len(rows) == 4  # header + 3
    # a bare resume finishes the recipe recorded in the checkpoint
    assert main(["pretrain", "--graph", str(graph_file), "--out-dir", str(part),
                 "--resume", str(part / "ckpt.sstc")]) == 0
    assert (part / "loss_curve.csv").read_text() == (trained / "loss_curve.csv").read_text()
    assert (part / "ckpt.sstc").read_bytes() == (trained / "ckpt.sstc").read_bytes()


def test_pretrain_lock_conflict_exit2(graph_file, tmp_path, capsys):
    run = tmp_path / "locked"
    run.mkdir()
    (run / ".lock").write_text("busy")
    assert main(["pretrain", "--graph", str(graph_file), "--out-dir", str(run), *TINY]) == 2
    assert "locked" in capsys.readouterr().err
    (run / ".lock").unlink()


def test_unknown_config_key_exit2(graph_file, tmp_path, capsys):
    assert main(["pretrain", "--graph", str(graph_file),
                 "--out-dir", str(tmp_path / "x"), "--set", "nonsense=1"]) == 2
    assert "nonsense" in capsys.readouterr().err


# -- embed ------------------------------------------------------------------------


def _read_emb_csv(path):
    lines = path.read_text().strip().split("\n")
    ids = []
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        ids.append(int(cells[0]))
        rows.append([float(c) for c in cells[1:]])
    return lines[0], ids, np.array(rows)


def test_embed_full_graph(graph_file, trained, tmp_path):
    out = tmp_path / "emb.csv"
    argv = ["embed", "--graph", str(graph_file), "--ckpt", str(trained / "ckpt.sstc"),
            "--vocab", str(trained / "vocab.tsv"), "--out", str(out)]
    assert main(argv) == 0
    header, ids, mat = _read_emb_csv(out)
    assert header == "id," + ",".join(f"e{i}" for i in range(16))
    assert ids == list(range(60))
    assert mat.shape == (60, 16)
    assert np.isfinite(mat).all()
    # byte-for-byte reproducible
    out2 = tmp_path / "emb2.csv"
    assert main(argv[:-1] + [str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes()


def test_embed_anchor_subset_matches_full(graph_file, trained, tmp_path):
    full = tmp_path / "full.csv"
    assert main(["embed", "--graph", str(graph_file), "--ckpt", str(trained / "ckpt.sstc"),
                 "--vocab", str(trained / "vocab.tsv"), "--out", str(full)]) == 0
    anchors = tmp_path / "anchors.txt"
    anchors.write_text("41\n3\n17\n")
    sub = tmp_path / "sub.csv"
    assert main(["embed", "--graph", str(graph_file), "--ckpt", str(trained / "ckpt.sstc"),
                 "--vocab", str(trained / "vocab.tsv"), "--out", str(sub),
                 "--anchors", str(anchors)]) == 0
    by_id = {line.split(",")[0]: line for line in full.read_text().strip().split("\n")[1:]}
    sub_lines = sub.read_text().strip().split("\n")[1:]
    assert [l.split(",")[0] for l in sub_lines] == ["41", "3", "17"]
    for line in sub_lines:
        assert line == by_id[line.split(",")[0]]


def test_embed_unknown_anchor_exit2(graph_file, trained, tmp_path, capsys):
    anchors = tmp_path / "bad.txt"
    anchors.write_text("999\n")
    assert main(["embed", "--graph", str(graph_file), "--ckpt", str(trained / "ckpt.sstc"),
                 "--vocab", str(trained / "vocab.tsv"), "--out", str(tmp_path / "x.csv"),
                 "--anchors", str(anchors)]) == 2
    assert "999" in capsys.readouterr().err


def test_embed_vocab_mismatch_exit4(trained, tmp_path, capsys):
    other_graph = tmp_path / "og.sstg"
    assert main(["synth", "--out", str(other_graph), "--nodes", "40", "--seed", "9",
                 "--pool-distinct", "20"]) == 0
    other_run = tmp_path / "orun"
    assert main(["pretrain", "--graph", str(other_graph), "--out-dir", str(other_run),
                 *TINY, "--set", "steps=1"]) == 0
    assert main(["embed", "--graph", str(other_graph), "--ckpt", str(other_run / "ckpt.sstc"),
                 "--vocab", str(trained / "vocab.tsv"), "--out", str(tmp_path / "x.csv")]) == 4
    assert "vocabulary" in capsys.readouterr().err


# -- probe ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def embeddings(graph_file, trained):
    out = graph_file.parent / "emb.csv"
    assert main(["embed", "--graph", str(graph_file), "--ckpt", str(trained / "ckpt.sstc"),
                 "--vocab", str(trained / "vocab.tsv"), "--out", str(out)]) == 0
    return out


def test_probe_node_and_rerun_identical(graph_file, embeddings, tmp_path, capsys):
    out1, out2 = tmp_path / "p1.jsonl", tmp_path / "p2.jsonl"
    argv = ["probe", "--graph", str(graph_file), "--emb", str(embeddings),
            "--task", "node", "--metric", "accuracy", "--set", "probe_seeds=2"]
    assert main(argv + ["--out", str(out1)]) == 0
    assert main(argv + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    reports = [json.loads(l) for l in out1.read_text().strip().split("\n")]
    assert len(reports) == 2
    assert {r["seed"] for r in reports} == {0, 1}
    for r in reports:
        assert r["task"] == "node" and r["metric"] == "accuracy"
        assert 0.0 <= r["value"] <= 1.0
        assert r["split_sizes"]["train"] == 36 and r["split_sizes"]["test"] == 12
    assert "node accuracy:" in capsys.readouterr().out


def test_probe_edge_roc_auc(graph_file, embeddings, tmp_path):
    out = tmp_path / "edge.jsonl"
    assert main(["probe", "--graph", str(graph_file), "--emb", str(embeddings),
                 "--task", "edge", "--metric", "roc_auc", "--set", "probe_seeds=2",
                 "--out", str(out)]) == 0
    reports = [json.loads(l) for l in out.read_text().strip().split("\n")]
    assert all(0.0 <= r["value"] <= 1.0 for r in reports)


def test_probe_metric_task_mismatch_exit2(graph_file, embeddings, tmp_path, capsys):
    assert main(["probe", "--graph", str(graph_file), "--emb", str(embeddings),
                 "--task", "node", "--metric", "roc_auc",
                 "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "does not fit" in capsys.readouterr().err


# -- eval-all ---------------------------------------------------------------------


def test_eval_all_pipeline(graph_file, tmp_path, capsys):
    run = tmp_path / "ea"
    assert main(["eval-all", "--graph", str(graph_file), "--out-dir", str(run),
                 *TINY, "--set", "steps=4", "--set", "probe_seeds=2", "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert "teacher-student mean cosine:" in out
    assert "node accuracy:" in out
    assert "edge roc_auc:" in out
    for name in ("ckpt.sstc", "embeddings.csv", "metrics.jsonl", "loss_curve.csv"):
        assert (run / name).exists(), name
    reports = [json.loads(l) for l in (run / "metrics.jsonl").read_text().strip().split("\n")]
    assert len(reports) == 4  # two tasks x two probe seeds
    assert {r["task"] for r in reports} == {"node", "edge"}


def test_eval_all_reuses_checkpoint(graph_file, trained, tmp_path, capsys):
    # out-dir must be created even when --ckpt skips the pretrain step
    run = tmp_path / "ea2"
    assert main(["eval-all", "--graph", str(graph_file), "--out-dir", str(run),
                 "--ckpt", str(trained / "ckpt.sstc"),
                 *TINY, "--set", "probe_seeds=2", "--seed", "5"]) == 0
    assert not (run / "loss_curve.csv").exists()  # no pretraining happened
    assert (run / "embeddings.csv").exists()
