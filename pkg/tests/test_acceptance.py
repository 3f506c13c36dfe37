"""Acceptance suite: ten numbered criteria, one test (one pass/fail line) each.

Every tolerance and runtime budget is asserted inside its test. The training
fixtures are module-scoped because two criteria share the same 500-step run.
"""

import time

import numpy as np
import pytest

from sstag.autograd import backward, record_ops
from sstag.evalprobe import (
    accuracy,
    embed_nodes,
    mean_row_cosine,
    rmse,
    roc_auc,
    run_probe_seeds,
    summarize,
    teacher_embed,
)
from sstag.graph import (
    EdgeRecord,
    NodeRecord,
    SyntheticSpec,
    build_graph,
    default_word_pools,
    make_synthetic_tag,
)
from sstag.models import MemoryBank, ModelBundle, ModelConfig
from sstag.ppr import WalkMatrix, exact_ppr, push_ppr
from sstag.sampler import sample_node_subgraph, weighted_draw_without_replacement
from sstag.text import Vocabulary, build_vocab
from sstag.training import TrainSettings, Trainer, me_loss, st_loss
from sstag.util import rng_stream

from fdcheck import finite_diff_grads, max_rel_error


# -- shared 200-node training fixture (criteria 6 and 7) --------------------------


FIXTURE_SPEC = SyntheticSpec(
    n_nodes=200,
    n_clusters=2,
    p_intra=(0.20, 0.10),
    p_inter=0.005,
    word_pools=default_word_pools(2, 12, 12),
    words_per_node=3,
)


def _train(g, vocab, steps, **flags):
    mc = ModelConfig(vocab_size=vocab.size, dropout=0.05)
    ts = TrainSettings(seed=0, steps=steps, batch_size=32, lr=1e-3,
                       hop_budgets=(10, 20), epsilon=1e-4, **flags)
    trainer = Trainer.fresh(g, vocab, mc, ts)
    trainer.run(steps)
    return trainer


@pytest.fixture(scope="module")
def dynamics():
    g = make_synthetic_tag(FIXTURE_SPEC, seed=0)
    vocab = build_vocab(g.node_texts)
    t0 = time.perf_counter()
    trainer = _train(g, vocab, 500)
    train_seconds = time.perf_counter() - t0
    emb = embed_nodes(trainer.bundle, g, vocab, alpha=trainer.s.alpha)
    return {
        "g": g,
        "vocab": vocab,
        "trainer": trainer,
        "train_seconds": train_seconds,
        "emb": emb,
    }


@pytest.fixture(scope="module")
def dynamics_ablated(dynamics):
    g, vocab = dynamics["g"], dynamics["vocab"]
    trainer = _train(g, vocab, 500, no_gnn=True, no_ppr=True)
    emb = embed_nodes(trainer.bundle, g, vocab, alpha=trainer.s.alpha, use_ppr=False)
    return {"trainer": trainer, "emb": emb}


# -- criterion 1 --------------------------------------------------------------------


def test_c01_push_ppr_matches_exact_resolvent():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    for trial in range(50):
        n = int(rng.integers(2, 201))
        p = min(1.0, 4.0 / n)
        nodes = [NodeRecord(i, "w") for i in range(n)]
        edges = [
            EdgeRecord(i, j)
            for i in range(n)
            for j in range(i + 1, n)
            if rng.random() < p
        ]
        walk = WalkMatrix.from_graph(build_graph(nodes, edges))
        seed_node = int(rng.integers(n))
        alpha = float(rng.uniform(0.05, 0.95))

        exact = exact_ppr(walk, seed_node, alpha)
        push = push_ppr(walk, seed_node, alpha, 1e-9)
        dense_exact = np.zeros(n)
        dense_exact[exact.ids] = exact.scores
        dense_push = np.zeros(n)
        dense_push[push.ids] = push.scores
        linf = float(np.abs(dense_exact - dense_push).max())
        assert linf < 1e-6, f"trial {trial}: L-inf {linf:.3e}"

        unit = push_ppr(walk, seed_node, 1.0, 1e-9)
        assert unit.ids.tolist() == [seed_node]
        assert unit.scores.tolist() == [1.0]
    assert time.perf_counter() - t0 < 10.0


# -- criterion 2 --------------------------------------------------------------------


def test_c02_first_draw_frequencies_follow_ppr_law():
    t0 = time.perf_counter()
    n_leaves, trials = 8, 10_000

    nodes = [NodeRecord(i, "w") for i in range(n_leaves + 1)]
    g = build_graph(nodes, [EdgeRecord(0, i) for i in range(1, n_leaves + 1)])
    pi = push_ppr(WalkMatrix.from_graph(g), 0, 0.15, 1e-12)
    leaf_scores = pi.score_of(np.arange(1, n_leaves + 1))
    law = leaf_scores / leaf_scores.sum()

    counts = np.zeros(n_leaves + 1)
    for trial in range(trials):
        sub = sample_node_subgraph(g, 0, pi, (1,), rng_stream(21, "c2", trial))
        drawn = [m for m in sub.local_to_global.tolist() if m != 0]
        assert len(drawn) == 1
        counts[drawn[0]] += 1
    freq = counts[1:] / trials
    assert np.abs(freq - law).max() < 0.02

    # skewed known scores drive the same first-draw law through the raw draw
    cand = np.array([1, 2, 3, 4])
    weights = np.array([0.4, 0.3, 0.2, 0.1])
    skew_counts = {c: 0 for c in cand.tolist()}
    for trial in range(trials):
        first = weighted_draw_without_replacement(cand, weights, 2, rng_stream(22, "c2", trial))[0]
        skew_counts[int(first)] += 1
    for c, w in zip(cand.tolist(), weights):
        assert abs(skew_counts[c] / trials - w) < 0.02
    assert time.perf_counter() - t0 < 5.0


# -- criterion 3 --------------------------------------------------------------------


def test_c03_full_loss_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    words = [f"w{i:02d}" for i in range(11)]
    vocab = Vocabulary(words)
    assert vocab.size == 16
    texts = [
        "w00 w01 w02",
        "w03 w04",
        "w05 w06 w07 w08",
        "w09 w10 w00",
        "w02 w04 w06",
    ]
    nodes = [NodeRecord(i, texts[i]) for i in range(5)]
    edges = [EdgeRecord(0, 1), EdgeRecord(1, 2), EdgeRecord(2, 3),
             EdgeRecord(3, 4), EdgeRecord(4, 0), EdgeRecord(1, 3)]
    g = build_graph(nodes, edges)

    mc = ModelConfig(vocab_size=16, d=8, n_blocks=1, n_heads=2, max_len=12,
                     ffn_mult=2, gcn_layers=2, mlp_layers=2, d_p=4,
                     n_anchors=4, dropout=0.0)
    # the distillation term must stay differentiable through both operands
    # for the loss to agree with finite differences on every parameter
    ts = TrainSettings(seed=0, steps=1, batch_size=5, lr=1e-3,
                       hop_budgets=(2, 2), epsilon=1e-8, st_stop_gradient=False)
    trainer = Trainer.fresh(g, vocab, mc, ts)
    batch = trainer.collate(trainer.sample_step_subgraphs(1), 1)

    params = trainer.bundle.named_parameters()
    tensors = list(params.values())
    n_params = int(sum(t.data.size for t in tensors))

    def build():
        total, _ = trainer.compute_losses(batch, 1, training=False)
        return total

    for t in tensors:
        t.zero_grad()
    backward(build())
    analytic = [t.grad for t in tensors]
    numeric = finite_diff_grads(lambda: build().data, tensors)
    worst = max_rel_error(analytic, numeric)
    assert worst < 1e-4, f"worst of {n_params} parameter gradients: rel err {worst:.3e}"
    assert time.perf_counter() - t0 < 60.0


# -- criterion 4 --------------------------------------------------------------------


def _tiny_trainer(**flags):
    spec = SyntheticSpec(n_nodes=24, n_clusters=2, p_intra=0.3, p_inter=0.05,
                         word_pools=default_word_pools(2, 4, 4), words_per_node=3)
    g = make_synthetic_tag(spec, seed=1)
    vocab = build_vocab(g.node_texts)
    mc = ModelConfig(vocab_size=vocab.size, d=16, n_blocks=1, n_heads=2,
                     max_len=12, ffn_mult=2, gcn_layers=2, mlp_layers=2,
                     d_p=4, n_anchors=8, dropout=0.0)
    ts = TrainSettings(seed=3, steps=4, batch_size=6, lr=1e-3,
                       hop_budgets=(3, 4), epsilon=1e-6, **flags)
    return Trainer.fresh(g, vocab, mc, ts)


def test_c04_loss_identities_and_ablation_flags():
    from sstag.autograd import Tensor
    from sstag.training import mask_loss

    # uniform logits leave every masked target at probability 1/V
    v, rows = 8, 3
    logits = Tensor(np.zeros((rows, 5, v)))
    targets = -np.ones((rows, 5), np.int64)
    targets[:, 2] = np.arange(rows) % v
    assert abs(float(mask_loss(logits, targets).data) - np.log(v)) < 1e-9

    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((6, 9)))
    assert abs(float(st_loss(x, Tensor(x.data.copy()), True).data)) < 1e-12
    assert abs(float(st_loss(x, Tensor(-x.data.copy()), True).data) - 2.0) < 1e-12
    assert float(me_loss(Tensor(x.data.copy()), x).data) == 0.0

    # exact additivity of the enabled terms
    trainer = _tiny_trainer()
    batch = trainer.collate(trainer.sample_step_subgraphs(1), 1)
    _, full = trainer.compute_losses(batch, 1, training=False)
    assert full.total == full.l_mask + full.l_st + full.l_me
    assert full.l_mask > 0 and full.l_st > 0 and full.l_me > 0

    # each ablation flag zeroes exactly its own term
    for flag, field in (("no_mask_loss", "l_mask"), ("no_st_loss", "l_st"),
                        ("no_me_loss", "l_me")):
        t = _tiny_trainer(**{flag: True})
        b = t.collate(t.sample_step_subgraphs(1), 1)
        _, br = t.compute_losses(b, 1, training=False)
        values = {"l_mask": br.l_mask, "l_st": br.l_st, "l_me": br.l_me}
        assert values.pop(field) == 0.0
        assert all(v > 0 for v in values.values()), flag
        assert br.total == br.l_mask + br.l_st + br.l_me


# -- criterion 5 --------------------------------------------------------------------


def test_c05_memory_bank_convexity_on_random_instances():
    rng = np.random.default_rng(77)
    for trial in range(1000):
        n_anchors = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        sim = "dot" if trial % 2 == 0 else "cosine"
        cfg = ModelConfig(vocab_size=8, d=d, n_anchors=n_anchors,
                          memory_similarity=sim, memory_tau=float(rng.uniform(0.3, 3.0)))
        bank = MemoryBank(rng_stream(trial, "c5-init"), cfg)
        from sstag.autograd import Tensor

        h = Tensor(rng.standard_normal((int(rng.integers(1, 7)), d)) * 3.0)
        weights, recon = bank.reconstruct(bank.activate(h))
        w = weights.data
        assert np.all(w >= 0.0)
        assert np.abs(w.sum(axis=1) - 1.0).max() <= 1e-12
        lo = bank.anchors.data.min(axis=0) - 1e-12
        hi = bank.anchors.data.max(axis=0) + 1e-12
        assert np.all(recon.data >= lo) and np.all(recon.data <= hi)


# -- criterion 6 --------------------------------------------------------------------


def test_c06_training_dynamics_mask_loss_and_alignment(dynamics):
    g, vocab, trainer = dynamics["g"], dynamics["vocab"], dynamics["trainer"]
    assert dynamics["train_seconds"] < 300.0

    final_l_mask = float(trainer.rows[-1].split(",")[1])
    assert final_l_mask < 0.5 * np.log(vocab.size), (
        f"l_mask {final_l_mask:.4f} vs bound {0.5 * np.log(vocab.size):.4f}"
    )

    held_out = g.original_ids[g.split.test]
    teacher = teacher_embed(trainer.bundle, g, vocab)
    cos = mean_row_cosine(teacher.rows_of(held_out), dynamics["emb"].rows_of(held_out))
    assert cos > 0.9, f"held-out teacher-student cosine {cos:.4f}"


# -- criterion 7 --------------------------------------------------------------------


def test_c07_linear_probe_beats_bar_and_ablation(dynamics, dynamics_ablated):
    g = dynamics["g"]
    labels = g.node_labels
    tr, te = g.split.train, g.split.test

    def probe_mean(emb):
        feats = emb.rows_of(g.original_ids)
        reports = run_probe_seeds(feats[tr], labels[tr], feats[te], labels[te],
                                  "node", "accuracy", seeds=range(5))
        return summarize(reports)[0]

    full = probe_mean(dynamics["emb"])
    ablated = probe_mean(dynamics_ablated["emb"])
    assert full >= 0.90, f"full-model probe accuracy {full:.4f}"
    assert ablated < full, f"ablation {ablated:.4f} not strictly below full {full:.4f}"


# -- criterion 8 --------------------------------------------------------------------


def test_c08_inference_purity_and_embedding_throughput():
    spec = SyntheticSpec(n_nodes=10_000, n_clusters=2, p_intra=0.0016,
                         p_inter=0.0004, word_pools=default_word_pools(2, 12, 12),
                         words_per_node=4)
    g = make_synthetic_tag(spec, seed=1)
    vocab = build_vocab(g.node_texts)
    bundle = ModelBundle.build(ModelConfig(vocab_size=vocab.size, d=64),
                               rng_stream(0, "init"))

    trace: list[str] = []
    with record_ops(trace):
        small = embed_nodes(bundle, g, vocab, nodes=np.arange(32))
    assert "csr_matmul" not in trace
    assert small.matrix.shape == (32, 64)

    # the tracer does see the op on the graph-touching teacher path
    teacher_trace: list[str] = []
    with record_ops(teacher_trace):
        teacher_embed(bundle, g, vocab, nodes=np.arange(8))
    assert "csr_matmul" in teacher_trace

    t0 = time.perf_counter()
    emb = embed_nodes(bundle, g, vocab)
    took = time.perf_counter() - t0
    assert emb.matrix.shape == (10_000, 64)
    assert took < 30.0, f"10k-node embedding took {took:.1f} s"


# -- criterion 9 --------------------------------------------------------------------


def test_c09_bitwise_determinism_and_resume(tmp_path):
    def fresh():
        return _tiny_trainer()

    a = fresh()
    a.run(6)
    b = fresh()
    b.run(6)
    assert a.rows == b.rows  # loss CSV rows are formatted floats: bitwise

    c = fresh()
    c.run(3)
    c.save(tmp_path / "mid.sstc")
    d = Trainer.load(tmp_path / "mid.sstc", c.g, c.vocab)
    d.run(6)
    assert c.rows + d.rows == a.rows
    for name, p in d.bundle.named_parameters().items():
        assert np.array_equal(p.data, a.bundle.named_parameters()[name].data), name


# -- criterion 10 -------------------------------------------------------------------


def _brute_force_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for s in pos:
        for t in neg:
            if s > t:
                wins += 1.0
            elif s == t:
                wins += 0.5
    return wins / (pos.size * neg.size)


def test_c10_metrics_match_naive_oracles():
    rng = np.random.default_rng(6)
    for trial in range(1000):
        n = int(rng.integers(3, 60))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        if trial % 2 == 0:
            scores = rng.integers(0, 6, n) / 5.0  # heavy ties
        else:
            scores = rng.standard_normal(n)
        assert roc_auc(scores, labels) == _brute_force_auc(scores, labels)

    preds = rng.integers(0, 4, 500)
    labels = rng.integers(0, 4, 500)
    naive_acc = sum(1 for p, l in zip(preds, labels) if p == l) / 500
    assert accuracy(preds, labels) == naive_acc

    a = rng.standard_normal(500)
    b = rng.standard_normal(500)
    naive_rmse = (sum((x - y) ** 2 for x, y in zip(a, b)) / 500) ** 0.5
    assert abs(rmse(a, b) - naive_rmse) < 1e-12
