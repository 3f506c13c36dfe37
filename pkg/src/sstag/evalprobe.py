"""Frozen-embedding evaluation: student-only inference, linear probes, metrics.

Inference never touches graph convolutions: nodes are embedded from raw
(unmasked) text through the LM [CLS] state plus the node's own PPR profile,
through the student MLP. The op trace is checked so a structural regression
(a sparse op sneaking into this path) fails loudly rather than silently
changing the deployment story.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    Tensor,
    add,
    backward,
    cross_entropy_from_logits,
    matmul,
    mse,
    no_grad,
    record_ops,
)
from .graph import TextAttributedGraph
from .models import ModelBundle, cls_states, sym_normalized_adjacency
from .ppr import WalkMatrix, ppr_features, push_ppr
from .sampler import graph_as_sample
from .text import MaskedSequence, Vocabulary, pad_batch, tokenize
from .training import AdamW
from .util import SstagError, ValidationError, rng_stream


@dataclass
class EmbeddingMatrix:
    ids: np.ndarray  # original node ids, aligned to rows
    matrix: np.ndarray  # (n, d)
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.matrix.shape[0] != self.ids.shape[0]:
            raise ValidationError("embedding rows misaligned with ids")
        if not np.isfinite(self.matrix).all():
            raise ValidationError("embedding matrix contains non-finite entries")

    def row_of(self, node_id: int) -> np.ndarray:
        hits = np.nonzero(self.ids == node_id)[0]
        if hits.size == 0:
            raise ValidationError(f"node id {node_id} not embedded")
        return self.matrix[hits[0]]

    def rows_of(self, node_ids: np.ndarray) -> np.ndarray:
        """Bulk lookup by original node id."""
        node_ids = np.asarray(node_ids, np.int64)
        order = np.argsort(self.ids, kind="stable")
        pos = np.searchsorted(self.ids[order], node_ids)
        bad = (pos >= self.ids.shape[0]) | (self.ids[order][np.minimum(pos, self.ids.shape[0] - 1)] != node_ids)
        if bad.any():
            raise ValidationError(f"node id {int(node_ids[bad][0])} not embedded")
        return self.matrix[order[pos]]


def _raw_batch(g: TextAttributedGraph, vocab: Vocabulary, nodes: np.ndarray, max_len: int):
    """Unmasked padded id matrix for the given nodes."""
    seqs = []
    for gid in nodes:
        tok = tokenize(vocab, g.node_texts[int(gid)], max_len)
        n = tok.ids.shape[0]
        seqs.append(
            MaskedSequence(
                ids=tok.ids.copy(),
                indicator=np.zeros(n, np.int64),
                targets=-np.ones(n, np.int64),
            )
        )
    return pad_batch(seqs).ids


def embed_nodes(
    bundle: ModelBundle,
    g: TextAttributedGraph,
    vocab: Vocabulary,
    nodes=None,
    alpha: float = 0.15,
    feature_eps: float = 1e-3,
    chunk: int = 256,
    provenance: dict | None = None,
    use_ppr: bool = True,
) -> EmbeddingMatrix:
    """Student embeddings for the requested nodes (default: every node).

    The trace of every chunk's forward is asserted free of sparse-adjacency
    ops. PPR profiles are computed per node over the node's own support,
    which needs graph *edges* for the walk but no differentiable graph op.
    """
    if nodes is None:
        nodes = np.arange(g.n_nodes, dtype=np.int64)
    nodes = np.asarray(nodes, np.int64)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= g.n_nodes):
        raise ValidationError("unknown node id in embed request")
    cfg = bundle.cfg
    walk = WalkMatrix.from_graph(g) if use_ppr else None
    out = np.zeros((nodes.shape[0], cfg.d))
    for lo in range(0, nodes.shape[0], chunk):
        sel = nodes[lo : lo + chunk]
        ids = _raw_batch(g, vocab, sel, cfg.max_len)
        profile = np.zeros((sel.shape[0], cfg.d_p))
        if use_ppr:
            for i, gid in enumerate(sel):
                pi = push_ppr(walk, int(gid), alpha, feature_eps)
                profile[i] = ppr_features(pi, pi.ids, cfg.d_p).values
        trace: list = []
        with no_grad(), record_ops(trace):
            states = bundle.lm(ids, rng=None, training=False)
            rows = bundle.student(cls_states(states), profile, rng=None, training=False)
        if "csr_matmul" in trace:
            raise SstagError("inference path touched a sparse graph op")
        out[lo : lo + sel.shape[0]] = rows.data
    emb = EmbeddingMatrix(
        ids=g.original_ids[nodes].copy(),
        matrix=out,
        provenance=dict(provenance or {}),
    )
    emb.validate()
    return emb


def teacher_embed(
    bundle: ModelBundle,
    g: TextAttributedGraph,
    vocab: Vocabulary,
    nodes=None,
    no_gnn: bool = False,
) -> EmbeddingMatrix:
    """Graph-aware teacher states on raw text: LM [CLS] through the GCN over
    the full adjacency. Used for held-out teacher/student agreement reports.
    ``no_gnn`` mirrors the ablation that trained the checkpoint."""
    if nodes is None:
        nodes = np.arange(g.n_nodes, dtype=np.int64)
    nodes = np.asarray(nodes, np.int64)
    cfg = bundle.cfg
    sample = graph_as_sample(g)
    ids = _raw_batch(g, vocab, np.arange(g.n_nodes, dtype=np.int64), cfg.max_len)
    with no_grad():
        states = bundle.lm(ids, rng=None, training=False)
        cls = cls_states(states)
        if no_gnn:
            h = cls
        else:
            adj = sym_normalized_adjacency(sample.offsets, sample.targets)
            h = bundle.gcn(adj, cls, rng=None, training=False)
    emb = EmbeddingMatrix(ids=g.original_ids[nodes].copy(), matrix=h.data[nodes].copy())
    emb.validate()
    return emb


def mean_row_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Plain numpy row-cosine mean; zero-norm rows count as 0 agreement."""
    if a.shape != b.shape:
        raise ValidationError("cosine operands must share a shape")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.zeros(a.shape[0])
    cos[ok] = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    return float(cos.mean())


# -- metrics -------------------------------------------------------------------


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValidationError("accuracy needs equal-length non-empty inputs")
    return float(np.mean(preds == labels))


def rmse(preds, targets) -> float:
    preds = np.asarray(preds, np.float64)
    targets = np.asarray(targets, np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise ValidationError("rmse needs equal-length non-empty inputs")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties
    count one half. Computed from tie-averaged ranks, exactly equal to the
    pair-counting form."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValidationError("roc_auc needs aligned 1-d scores and labels")
    pos = labels == 1
    neg = labels == 0
    if not (pos | neg).all():
        raise ValidationError("labels must be binary 0/1")
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.zeros(scores.shape[0])
    sorted_scores = scores[order]
    i = 0
    while i < sorted_scores.shape[0]:
        j = i
        while j + 1 < sorted_scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # 1-based ranks i+1..j+1 share their mean; halves are exact in binary
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- composition ---------------------------------------------------------------


def edge_embedding(emb: EmbeddingMatrix, u: int, v: int, mode: str = "hadamard") -> np.ndarray:
    a = emb.row_of(u)
    b = emb.row_of(v)
    if mode == "concat":
        return np.concatenate([a, b])
    if mode == "hadamard":
        return a * b
    raise ValidationError(f"unknown edge embedding mode {mode!r}")


def graph_embedding(emb: EmbeddingMatrix) -> np.ndarray:
    """Mean over node rows, summed in id order so the result is bit-identical
    under any row permutation of the same embedding set."""
    if emb.matrix.shape[0] == 0:
        raise ValidationError("cannot pool an empty embedding matrix")
    order = np.argsort(emb.ids, kind="stable")
    return emb.matrix[order].mean(axis=0)


def link_dataset(g: TextAttributedGraph, seed: int, max_pairs: int | None = None):
    """Edge-existence pairs: every (or a sample of) undirected edge as a
    positive, the same number of uniform non-edges as negatives."""
    pairs = g.edge_pairs()
    if not g.directed:
        pairs = pairs[pairs[:, 0] < pairs[:, 1]]  # one row per undirected edge
    if pairs.shape[0] == 0:
        raise ValidationError("graph has no edges to probe")
    rng = rng_stream(seed, "linkneg")
    if max_pairs is not None and pairs.shape[0] > max_pairs:
        sel = rng.choice(pairs.shape[0], size=max_pairs, replace=False)
        pairs = pairs[np.sort(sel)]
    existing = set()
    all_edges = {(min(int(u), int(v)), max(int(u), int(v))) for u, v in g.edge_pairs()}
    negatives = []
    n = g.n_nodes
    while len(negatives) < pairs.shape[0]:
        u, v = int(rng.integers(n)), int(rng.integers(n))
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        if key in all_edges or key in existing:
            continue
        existing.add(key)
        negatives.append(key)
    neg = np.array(negatives, np.int64)
    out_pairs = np.concatenate([pairs, neg], axis=0)
    labels = np.concatenate([np.ones(pairs.shape[0], np.int64), np.zeros(neg.shape[0], np.int64)])
    return out_pairs, labels


# -- linear probes ---------------------------------------------------------------


@dataclass
class ProbeModel:
    weight: Tensor
    bias: Tensor
    task: str  # classification | regression
    classes: np.ndarray | None  # original label values, classification only

    def logits(self, features: np.ndarray) -> np.ndarray:
        with no_grad():
            out = add(matmul(Tensor(features), self.weight), self.bias)
        return out.data

    def predict(self, features: np.ndarray) -> np.ndarray:
        raw = self.logits(features)
        if self.task == "classification":
            return self.classes[np.argmax(raw, axis=1)]
        return raw[:, 0]

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Ranking score for binary tasks: logit margin of class 1 over class 0."""
        raw = self.logits(features)
        if self.task == "classification" and raw.shape[1] == 2:
            return raw[:, 1] - raw[:, 0]
        return raw[:, 0]


def probe_train(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int,
    task: str = "classification",
    lr: float = 1e-2,
    max_steps: int = 500,
    plateau: float = 1e-6,
) -> ProbeModel:
    """Full-batch linear fit over frozen features; the features themselves
    never enter the parameter set, so the backbone cannot drift."""
    features = np.asarray(features, np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValidationError("probe features and labels misaligned")
    if task not in ("classification", "regression"):
        raise ValidationError(f"unknown probe task {task!r}")
    rng = rng_stream(seed, "probe-init")
    d = features.shape[1]
    if task == "classification":
        classes = np.unique(labels)
        if classes.shape[0] < 2:
            raise ValidationError("classification probe needs at least two classes")
        targets = np.searchsorted(classes, labels)
        n_out = int(classes.shape[0])
    else:
        classes = None
        targets = np.asarray(labels, np.float64).reshape(-1, 1)
        n_out = 1
    w = Tensor(0.01 * rng.standard_normal((d, n_out)), requires_grad=True)
    b = Tensor(np.zeros(n_out), requires_grad=True)
    opt = AdamW({"w": w, "b": b}, lr=lr, weight_decay=0.0)
    x = Tensor(features)
    prev = None
    for _ in range(max_steps):
        opt.zero_grad()
        logits = add(matmul(x, w), b)
        if task == "classification":
            loss = cross_entropy_from_logits(logits, targets)
        else:
            loss = mse(logits, targets)
        backward(loss)
        opt.step()
        cur = float(loss.data)
        # relative plateau: an absolute test would stop mid-descent once the
        # loss itself is small, leaving realizable targets under-fit
        if prev is not None and abs(prev - cur) < plateau * max(abs(prev), 1e-12):
            break
        prev = cur
    return ProbeModel(weight=w, bias=b, task=task, classes=classes)


def probe_eval(model: ProbeModel, features: np.ndarray, labels: np.ndarray, metric: str) -> float:
    if metric == "accuracy":
        return accuracy(model.predict(features), labels)
    if metric == "rmse":
        return rmse(model.predict(features), np.asarray(labels, np.float64))
    if metric == "roc_auc":
        return roc_auc(model.scores(features), labels)
    raise ValidationError(f"unknown metric {metric!r}")


# -- reporting -------------------------------------------------------------------


METRIC_FOR_TASK = {"node": "accuracy", "edge": "roc_auc", "graph": "accuracy"}


@dataclass
class MetricReport:
    task: str
    metric: str
    value: float
    seed: int
    split_sizes: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "task": self.task,
                "metric": self.metric,
                "value": self.value,
                "seed": self.seed,
                "split_sizes": self.split_sizes,
            },
            sort_keys=True,
        )


def run_probe_seeds(
    features_train: np.ndarray,
    labels_train: np.ndarray,
    features_test: np.ndarray,
    labels_test: np.ndarray,
    task: str,
    metric: str,
    seeds=(0, 1, 2, 3, 4),
    lr: float = 1e-2,
    max_steps: int = 500,
    plateau: float = 1e-6,
) -> list[MetricReport]:
    """One probe per seed on a fixed split; callers aggregate mean/std."""
    probe_task = "regression" if metric == "rmse" else "classification"
    out = []
    for seed in seeds:
        model = probe_train(
            features_train, labels_train, seed, task=probe_task,
            lr=lr, max_steps=max_steps, plateau=plateau,
        )
        value = probe_eval(model, features_test, labels_test, metric)
        out.append(
            MetricReport(
                task=task,
                metric=metric,
                value=value,
                seed=int(seed),
                split_sizes={
                    "train": int(labels_train.shape[0]),
                    "test": int(labels_test.shape[0]),
                },
            )
        )
    return out


def summarize(reports: list[MetricReport]) -> tuple[float, float]:
    values = np.array([r.value for r in reports], np.float64)
    if values.size == 0:
        raise ValidationError("no metric reports to summarize")
    return float(values.mean()), float(values.std())
