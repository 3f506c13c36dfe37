"""Unified task sampling: PPR-guided context subgraphs.

Node tasks sample a per-hop budgeted neighborhood around an anchor where
hop-k candidates (nodes at exactly BFS distance k) are drawn without
replacement with probability proportional to their PPR score under the
anchor. Edge tasks take the union of the two endpoint samples. Graph tasks
wrap a whole graph as one sample. Every sample is an induced subgraph with
local ids, anchor positions, texts, and room for per-node PPR features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import TextAttributedGraph
from .ppr import PprVector, WalkMatrix, ppr_features, push_ppr
from .util import ValidationError

WEIGHT_FLOOR = 1e-12  # keeps zero-score candidates drawable


@dataclass
class ContextSubgraph:
    """Induced local subgraph around one or more anchor nodes."""

    task_kind: str  # node | edge | graph
    anchors: np.ndarray  # local indices
    local_to_global: np.ndarray
    offsets: np.ndarray
    targets: np.ndarray
    node_texts: list[str]
    feature_matrix: np.ndarray | None = field(default=None)  # (n_local, width) or None

    @property
    def n_nodes(self) -> int:
        return int(self.local_to_global.shape[0])

    def validate(self) -> None:
        n = self.n_nodes
        if self.task_kind not in ("node", "edge", "graph"):
            raise ValidationError(f"unknown task kind {self.task_kind!r}")
        if np.unique(self.local_to_global).size != n:
            raise ValidationError("local node appears more than once")
        if self.anchors.size == 0 or self.anchors.min() < 0 or self.anchors.max() >= n:
            raise ValidationError("anchor outside the subgraph")
        if len(self.node_texts) != n:
            raise ValidationError("texts misaligned with local nodes")
        if self.offsets.shape != (n + 1,) or self.offsets[-1] != self.targets.shape[0]:
            raise ValidationError("malformed local CSR")

    def to_json(self) -> str:
        payload = {
            "task_kind": self.task_kind,
            "anchors": self.anchors.tolist(),
            "local_to_global": self.local_to_global.tolist(),
            "offsets": self.offsets.tolist(),
            "targets": self.targets.tolist(),
            "node_texts": self.node_texts,
            "feature_matrix": None
            if self.feature_matrix is None
            else self.feature_matrix.tolist(),
        }
        return json.dumps(payload, sort_keys=True)


def normalized_hop_weights(pi: PprVector, candidates: np.ndarray) -> np.ndarray:
    """Per-candidate draw probabilities within one hop: scores over sum."""
    w = pi.score_of(candidates)
    w = np.maximum(w, WEIGHT_FLOOR)
    return w / w.sum()


def weighted_draw_without_replacement(
    candidates: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Exponential-race selection of k items, returned in draw order.

    Every candidate gets the key log(u)/w with one uniform u; the k largest
    keys win. The top key lands on candidate i with probability w_i/sum(w),
    so the first draw follows the normalized weights exactly, and whole
    draws are order-independent because keys attach to candidates, not to
    draw steps.
    """
    candidates = np.asarray(candidates, np.int64)
    weights = np.asarray(weights, np.float64)
    if candidates.shape != weights.shape:
        raise ValidationError("weights misaligned with candidates")
    if np.any(weights <= 0):
        raise ValidationError("draw weights must be positive")
    if k >= candidates.shape[0]:
        k = candidates.shape[0]
    if k <= 0:
        return np.empty(0, np.int64)
    order = np.argsort(candidates, kind="stable")
    cand_sorted = candidates[order]
    w_sorted = weights[order]
    keys = np.log(rng.random(cand_sorted.shape[0])) / w_sorted
    ranked = np.argsort(-keys, kind="stable")
    return cand_sorted[ranked[:k]]


def hop_frontiers(g: TextAttributedGraph, start: int, max_hops: int) -> list[np.ndarray]:
    """Sorted node sets at exactly 1..max_hops BFS steps from start."""
    dist = np.full(g.n_nodes, -1, np.int64)
    dist[start] = 0
    frontier = np.array([start], np.int64)
    out = []
    for _ in range(max_hops):
        nxt = []
        for u in frontier:
            row = g.neighbors(int(u))
            nxt.append(row[dist[row] < 0])
            dist[row[dist[row] < 0]] = dist[u] + 1
        frontier = np.unique(np.concatenate(nxt)) if nxt else np.empty(0, np.int64)
        out.append(frontier)
        if frontier.size == 0:
            out.extend(np.empty(0, np.int64) for _ in range(max_hops - len(out)))
            break
    return out


def induce_subgraph(g: TextAttributedGraph, members: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Local CSR over ``members`` (sorted globals) keeping all edges among them."""
    offsets = np.zeros(members.shape[0] + 1, np.int64)
    rows = []
    for i, u in enumerate(members):
        row = g.neighbors(int(u))
        keep = row[np.isin(row, members, assume_unique=True)]
        rows.append(np.searchsorted(members, keep))
        offsets[i + 1] = offsets[i] + keep.shape[0]
    targets = np.concatenate(rows) if rows else np.empty(0, np.int64)
    return offsets, targets.astype(np.int64)


def _gather_members(
    g: TextAttributedGraph,
    anchor: int,
    pi: PprVector,
    budgets,
    rng: np.random.Generator,
) -> np.ndarray:
    if not 0 <= anchor < g.n_nodes:
        raise ValidationError(f"anchor {anchor} out of range")
    budgets = [int(b) for b in budgets]
    if any(b < 0 for b in budgets):
        raise ValidationError("hop budgets must be non-negative")
    picked = [np.array([anchor], np.int64)]
    for cand, budget in zip(hop_frontiers(g, anchor, len(budgets)), budgets):
        if cand.size == 0 or budget == 0:
            continue
        weights = np.maximum(pi.score_of(cand), WEIGHT_FLOOR)
        picked.append(weighted_draw_without_replacement(cand, weights, budget, rng))
    return np.unique(np.concatenate(picked))


def _build_sample(g, members, anchor_globals, task_kind) -> ContextSubgraph:
    offsets, targets = induce_subgraph(g, members)
    sub = ContextSubgraph(
        task_kind=task_kind,
        anchors=np.searchsorted(members, np.asarray(anchor_globals, np.int64)),
        local_to_global=members,
        offsets=offsets,
        targets=targets,
        node_texts=[g.node_texts[int(u)] for u in members],
    )
    sub.validate()
    return sub


def sample_node_subgraph(
    g: TextAttributedGraph,
    anchor: int,
    pi: PprVector,
    budgets,
    rng: np.random.Generator,
) -> ContextSubgraph:
    """Budgeted PPR-weighted neighborhood sample around one node."""
    members = _gather_members(g, anchor, pi, budgets, rng)
    return _build_sample(g, members, [anchor], "node")


def sample_edge_subgraph(
    g: TextAttributedGraph,
    u: int,
    v: int,
    pi_u: PprVector,
    pi_v: PprVector,
    budgets,
    rng: np.random.Generator,
) -> ContextSubgraph:
    """Union of the two endpoint neighborhoods, induced, both endpoints anchored.

    Endpoint draws run on streams keyed by node id (not argument position),
    so swapping (u, v) yields the same member set under the same outer rng.
    """
    if u == v:
        raise ValidationError("edge sample needs two distinct endpoints")
    base = int(rng.integers(np.iinfo(np.int64).max))
    rng_u = np.random.default_rng(np.random.SeedSequence([base & 0xFFFFFFFF, int(u)]))
    rng_v = np.random.default_rng(np.random.SeedSequence([base & 0xFFFFFFFF, int(v)]))
    members_u = _gather_members(g, u, pi_u, budgets, rng_u)
    members_v = _gather_members(g, v, pi_v, budgets, rng_v)
    members = np.unique(np.concatenate([members_u, members_v]))
    return _build_sample(g, members, [u, v], "edge")


def graph_as_sample(g: TextAttributedGraph) -> ContextSubgraph:
    """Whole graph as one sample: identity mapping, every node an anchor."""
    if g.n_nodes == 0:
        raise ValidationError("empty graph cannot form a sample")
    members = np.arange(g.n_nodes, dtype=np.int64)
    sub = ContextSubgraph(
        task_kind="graph",
        anchors=members.copy(),
        local_to_global=members,
        offsets=g.offsets.copy(),
        targets=g.targets.copy(),
        node_texts=list(g.node_texts),
    )
    sub.validate()
    return sub


def attach_ppr_features(
    sub: ContextSubgraph,
    walk: WalkMatrix,
    alpha: float,
    epsilon: float,
    width: int,
    cache: dict | None = None,
    enabled: bool = True,
) -> None:
    """Fill the per-node feature block.

    Each member node gets the descending profile of its own PPR vector
    restricted to the sample's member set. Graph samples and disabled
    feature paths get zeros. ``cache`` maps node id -> PprVector and is
    shared across samples of the same graph.
    """
    n = sub.n_nodes
    if not enabled or sub.task_kind == "graph":
        sub.feature_matrix = np.zeros((n, width))
        return
    rows = np.zeros((n, width))
    for i, gid in enumerate(sub.local_to_global):
        gid = int(gid)
        pi = None if cache is None else cache.get(gid)
        if pi is None:
            pi = push_ppr(walk, gid, alpha, epsilon)
            if cache is not None:
                cache[gid] = pi
        rows[i] = ppr_features(pi, sub.local_to_global, width).values
    sub.feature_matrix = rows
