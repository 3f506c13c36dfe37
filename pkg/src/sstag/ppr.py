"""Personalized PageRank engine.

The walk matrix is the row-stochastic transition over the graph with a
self-loop added at every node. Two solvers share that convention: an exact
dense resolvent solve (the oracle, small graphs only) and an approximate
forward-push propagation whose hot loop lives in ``sstag.kernels``. Both
return sparse score vectors; pushes are L1-normalized on return.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .graph import TextAttributedGraph
from .util import NumericalError, ValidationError

EXACT_MAX_NODES = 2000
ZERO_SCORE_FLOOR = 1e-12  # weight floor for nodes the push never reached


@dataclass(frozen=True)
class WalkMatrix:
    """Self-looped CSR adjacency with per-row out-degrees (row-stochastic walk)."""

    offsets: np.ndarray
    targets: np.ndarray
    degrees: np.ndarray  # float64 row counts, self-loop included

    @property
    def n_nodes(self) -> int:
        return int(self.degrees.shape[0])

    @classmethod
    def from_graph(cls, g: TextAttributedGraph) -> "WalkMatrix":
        n = g.n_nodes
        counts = np.diff(g.offsets) + 1  # one self slot per row
        offsets = np.zeros(n + 1, np.int64)
        np.cumsum(counts, out=offsets[1:])
        targets = np.empty(offsets[-1], np.int64)
        for v in range(n):
            row = g.neighbors(v)
            pos = np.searchsorted(row, v)
            targets[offsets[v] : offsets[v] + pos] = row[:pos]
            targets[offsets[v] + pos] = v
            targets[offsets[v] + pos + 1 : offsets[v + 1]] = row[pos:]
        return cls(offsets, targets, counts.astype(np.float64))

    def row_sums(self) -> np.ndarray:
        """Transition-probability row sums; 1.0 everywhere by construction."""
        return np.diff(self.offsets) / self.degrees


@dataclass(frozen=True)
class PprVector:
    """Sparse score vector: sorted node ids with positive scores."""

    seed: int
    alpha: float
    ids: np.ndarray
    scores: np.ndarray

    def score_of(self, nodes: np.ndarray) -> np.ndarray:
        """Scores for arbitrary node ids; zero where the vector has no mass."""
        nodes = np.asarray(nodes, np.int64)
        pos = np.searchsorted(self.ids, nodes)
        pos = np.clip(pos, 0, max(len(self.ids) - 1, 0))
        out = np.zeros(nodes.shape, np.float64)
        if len(self.ids):
            hit = self.ids[pos] == nodes
            out[hit] = self.scores[pos[hit]]
        return out

    def total(self) -> float:
        return float(self.scores.sum())

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n, np.float64)
        out[self.ids] = self.scores
        return out


@dataclass(frozen=True)
class PprFeatures:
    """Fixed-width descending score profile used as structural node features."""

    values: np.ndarray


def _check_seed_alpha(walk: WalkMatrix, seed: int, alpha: float) -> None:
    if not 0 <= seed < walk.n_nodes:
        raise ValidationError(f"seed {seed} out of range for {walk.n_nodes} nodes")
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"teleport probability must be in (0, 1], got {alpha}")


def _to_sparse(seed: int, alpha: float, dense: np.ndarray) -> PprVector:
    ids = np.nonzero(dense > 0.0)[0].astype(np.int64)
    return PprVector(seed=int(seed), alpha=float(alpha), ids=ids, scores=dense[ids])


def exact_ppr(walk: WalkMatrix, seed: int, alpha: float) -> PprVector:
    """Dense resolvent solve. Oracle-grade; refuses graphs beyond desk scale."""
    _check_seed_alpha(walk, seed, alpha)
    n = walk.n_nodes
    if n > EXACT_MAX_NODES:
        raise ValidationError(f"exact solve capped at {EXACT_MAX_NODES} nodes, got {n}")
    if alpha == 1.0:
        dense = np.zeros(n)
        dense[seed] = 1.0
        return _to_sparse(seed, alpha, dense)
    # column u of the system matrix spreads u's mass to its walk targets
    m = np.eye(n)
    for u in range(n):
        row = walk.targets[walk.offsets[u] : walk.offsets[u + 1]]
        m[row, u] -= (1.0 - alpha) / walk.degrees[u]
    rhs = np.zeros(n)
    rhs[seed] = alpha
    scores = np.linalg.solve(m, rhs)
    if not np.all(np.isfinite(scores)):
        raise NumericalError("exact solve produced non-finite scores")
    return _to_sparse(seed, alpha, np.maximum(scores, 0.0))


def push_ppr(walk: WalkMatrix, seed: int, alpha: float, epsilon: float) -> PprVector:
    """Forward-push approximation.

    Pushes until every residual drops below epsilon * degree, then
    L1-normalizes the accumulated mass. An epsilon too large for any push
    to fire degenerates to all mass at the seed.
    """
    _check_seed_alpha(walk, seed, alpha)
    if epsilon <= 0:
        raise ValidationError(f"push tolerance must be positive, got {epsilon}")
    mass = kernels.push_ppr(
        walk.offsets, walk.targets, walk.degrees, int(seed), float(alpha), float(epsilon)
    )
    total = mass.sum()
    if total <= 0.0:
        dense = np.zeros(walk.n_nodes)
        dense[seed] = 1.0
    else:
        dense = mass / total
    return _to_sparse(seed, alpha, dense)


def ppr_features(pi: PprVector, subgraph_nodes: np.ndarray, width: int) -> PprFeatures:
    """Descending score profile of a node's subgraph companions.

    Scores of ``subgraph_nodes`` (the seed itself excluded) sorted high to
    low, truncated or zero-padded to ``width``.
    """
    if width < 0:
        raise ValidationError("feature width must be non-negative")
    nodes = np.asarray(subgraph_nodes, np.int64)
    nodes = nodes[nodes != pi.seed]
    scores = pi.score_of(nodes)
    scores = np.sort(scores)[::-1][:width]
    out = np.zeros(width, np.float64)
    out[: scores.shape[0]] = scores
    return PprFeatures(values=out)
