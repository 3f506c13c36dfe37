"""Model components.

Teacher: a tiny masked-LM transformer encoder whose [CLS] states feed a
GCN over the batch adjacency; token states and the graph-aware [CLS] fuse
back together before the vocabulary head. Student: a plain MLP over the
[CLS] state concatenated with PPR profile features, plus a trainable
memory of anchor vectors that reconstructs student outputs as convex
anchor mixtures. The only sparse operation in the package's differentiable
graph is ``csr_matmul`` defined here; the student path never touches it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autograd import (
    Tensor,
    _make,
    add,
    concat,
    dropout,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mul,
    power,
    relu,
    reshape,
    slice_,
    softmax_last,
    softmax_rows,
    sum_,
    transpose,
)
from .text import PAD
from .util import ValidationError


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 64  # full-scale hidden size is 768; desk default keeps runs cheap
    n_blocks: int = 2
    n_heads: int = 4
    max_len: int = 64
    ffn_mult: int = 4
    gcn_layers: int = 3
    mlp_layers: int = 3
    d_p: int = 16  # full-scale profile width is 128
    n_anchors: int = 256
    dropout: float = 0.2
    memory_similarity: str = "dot"  # dot | cosine
    memory_tau: float = 1.0  # extra temperature on top of the 1/sqrt(d) scale

    def validate(self) -> None:
        if self.vocab_size < 6:
            raise ValidationError("vocab must cover the five reserved ids plus content")
        if self.d % self.n_heads != 0:
            raise ValidationError(f"hidden size {self.d} not divisible by {self.n_heads} heads")
        if self.memory_similarity not in ("dot", "cosine"):
            raise ValidationError(f"unknown memory similarity {self.memory_similarity!r}")
        if self.memory_tau <= 0:
            raise ValidationError("memory temperature must be positive")
        if min(self.n_blocks, self.gcn_layers, self.mlp_layers, self.n_anchors) < 1:
            raise ValidationError("all depth/width knobs must be positive")
        if self.max_len < 2:
            raise ValidationError("max_len must fit [CLS] and [SEP]")


# -- parameter plumbing -----------------------------------------------------


def _xavier(rng, fan_in, fan_out, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _table(rng, rows, d) -> Tensor:
    limit = 1.0 / np.sqrt(d)
    return Tensor(rng.uniform(-limit, limit, size=(rows, d)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Tiny base: named parameter discovery over attribute dicts."""

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                for sub, t in value.named_parameters().items():
                    out[f"{key}.{sub}"] = t
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    for sub, t in m.named_parameters().items():
                        out[f"{key}.{i}.{sub}"] = t
        return out


class Linear(Module):
    def __init__(self, rng, d_in, d_out):
        self.weight = _xavier(rng, d_in, d_out)
        self.bias = _zeros(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


# -- sparse adjacency op ------------------------------------------------------


def sym_normalized_adjacency(offsets: np.ndarray, targets: np.ndarray):
    """Self-looped symmetric normalization: values of D^-1/2 (A + I) D^-1/2.

    Returns (offsets, targets, values) with the self slot merged into each
    sorted row. Input adjacency must be symmetric.
    """
    n = offsets.shape[0] - 1
    counts = np.diff(offsets) + 1
    new_offsets = np.zeros(n + 1, np.int64)
    np.cumsum(counts, out=new_offsets[1:])
    new_targets = np.empty(new_offsets[-1], np.int64)
    for v in range(n):
        row = targets[offsets[v] : offsets[v + 1]]
        pos = np.searchsorted(row, v)
        base = new_offsets[v]
        new_targets[base : base + pos] = row[:pos]
        new_targets[base + pos] = v
        new_targets[base + pos + 1 : new_offsets[v + 1]] = row[pos:]
    inv_sqrt = 1.0 / np.sqrt(counts.astype(np.float64))
    src = np.repeat(np.arange(n, dtype=np.int64), counts)
    values = inv_sqrt[src] * inv_sqrt[new_targets]
    return new_offsets, new_targets, values


def csr_matmul(adj, x: Tensor) -> Tensor:
    """Sparse-adjacency times dense, differentiable in the dense operand only.

    ``adj`` is an (offsets, targets, values) triple that must be symmetric
    (the normalized undirected adjacency is), so the backward pass reuses
    the same matrix.
    """
    offsets, targets, values = adj
    if x.data.ndim != 2 or x.data.shape[0] != offsets.shape[0] - 1:
        raise ValidationError(
            f"csr_matmul got {offsets.shape[0] - 1} rows vs dense {x.data.shape}"
        )
    data = kernels.csr_dense_matmul(offsets, targets, values, x.data)
    return _make(
        "csr_matmul",
        data,
        (x,),
        lambda g: (kernels.csr_dense_matmul(offsets, targets, values, np.ascontiguousarray(g)),),
    )


# -- teacher ----------------------------------------------------------------


class TransformerBlock(Module):
    def __init__(self, rng, d, n_heads, ffn_mult):
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.ln1_gain, self.ln1_bias = _ones(d), _zeros(d)
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.out = Linear(rng, d, d)
        self.ln2_gain, self.ln2_bias = _ones(d), _zeros(d)
        self.ffn_in = Linear(rng, d, d * ffn_mult)
        self.ffn_out = Linear(rng, d * ffn_mult, d)

    def _split(self, t: Tensor, b, length) -> Tensor:
        return transpose(reshape(t, (b, length, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, x, key_bias, query_keep, p_drop, rng, training, attn_sink=None):
        b, length, d = x.data.shape
        h = layer_norm(x, self.ln1_gain, self.ln1_bias)
        q = self._split(self.q(h), b, length)
        k = self._split(self.k(h), b, length)
        v = self._split(self.v(h), b, length)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.d_head))
        scores = add(scores, key_bias)  # pad keys pushed to -inf
        weights = mul(softmax_last(scores), query_keep)  # pad queries zeroed
        if attn_sink is not None:
            attn_sink.append(weights.data.copy())
        ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, length, d))
        x = add(x, dropout(self.out(ctx), p_drop, rng, training))
        h2 = layer_norm(x, self.ln2_gain, self.ln2_bias)
        ffn = self.ffn_out(gelu(self.ffn_in(h2)))
        return add(x, dropout(ffn, p_drop, rng, training))


class LmEncoder(Module):
    """Token + learned positional embeddings into pre-LN transformer blocks.

    Padding is invisible: pad keys receive no attention mass and pad query
    rows are zeroed, so a sequence's states never depend on how much
    padding its batch neighbors brought in.
    """

    def __init__(self, rng, cfg: ModelConfig):
        self.cfg_dropout = cfg.dropout
        self.tok = _table(rng, cfg.vocab_size, cfg.d)
        self.pos = _table(rng, cfg.max_len, cfg.d)
        self.blocks = [
            TransformerBlock(rng, cfg.d, cfg.n_heads, cfg.ffn_mult) for _ in range(cfg.n_blocks)
        ]
        self.final_gain, self.final_bias = _ones(cfg.d), _zeros(cfg.d)

    def __call__(self, ids: np.ndarray, rng=None, training=False, attn_sink=None) -> Tensor:
        if ids.ndim != 2:
            raise ValidationError("token ids must be (batch, length)")
        b, length = ids.shape
        if length > self.pos.data.shape[0]:
            raise ValidationError(
                f"sequence length {length} exceeds positional table {self.pos.data.shape[0]}"
            )
        live = ids != PAD
        key_bias = Tensor(np.where(live, 0.0, -1e30)[:, None, None, :])
        query_keep = Tensor(live.astype(np.float64)[:, None, :, None])
        x = add(gather_rows(self.tok, ids), slice_(self.pos, slice(0, length)))
        x = dropout(x, self.cfg_dropout, rng, training)
        for block in self.blocks:
            x = block(x, key_bias, query_keep, self.cfg_dropout, rng, training, attn_sink)
        return layer_norm(x, self.final_gain, self.final_bias)


def cls_states(token_states: Tensor) -> Tensor:
    """Leading-position state of every sequence: (B, L, d) -> (B, d)."""
    return slice_(token_states, (slice(None), 0))


class GcnStack(Module):
    """relu(A_hat @ H @ W + b) stacks over a normalized adjacency."""

    def __init__(self, rng, cfg: ModelConfig):
        self.cfg_dropout = cfg.dropout
        self.layers = [Linear(rng, cfg.d, cfg.d) for _ in range(cfg.gcn_layers)]

    def __call__(self, adj, x: Tensor, rng=None, training=False) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = relu(layer(csr_matmul(adj, h)))
            if i + 1 < len(self.layers):
                h = dropout(h, self.cfg_dropout, rng, training)
        return h


class FusionHead(Module):
    """Token states concatenated with their sequence's broadcast graph state."""

    def __init__(self, rng, cfg: ModelConfig):
        self.proj = Linear(rng, 2 * cfg.d, cfg.d)

    def __call__(self, token_states: Tensor, graph_state: Tensor) -> Tensor:
        b, length, d = token_states.data.shape
        tiled = mul(Tensor(np.ones((1, length, 1))), reshape(graph_state, (b, 1, d)))
        return self.proj(concat([token_states, tiled], axis=2))


class MlmHead(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.hidden = Linear(rng, cfg.d, cfg.d)
        self.out = Linear(rng, cfg.d, cfg.vocab_size)

    def __call__(self, fused: Tensor) -> Tensor:
        return self.out(gelu(self.hidden(fused)))


# -- student ----------------------------------------------------------------


class StructureAwareMlp(Module):
    """Message-passing-free student over [CLS] plus PPR profile features."""

    def __init__(self, rng, cfg: ModelConfig):
        self.cfg_dropout = cfg.dropout
        dims = [cfg.d + cfg.d_p] + [cfg.d] * cfg.mlp_layers
        self.layers = [Linear(rng, dims[i], dims[i + 1]) for i in range(cfg.mlp_layers)]

    def __call__(self, cls_state: Tensor, profile: np.ndarray, rng=None, training=False) -> Tensor:
        if profile.shape != (cls_state.data.shape[0], self.layers[0].weight.data.shape[0] - cls_state.data.shape[1]):
            raise ValidationError("profile block misaligned with student input width")
        h = concat([cls_state, Tensor(profile)], axis=1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i + 1 < len(self.layers):
                h = dropout(gelu(h), self.cfg_dropout, rng, training)
        return h


class MemoryBank(Module):
    """Trainable anchor vectors with softmax mixture reconstruction."""

    def __init__(self, rng, cfg: ModelConfig):
        self.anchors = _table(rng, cfg.n_anchors, cfg.d)
        self.similarity = cfg.memory_similarity
        self.scale = 1.0 / (np.sqrt(cfg.d) * cfg.memory_tau)
        self.tau = cfg.memory_tau

    def activate(self, h: Tensor) -> Tensor:
        """Similarity of each row against every anchor: (B, n_anchors)."""
        if self.similarity == "dot":
            return mul(matmul(h, transpose(self.anchors)), self.scale)
        h_norm = mul(h, power(add(sum_(mul(h, h), axis=1, keepdims=True), 1e-12), -0.5))
        a_norm = mul(
            self.anchors,
            power(add(sum_(mul(self.anchors, self.anchors), axis=1, keepdims=True), 1e-12), -0.5),
        )
        return mul(matmul(h_norm, transpose(a_norm)), 1.0 / self.tau)

    def reconstruct(self, scores: Tensor) -> tuple[Tensor, Tensor]:
        """Row-normalized mixture weights and the resulting anchor blend."""
        probs = softmax_rows(scores)
        return probs, matmul(probs, self.anchors)


# -- bundle ----------------------------------------------------------------


@dataclass
class ModelBundle:
    cfg: ModelConfig
    lm: LmEncoder
    gcn: GcnStack
    fusion: FusionHead
    mlm: MlmHead
    student: StructureAwareMlp
    memory: MemoryBank

    @classmethod
    def build(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ModelBundle":
        cfg.validate()
        return cls(
            cfg=cfg,
            lm=LmEncoder(rng, cfg),
            gcn=GcnStack(rng, cfg),
            fusion=FusionHead(rng, cfg),
            mlm=MlmHead(rng, cfg),
            student=StructureAwareMlp(rng, cfg),
            memory=MemoryBank(rng, cfg),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part_name in ("lm", "gcn", "fusion", "mlm", "student", "memory"):
            part: Module = getattr(self, part_name)
            for sub, t in part.named_parameters().items():
                out[f"{part_name}.{sub}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())
