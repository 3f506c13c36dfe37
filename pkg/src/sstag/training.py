"""Joint pretraining: objective terms, optimizer, schedule, loop, checkpoints.

One step samples PPR-weighted context subgraphs around a batch of anchor
nodes, runs the masked LM once per distinct node, propagates [CLS] states
through the GCN over the batch's block-diagonal adjacency, and optimizes
the sum of three terms: masked-token prediction, teacher-student cosine
alignment, and memory reconstruction. Every random draw comes from a
stream derived from (seed, purpose, step, item), so results do not depend
on scheduling order and a reloaded checkpoint continues bit-identically.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import (
    Tensor,
    add,
    backward,
    cosine_rows,
    gather_rows,
    mean_,
    mse,
    mul,
    nll_rows,
    reshape,
    sub,
    sum_,
)
from .graph import TextAttributedGraph
from .models import ModelBundle, ModelConfig, cls_states, sym_normalized_adjacency
from .ppr import WalkMatrix, push_ppr
from .sampler import ContextSubgraph, attach_ppr_features, sample_node_subgraph
from .text import MaskedSequence, Vocabulary, apply_mask, pad_batch, tokenize
from .util import ArtifactError, NumericalError, ValidationError, format_float, rng_stream


@dataclass
class TrainSettings:
    seed: int = 0
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3  # full-scale preset uses 2e-5; desk default suits tiny models
    weight_decay: float = 1e-3
    warmup_frac: float = 0.10
    mask_rate: float = 0.5
    alpha: float = 0.15
    epsilon: float = 1e-4
    hop_budgets: tuple = (10, 20)
    weight_mask: float = 1.0
    weight_st: float = 1.0
    weight_me: float = 1.0
    no_mask_loss: bool = False
    no_st_loss: bool = False
    no_me_loss: bool = False
    no_gnn: bool = False
    no_ppr: bool = False
    st_stop_gradient: bool = True

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValidationError("steps and batch size must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValidationError("warmup fraction must lie in [0, 1]")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValidationError("mask rate must lie in [0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("teleport factor must lie in (0, 1]")
        if len(self.hop_budgets) < 1:
            raise ValidationError("need at least one hop budget")


@dataclass
class LossBreakdown:
    l_mask: float
    l_st: float
    l_me: float
    total: float

    def validate(self) -> None:
        parts = self.l_mask + self.l_st + self.l_me
        if abs(self.total - parts) > 1e-12:
            raise NumericalError(f"loss total {self.total} drifted from parts {parts}")


# -- objective terms ---------------------------------------------------------


def mask_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Masked-token NLL summed per node, averaged over nodes.

    ``targets`` is (rows, length) with -1 everywhere except masked
    positions, which hold the original token id.
    """
    rows, length, vocab = logits.data.shape
    if targets.shape != (rows, length):
        raise ValidationError(f"targets {targets.shape} misaligned with logits {(rows, length)}")
    flat_targets = targets.reshape(-1)
    keep = np.nonzero(flat_targets >= 0)[0]
    if keep.size == 0:
        raise ValidationError("no masked position anywhere in the batch")
    picked = gather_rows(reshape(logits, (-1, vocab)), keep)
    per_position = nll_rows(picked, flat_targets[keep])
    return mul(sum_(per_position), 1.0 / rows)


def st_loss(teacher: Tensor, student: Tensor, stop_gradient: bool = True) -> Tensor:
    """Mean over rows of (1 - cosine) between aligned representations."""
    anchor = teacher.detach() if stop_gradient else teacher
    return mean_(sub(1.0, cosine_rows(student, anchor)))


def me_loss(reconstruction: Tensor, student: Tensor) -> Tensor:
    """Mean over rows of squared L2 gap; gradients reach both operands."""
    return mse(reconstruction, student)


def warmup_lr(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.10) -> float:
    """Linear ramp to base_lr over ceil(frac * total) steps, then constant."""
    if step < 1:
        raise ValidationError("schedule steps are 1-based")
    warm = int(np.ceil(warmup_frac * total_steps))
    if warm <= 0 or step >= warm:
        return base_lr
    return base_lr * step / warm


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Decoupled weight decay; decay applies even when a gradient is zero."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 2e-5,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-3,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for name in self.params:
            for store, key in ((self.m, f"opt.m.{name}"), (self.v, f"opt.v.{name}")):
                if key not in arrays:
                    raise ArtifactError(f"checkpoint missing optimizer tensor {key}")
                if arrays[key].shape != store[name].shape:
                    raise ArtifactError(
                        f"checkpoint tensor {key}: shape {arrays[key].shape} "
                        f"!= expected {store[name].shape}"
                    )
                store[name][...] = arrays[key]


# -- checkpoint container ------------------------------------------------------

CKPT_MAGIC = b"SSTC"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Binary container: manifest of named little-endian arrays plus JSON meta,
    closed by a CRC32 of everything before it."""
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    names = list(tensors)
    blob_parts = []
    manifest = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        manifest.append((name, "<f8", arr.shape, offset))
        blob_parts.append(raw)
        offset += len(raw)
    blob = b"".join(blob_parts)

    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<I", CKPT_VERSION)
    out += struct.pack("<Q", len(meta_blob))
    out += meta_blob
    out += struct.pack("<I", len(manifest))
    for name, dtype, shape, off in manifest:
        nb = name.encode("utf-8")
        db = dtype.encode("ascii")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", len(db)) + db
        out += struct.pack("<I", len(shape))
        out += struct.pack(f"<{len(shape)}q", *shape) if shape else b""
        out += struct.pack("<Q", off)
    out += struct.pack("<Q", len(blob))
    out += blob
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArtifactError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise ArtifactError("checkpoint truncated")
    stored = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) != stored:
        raise ArtifactError("checkpoint checksum mismatch")
    r = _Reader(buf[:-4])
    if r.take(4) != CKPT_MAGIC:
        raise ArtifactError("not a checkpoint file")
    version = r.u32()
    if version != CKPT_VERSION:
        raise ArtifactError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u64()).decode("utf-8"))
    manifest = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dtype = r.take(r.u32()).decode("ascii")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}q", r.take(8 * ndim)) if ndim else ()
        off = r.u64()
        manifest.append((name, dtype, shape, off))
    blob = r.take(r.u64())
    tensors = {}
    for name, dtype, shape, off in manifest:
        count = int(np.prod(shape)) if shape else 1
        dt = np.dtype(dtype)
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return tensors, meta


# -- trainer -------------------------------------------------------------------


@dataclass
class _Batch:
    subs: list
    unique_gids: np.ndarray
    inverse: np.ndarray  # local row -> unique row
    ids: np.ndarray  # (U, width) padded token ids
    targets_unique: np.ndarray  # (U, width) -1 off-mask
    block_offsets: np.ndarray
    block_targets: np.ndarray
    profile: np.ndarray  # (N, d_p)

    @property
    def n_local(self) -> int:
        return int(self.inverse.shape[0])


LOSS_CSV_HEADER = "step,l_mask,l_st,l_me,total,lr"


def loss_csv_row(step: int, b: LossBreakdown, lr: float) -> str:
    cells = [str(step)] + [format_float(x) for x in (b.l_mask, b.l_st, b.l_me, b.total, lr)]
    return ",".join(cells)


class Trainer:
    def __init__(
        self,
        g: TextAttributedGraph,
        vocab: Vocabulary,
        bundle: ModelBundle,
        settings: TrainSettings,
    ):
        settings.validate()
        self.g = g
        self.vocab = vocab
        self.bundle = bundle
        self.s = settings
        self.walk = WalkMatrix.from_graph(g)
        self.opt = AdamW(
            bundle.named_parameters(), lr=settings.lr, weight_decay=settings.weight_decay
        )
        self.step_count = 0
        self.ppr_cache: dict = {}
        self.token_cache: dict = {}
        self.rows: list[str] = []  # formatted loss-curve rows for this run segment

    @classmethod
    def fresh(
        cls, g, vocab, model_cfg: ModelConfig, settings: TrainSettings
    ) -> "Trainer":
        bundle = ModelBundle.build(model_cfg, rng_stream(settings.seed, "init"))
        return cls(g, vocab, bundle, settings)

    # -- batch assembly ------------------------------------------------------

    def _anchors(self, step: int) -> np.ndarray:
        rng = rng_stream(self.s.seed, "anchors", step)
        k = min(self.s.batch_size, self.g.n_nodes)
        return np.sort(rng.choice(self.g.n_nodes, size=k, replace=False))

    def _pi(self, node: int):
        pi = self.ppr_cache.get(node)
        if pi is None:
            pi = push_ppr(self.walk, node, self.s.alpha, self.s.epsilon)
            self.ppr_cache[node] = pi
        return pi

    def _token_seq(self, gid: int):
        seq = self.token_cache.get(gid)
        if seq is None:
            seq = tokenize(self.vocab, self.g.node_texts[gid], self.bundle.cfg.max_len)
            self.token_cache[gid] = seq
        return seq

    def sample_step_subgraphs(self, step: int) -> list[ContextSubgraph]:
        subs = []
        for a in self._anchors(step):
            a = int(a)
            rng = rng_stream(self.s.seed, "sample", step, a)
            sub = sample_node_subgraph(self.g, a, self._pi(a), self.s.hop_budgets, rng)
            attach_ppr_features(
                sub,
                self.walk,
                self.s.alpha,
                self.s.epsilon,
                self.bundle.cfg.d_p,
                cache=self.ppr_cache,
                enabled=not self.s.no_ppr,
            )
            subs.append(sub)
        return subs

    def collate(self, subs: list[ContextSubgraph], step: int) -> _Batch:
        local_gids = np.concatenate([s.local_to_global for s in subs])
        unique_gids, inverse = np.unique(local_gids, return_inverse=True)

        masked: list[MaskedSequence] = []
        for gid in unique_gids:
            gid = int(gid)
            rng = rng_stream(self.s.seed, "mask", step, gid)
            masked.append(apply_mask(self._token_seq(gid), self.s.mask_rate, rng))
        batch = pad_batch(masked)

        n_total = int(sum(s.n_nodes for s in subs))
        block_offsets = np.zeros(n_total + 1, np.int64)
        parts = []
        node_base = 0
        edge_base = 0
        for s in subs:
            block_offsets[node_base + 1 : node_base + 1 + s.n_nodes] = edge_base + s.offsets[1:]
            parts.append(s.targets + node_base)
            node_base += s.n_nodes
            edge_base += int(s.targets.shape[0])
        block_targets = (
            np.concatenate(parts) if parts else np.zeros(0, np.int64)
        )
        profile = np.vstack([s.feature_matrix for s in subs])
        return _Batch(
            subs=subs,
            unique_gids=unique_gids,
            inverse=inverse,
            ids=batch.ids,
            targets_unique=batch.targets,
            block_offsets=block_offsets,
            block_targets=block_targets,
            profile=profile,
        )

    # -- forward / step --------------------------------------------------------

    def compute_losses(self, batch: _Batch, step: int, training: bool = True):
        """Loss tensors for the enabled terms plus their float breakdown."""
        s = self.s
        drop_rng = rng_stream(s.seed, "dropout", step) if training else None
        states = self.bundle.lm(batch.ids, rng=drop_rng, training=training)
        cls_unique = cls_states(states)
        cls_local = gather_rows(cls_unique, batch.inverse)

        if s.no_gnn:
            teacher_h = cls_local
        else:
            adj = sym_normalized_adjacency(batch.block_offsets, batch.block_targets)
            teacher_h = self.bundle.gcn(adj, cls_local, rng=drop_rng, training=training)

        total = None
        values = {"mask": 0.0, "st": 0.0, "me": 0.0}
        student_h = None

        if not s.no_mask_loss:
            fused = self.bundle.fusion(gather_rows(states, batch.inverse), teacher_h)
            logits = self.bundle.mlm(fused)
            term = mask_loss(logits, batch.targets_unique[batch.inverse])
            if s.weight_mask != 1.0:
                term = mul(term, s.weight_mask)
            values["mask"] = float(term.data)
            total = term

        if not (s.no_st_loss and s.no_me_loss):
            student_h = self.bundle.student(
                cls_local, batch.profile, rng=drop_rng, training=training
            )

        if not s.no_st_loss:
            term = st_loss(teacher_h, student_h, s.st_stop_gradient)
            if s.weight_st != 1.0:
                term = mul(term, s.weight_st)
            values["st"] = float(term.data)
            total = term if total is None else add(total, term)

        if not s.no_me_loss:
            _, recon = self.bundle.memory.reconstruct(self.bundle.memory.activate(student_h))
            term = me_loss(recon, student_h)
            if s.weight_me != 1.0:
                term = mul(term, s.weight_me)
            values["me"] = float(term.data)
            total = term if total is None else add(total, term)

        for name in ("mask", "st", "me"):
            if not np.isfinite(values[name]):
                raise NumericalError(f"non-finite l_{name} at step {step}")
        breakdown = LossBreakdown(
            l_mask=values["mask"],
            l_st=values["st"],
            l_me=values["me"],
            total=0.0 if total is None else float(total.data),
        )
        return total, breakdown

    def train_step(self, step: int) -> tuple[LossBreakdown, float]:
        """One optimization step; ``step`` is 1-based."""
        lr = warmup_lr(step, self.s.steps, self.s.lr, self.s.warmup_frac)
        batch = self.collate(self.sample_step_subgraphs(step), step)
        total, breakdown = self.compute_losses(batch, step, training=True)
        if total is not None:
            self.opt.zero_grad()
            backward(total)
            self.opt.step(lr=lr)
        self.step_count = step
        self.rows.append(loss_csv_row(step, breakdown, lr))
        return breakdown, lr

    def run(self, until: int | None = None) -> list[LossBreakdown]:
        until = self.s.steps if until is None else until
        out = []
        while self.step_count < until:
            breakdown, _ = self.train_step(self.step_count + 1)
            out.append(breakdown)
        return out

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        tensors: dict[str, np.ndarray] = {
            f"param.{name}": p.data for name, p in self.bundle.named_parameters().items()
        }
        tensors.update(self.opt.state_arrays())
        meta = {
            "model": asdict(self.bundle.cfg),
            "train": {**asdict(self.s), "hop_budgets": list(self.s.hop_budgets)},
            "step_count": self.step_count,
            "opt_t": self.opt.t,
            "vocab_hash": self.vocab.content_hash(),
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path, g: TextAttributedGraph, vocab: Vocabulary) -> "Trainer":
        tensors, meta = load_checkpoint(path)
        bundle, settings = _restore_bundle(tensors, meta, vocab)
        trainer = cls(g, vocab, bundle, settings)
        trainer.opt.load_state_arrays(tensors, meta["opt_t"])
        trainer.step_count = int(meta["step_count"])
        return trainer


def _restore_bundle(tensors: dict, meta: dict, vocab: Vocabulary):
    if meta.get("vocab_hash") != vocab.content_hash():
        raise ArtifactError("checkpoint was trained with a different vocabulary")
    model_cfg = ModelConfig(**meta["model"])
    train_meta = dict(meta["train"])
    train_meta["hop_budgets"] = tuple(train_meta["hop_budgets"])
    settings = TrainSettings(**train_meta)
    bundle = ModelBundle.build(model_cfg, rng_stream(settings.seed, "init"))
    for name, p in bundle.named_parameters().items():
        key = f"param.{name}"
        if key not in tensors:
            raise ArtifactError(f"checkpoint missing tensor {key}")
        if tensors[key].shape != p.data.shape:
            raise ArtifactError(
                f"checkpoint tensor {key}: shape {tensors[key].shape} "
                f"!= expected {p.data.shape}"
            )
        p.data[...] = tensors[key]
    return bundle, settings


def load_bundle(path, vocab: Vocabulary) -> tuple[ModelBundle, TrainSettings, dict]:
    """Model (no optimizer) from a checkpoint, for inference-side consumers."""
    tensors, meta = load_checkpoint(path)
    bundle, settings = _restore_bundle(tensors, meta, vocab)
    return bundle, settings, meta
