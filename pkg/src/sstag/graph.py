"""Text-attributed graph store.

A graph couples CSR structure with per-node raw text and optional edge
text, node/edge/graph labels, and a train/val/test split. Ingest comes
from JSONL (one object per node/edge line); persistence is a little-endian
binary container with a trailing CRC32. A synthetic generator produces
clustered graphs with cluster-specific word pools for desk-scale runs.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .util import ValidationError, rng_stream

MAGIC = b"SSTG"
FORMAT_VERSION = 1

_FLAG_DIRECTED = 1
_FLAG_EDGE_TEXTS = 2
_FLAG_NODE_LABELS = 4
_FLAG_EDGE_LABELS = 8
_FLAG_GRAPH_LABEL = 16
_FLAG_SPLIT = 32

_SPLIT_AXES = ("node", "edge", "graph")


@dataclass(frozen=True)
class NodeRecord:
    id: int
    text: str
    label: float | int | None = None


@dataclass(frozen=True)
class EdgeRecord:
    src: int
    dst: int
    text: str | None = None
    label: float | int | None = None


@dataclass
class DatasetSplit:
    """Disjoint id partition over one axis (node, edge, or graph)."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    axis: str = "node"

    def validate(self, n_items: int) -> None:
        if self.axis not in _SPLIT_AXES:
            raise ValidationError(f"split axis must be one of {_SPLIT_AXES}, got {self.axis!r}")
        seen = np.concatenate([self.train, self.val, self.test])
        if seen.size and (seen.min() < 0 or seen.max() >= n_items):
            raise ValidationError("split ids out of range")
        if np.unique(seen).size != seen.size:
            raise ValidationError("split parts overlap")


class TextAttributedGraph:
    """CSR graph plus aligned texts/labels. Neighbor lists are sorted.

    Undirected graphs store both (u, v) and (v, u) slots; edge-aligned
    payloads (texts, labels) are per CSR slot so the two directions of an
    undirected edge carry the same payload.
    """

    def __init__(
        self,
        offsets: np.ndarray,
        targets: np.ndarray,
        node_texts: list[str],
        *,
        directed: bool = False,
        original_ids: np.ndarray | None = None,
        edge_texts: list[str | None] | None = None,
        node_labels: np.ndarray | None = None,
        edge_labels: np.ndarray | None = None,
        graph_label: float | None = None,
        split: DatasetSplit | None = None,
    ):
        self.offsets = np.asarray(offsets, np.int64)
        self.targets = np.asarray(targets, np.int64)
        self.node_texts = list(node_texts)
        self.directed = bool(directed)
        self.original_ids = (
            np.arange(len(node_texts), dtype=np.int64)
            if original_ids is None
            else np.asarray(original_ids, np.int64)
        )
        self.edge_texts = edge_texts
        self.node_labels = None if node_labels is None else np.asarray(node_labels, np.float64)
        self.edge_labels = None if edge_labels is None else np.asarray(edge_labels, np.float64)
        self.graph_label = None if graph_label is None else float(graph_label)
        self.split = split
        self.validate()

    # -- basic accessors ---------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.node_texts)

    @property
    def n_edge_slots(self) -> int:
        return int(self.targets.shape[0])

    @property
    def n_edges(self) -> int:
        """Logical edge count: undirected pairs count once."""
        return self.n_edge_slots if self.directed else self.n_edge_slots // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.targets[self.offsets[v] : self.offsets[v + 1]]

    def degree(self, v: int) -> int:
        return int(self.offsets[v + 1] - self.offsets[v])

    def edge_pairs(self) -> np.ndarray:
        """(n_slots, 2) array of (src, dst) per CSR slot."""
        counts = np.diff(self.offsets)
        src = np.repeat(np.arange(self.n_nodes, dtype=np.int64), counts)
        return np.stack([src, self.targets], axis=1)

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        n = self.n_nodes
        if self.offsets.shape != (n + 1,):
            raise ValidationError("offsets length must be n_nodes + 1")
        if self.offsets[0] != 0 or self.offsets[-1] != self.targets.shape[0]:
            raise ValidationError("offsets must start at 0 and end at len(targets)")
        if np.any(np.diff(self.offsets) < 0):
            raise ValidationError("offsets must be non-decreasing")
        if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= n):
            raise ValidationError("edge target out of range")
        for v in range(n):
            row = self.neighbors(v)
            if np.any(np.diff(row) < 0):
                raise ValidationError(f"neighbor list of node {v} is not sorted")
            if np.any(np.diff(row) == 0):
                raise ValidationError(f"duplicate edge in row {v}")
            if np.any(row == v):
                raise ValidationError(f"self-loop stored at node {v}")
        if self.original_ids.shape != (n,):
            raise ValidationError("original_ids length mismatch")
        if not self.directed:
            pairs = self.edge_pairs()
            fwd = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
            rev = pairs[:, ::-1]
            rev = rev[np.lexsort((rev[:, 1], rev[:, 0]))]
            if not np.array_equal(fwd, rev):
                raise ValidationError("undirected graph is not symmetric")
        if self.edge_texts is not None and len(self.edge_texts) != self.n_edge_slots:
            raise ValidationError("edge_texts length mismatch")
        if self.node_labels is not None and self.node_labels.shape != (n,):
            raise ValidationError("node_labels length mismatch")
        if self.edge_labels is not None and self.edge_labels.shape != (self.n_edge_slots,):
            raise ValidationError("edge_labels length mismatch")
        if self.split is not None:
            counts = {"node": n, "edge": self.n_edges, "graph": 1}
            self.split.validate(counts[self.split.axis])

    # -- equality (structural, for tests and round-trips) --------------------

    def equals(self, other: "TextAttributedGraph") -> bool:
        if (
            self.directed != other.directed
            or not np.array_equal(self.offsets, other.offsets)
            or not np.array_equal(self.targets, other.targets)
            or not np.array_equal(self.original_ids, other.original_ids)
            or self.node_texts != other.node_texts
            or self.edge_texts != other.edge_texts
            or self.graph_label != other.graph_label
        ):
            return False
        for a, b in ((self.node_labels, other.node_labels), (self.edge_labels, other.edge_labels)):
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b, equal_nan=True):
                return False
        if (self.split is None) != (other.split is None):
            return False
        if self.split is not None:
            s, o = self.split, other.split
            if s.axis != o.axis:
                return False
            for pa, pb in ((s.train, o.train), (s.val, o.val), (s.test, o.test)):
                if not np.array_equal(pa, pb):
                    return False
        return True


# ---------------------------------------------------------------------------
# construction from records


def build_graph(
    nodes: list[NodeRecord],
    edges: list[EdgeRecord],
    *,
    directed: bool = False,
    graph_label: float | None = None,
    split: DatasetSplit | None = None,
) -> TextAttributedGraph:
    """Assemble a graph from records.

    Node ids are remapped to dense 0..N-1 in record order (the mapping is
    kept in ``original_ids``). Self-loops are dropped, duplicate edges
    collapse to the first occurrence, and undirected edges get both slots.
    """
    if not nodes:
        raise ValidationError("graph needs at least one node")
    id_map: dict[int, int] = {}
    for rec in nodes:
        if rec.id in id_map:
            raise ValidationError(f"duplicate node id {rec.id}")
        id_map[rec.id] = len(id_map)
    n = len(nodes)

    seen: dict[tuple[int, int], int] = {}
    slot_src: list[int] = []
    slot_dst: list[int] = []
    slot_text: list[str | None] = []
    slot_label: list[float] = []
    any_text = False
    any_label = False
    for rec in edges:
        if rec.src not in id_map:
            raise ValidationError(f"edge references unknown node id {rec.src}")
        if rec.dst not in id_map:
            raise ValidationError(f"edge references unknown node id {rec.dst}")
        u, v = id_map[rec.src], id_map[rec.dst]
        if u == v:
            continue  # self-loops are structural noise here; walk matrices add their own
        key = (u, v) if directed else (min(u, v), max(u, v))
        if key in seen:
            continue
        seen[key] = 1
        pairs = [(u, v)] if directed else [(u, v), (v, u)]
        for a, b in pairs:
            slot_src.append(a)
            slot_dst.append(b)
            slot_text.append(rec.text)
            slot_label.append(np.nan if rec.label is None else float(rec.label))
        any_text = any_text or rec.text is not None
        any_label = any_label or rec.label is not None

    src = np.asarray(slot_src, np.int64)
    dst = np.asarray(slot_dst, np.int64)
    order = np.lexsort((dst, src)) if src.size else np.empty(0, np.int64)
    src, dst = src[order], dst[order]
    offsets = np.zeros(n + 1, np.int64)
    np.add.at(offsets, src + 1, 1)
    offsets = np.cumsum(offsets)

    edge_texts = [slot_text[i] for i in order] if any_text else None
    edge_labels = np.asarray(slot_label, np.float64)[order] if any_label else None

    labels = None
    if any(rec.label is not None for rec in nodes):
        labels = np.array(
            [np.nan if rec.label is None else float(rec.label) for rec in nodes], np.float64
        )

    return TextAttributedGraph(
        offsets,
        dst,
        [rec.text for rec in nodes],
        directed=directed,
        original_ids=np.array([rec.id for rec in nodes], np.int64),
        edge_texts=edge_texts,
        node_labels=labels,
        edge_labels=edge_labels,
        graph_label=graph_label,
        split=split,
    )


# ---------------------------------------------------------------------------
# JSONL ingest


def _parse_line(path, line_no: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{line_no}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}:{line_no}: expected a JSON object")
    return obj


def _require(obj: dict, key: str, path, line_no: int):
    if key not in obj:
        raise ValidationError(f"{path}:{line_no}: missing required field {key!r}")
    return obj[key]


def _node_from_obj(obj: dict, path, line_no: int) -> NodeRecord:
    node_id = _require(obj, "id", path, line_no)
    text = _require(obj, "text", path, line_no)
    if not isinstance(node_id, int):
        raise ValidationError(f"{path}:{line_no}: node id must be an integer")
    if not isinstance(text, str):
        raise ValidationError(f"{path}:{line_no}: node text must be a string")
    label = obj.get("label")
    if label is not None and not isinstance(label, (int, float)):
        raise ValidationError(f"{path}:{line_no}: label must be numeric")
    return NodeRecord(node_id, text, label)


def _edge_from_obj(obj: dict, path, line_no: int) -> EdgeRecord:
    src = _require(obj, "src", path, line_no)
    dst = _require(obj, "dst", path, line_no)
    if not isinstance(src, int) or not isinstance(dst, int):
        raise ValidationError(f"{path}:{line_no}: edge endpoints must be integers")
    text = obj.get("text")
    if text is not None and not isinstance(text, str):
        raise ValidationError(f"{path}:{line_no}: edge text must be a string")
    label = obj.get("label")
    if label is not None and not isinstance(label, (int, float)):
        raise ValidationError(f"{path}:{line_no}: label must be numeric")
    return EdgeRecord(src, dst, text, label)


def _iter_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip():
                yield line_no, line


def load_jsonl(nodes_path, edges_path, *, directed: bool = False) -> TextAttributedGraph:
    """Ingest a graph from node and edge JSONL files.

    Errors carry file name and 1-based line number.
    """
    nodes = []
    known = set()
    for ln, raw in _iter_jsonl(nodes_path):
        rec = _node_from_obj(_parse_line(nodes_path, ln, raw), nodes_path, ln)
        if rec.id in known:
            raise ValidationError(f"{nodes_path}:{ln}: duplicate node id {rec.id}")
        known.add(rec.id)
        nodes.append(rec)
    if not nodes:
        raise ValidationError(f"{nodes_path}: no node records")
    edges = []
    for ln, raw in _iter_jsonl(edges_path):
        rec = _edge_from_obj(_parse_line(edges_path, ln, raw), edges_path, ln)
        if rec.src not in known:
            raise ValidationError(f"{edges_path}:{ln}: edge references unknown node id {rec.src}")
        if rec.dst not in known:
            raise ValidationError(f"{edges_path}:{ln}: edge references unknown node id {rec.dst}")
        edges.append(rec)
    return build_graph(nodes, edges, directed=directed)


def load_collection(path) -> list[TextAttributedGraph]:
    """Load a graph collection: one JSON object per line, each a whole graph.

    Schema per line: {"graph_id": int, "nodes": [{id, text, label?}...],
    "edges": [{src, dst, text?, label?}...], "label": number?}.
    """
    graphs = []
    for ln, raw in _iter_jsonl(path):
        obj = _parse_line(path, ln, raw)
        raw_nodes = _require(obj, "nodes", path, ln)
        raw_edges = obj.get("edges", [])
        if not isinstance(raw_nodes, list) or not isinstance(raw_edges, list):
            raise ValidationError(f"{path}:{ln}: nodes/edges must be arrays")
        try:
            nodes = [_node_from_obj(o, path, ln) for o in raw_nodes]
            edges = [_edge_from_obj(o, path, ln) for o in raw_edges]
            graphs.append(build_graph(nodes, edges, graph_label=obj.get("label")))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{ln}: {exc}") from None
    if not graphs:
        raise ValidationError(f"{path}: no graphs in collection")
    return graphs


# ---------------------------------------------------------------------------
# binary persistence


def _pack_texts(texts) -> bytes:
    out = bytearray()
    for t in texts:
        if t is None:
            out += struct.pack("<I", 0xFFFFFFFF)
        else:
            raw = t.encode("utf-8")
            if len(raw) >= 0xFFFFFFFF:
                raise ValidationError("text block too large")
            out += struct.pack("<I", len(raw))
            out += raw
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValidationError("binary graph file truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def i64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<i8").astype(np.int64)

    def f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def texts(self, count: int) -> list:
        out = []
        for _ in range(count):
            ln = self.u32()
            out.append(None if ln == 0xFFFFFFFF else self.take(ln).decode("utf-8"))
        return out


def graph_to_bytes(g: TextAttributedGraph) -> bytes:
    flags = 0
    flags |= _FLAG_DIRECTED if g.directed else 0
    flags |= _FLAG_EDGE_TEXTS if g.edge_texts is not None else 0
    flags |= _FLAG_NODE_LABELS if g.node_labels is not None else 0
    flags |= _FLAG_EDGE_LABELS if g.edge_labels is not None else 0
    flags |= _FLAG_GRAPH_LABEL if g.graph_label is not None else 0
    flags |= _FLAG_SPLIT if g.split is not None else 0

    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<BQQ", flags, g.n_nodes, g.n_edge_slots)
    out += g.original_ids.astype("<i8").tobytes()
    out += g.offsets.astype("<i8").tobytes()
    out += g.targets.astype("<i8").tobytes()
    out += _pack_texts(g.node_texts)
    if g.edge_texts is not None:
        out += _pack_texts(g.edge_texts)
    if g.node_labels is not None:
        out += g.node_labels.astype("<f8").tobytes()
    if g.edge_labels is not None:
        out += g.edge_labels.astype("<f8").tobytes()
    if g.graph_label is not None:
        out += struct.pack("<d", g.graph_label)
    if g.split is not None:
        out += struct.pack("<B", _SPLIT_AXES.index(g.split.axis))
        for part in (g.split.train, g.split.val, g.split.test):
            arr = np.asarray(part, np.int64)
            out += struct.pack("<Q", arr.shape[0])
            out += arr.astype("<i8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def graph_from_bytes(buf: bytes) -> TextAttributedGraph:
    if len(buf) < 12:
        raise ValidationError("binary graph file truncated")
    if buf[:4] != MAGIC:
        raise ValidationError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise ValidationError("checksum mismatch: graph file corrupt or truncated")
    r = _Reader(buf[:-4])
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported graph format version {version}")
    flags, n_nodes, n_slots = struct.unpack("<BQQ", r.take(17))
    original_ids = r.i64_array(n_nodes)
    offsets = r.i64_array(n_nodes + 1)
    targets = r.i64_array(n_slots)
    node_texts = r.texts(n_nodes)
    edge_texts = r.texts(n_slots) if flags & _FLAG_EDGE_TEXTS else None
    node_labels = r.f64_array(n_nodes) if flags & _FLAG_NODE_LABELS else None
    edge_labels = r.f64_array(n_slots) if flags & _FLAG_EDGE_LABELS else None
    graph_label = r.f64() if flags & _FLAG_GRAPH_LABEL else None
    split = None
    if flags & _FLAG_SPLIT:
        axis = _SPLIT_AXES[struct.unpack("<B", r.take(1))[0]]
        parts = [r.i64_array(r.u64()) for _ in range(3)]
        split = DatasetSplit(parts[0], parts[1], parts[2], axis=axis)
    if any(t is None for t in node_texts):
        raise ValidationError("node text block contains a missing entry")
    return TextAttributedGraph(
        offsets,
        targets,
        node_texts,
        directed=bool(flags & _FLAG_DIRECTED),
        original_ids=original_ids,
        edge_texts=edge_texts,
        node_labels=node_labels,
        edge_labels=edge_labels,
        graph_label=graph_label,
        split=split,
    )


def save_binary(g: TextAttributedGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(graph_to_bytes(g))


def load_binary(path) -> TextAttributedGraph:
    with open(path, "rb") as fh:
        return graph_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    """Clustered graph with per-cluster word pools.

    ``p_intra`` may be one probability or one per cluster (asymmetric
    densities give clusters distinct structural signatures). Node text is a
    contiguous run of ``words_per_node`` words around a random offset of the
    cluster's pool ring, so masked words are predictable from their
    neighbors in the sequence. Pools may share a suffix of common words,
    which makes some texts cluster-ambiguous on purpose.
    """

    n_nodes: int = 200
    n_clusters: int = 2
    p_intra: float | tuple = 0.15
    p_inter: float = 0.01
    word_pools: list[list[str]] | None = None
    words_per_node: int = 4
    split_fracs: tuple = (0.6, 0.2, 0.2)

    def intra(self, c: int) -> float:
        if isinstance(self.p_intra, (int, float)):
            return float(self.p_intra)
        return float(self.p_intra[c])


def default_word_pools(n_clusters: int, n_distinct: int = 12, n_shared: int = 12) -> list[list[str]]:
    shared = [f"sh{k:02d}" for k in range(n_shared)]
    return [[f"c{c}w{k:02d}" for k in range(n_distinct)] + shared for c in range(n_clusters)]


def _sample_distinct_pairs(lo_a, hi_a, lo_b, hi_b, m, rng):
    """m distinct unordered pairs across [lo_a, hi_a) x [lo_b, hi_b), canonical u<v."""
    chosen = set()
    while len(chosen) < m:
        need = m - len(chosen)
        us = rng.integers(lo_a, hi_a, size=2 * need + 4)
        vs = rng.integers(lo_b, hi_b, size=2 * need + 4)
        for u, v in zip(us, vs):
            if u == v:
                continue
            chosen.add((min(u, v), max(u, v)))
            if len(chosen) >= m:
                break
    return sorted(chosen)


def make_synthetic_tag(spec: SyntheticSpec, seed: int) -> TextAttributedGraph:
    if spec.n_nodes < spec.n_clusters or spec.n_clusters < 1:
        raise ValidationError("need at least one node per cluster")
    probs = [spec.intra(c) for c in range(spec.n_clusters)] + [spec.p_inter]
    if any(p < 0 or p > 1 for p in probs):
        raise ValidationError("edge probabilities must lie in [0, 1]")
    if abs(sum(spec.split_fracs) - 1.0) > 1e-9 or any(f < 0 for f in spec.split_fracs):
        raise ValidationError("split fractions must be non-negative and sum to 1")
    pools = spec.word_pools if spec.word_pools is not None else default_word_pools(spec.n_clusters)
    if len(pools) != spec.n_clusters or any(len(p) == 0 for p in pools):
        raise ValidationError("need one non-empty word pool per cluster")

    n = spec.n_nodes
    cluster = np.array([i * spec.n_clusters // n for i in range(n)], np.int64)
    bounds = np.searchsorted(cluster, np.arange(spec.n_clusters + 1))

    rng = rng_stream(seed, "synthetic-structure")
    pairs = []
    for a in range(spec.n_clusters):
        lo, hi = bounds[a], bounds[a + 1]
        size = hi - lo
        n_pairs = size * (size - 1) // 2
        m = rng.binomial(n_pairs, spec.intra(a)) if n_pairs else 0
        pairs += _sample_distinct_pairs(lo, hi, lo, hi, m, rng)
        for b in range(a + 1, spec.n_clusters):
            lo_b, hi_b = bounds[b], bounds[b + 1]
            n_cross = size * (hi_b - lo_b)
            m = rng.binomial(n_cross, spec.p_inter) if n_cross else 0
            pairs += _sample_distinct_pairs(lo, hi, lo_b, hi_b, m, rng)

    text_rng = rng_stream(seed, "synthetic-text")
    texts = []
    for i in range(n):
        pool = pools[cluster[i]]
        start = int(text_rng.integers(len(pool)))
        words = [pool[(start + t) % len(pool)] for t in range(spec.words_per_node)]
        texts.append(" ".join(words))

    split_rng = rng_stream(seed, "synthetic-split")
    perm = split_rng.permutation(n)
    n_train = int(round(spec.split_fracs[0] * n))
    n_val = int(round(spec.split_fracs[1] * n))
    split = DatasetSplit(
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_val]),
        np.sort(perm[n_train + n_val :]),
        axis="node",
    )

    nodes = [NodeRecord(i, texts[i], int(cluster[i])) for i in range(n)]
    edges = [EdgeRecord(int(u), int(v)) for u, v in pairs]
    g = build_graph(nodes, edges, directed=False, split=split)
    return g
