"""Command-line surface: ingest/synth graphs, PPR and sampling dumps,
pretraining, student embedding, and linear probing.

Exit codes: 0 success, 2 usage or validation problems, 3 numerical
failures, 4 incompatible artifacts. Every command is deterministic given
its --seed and inputs, and every run directory carries its fully resolved
config plus input hashes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .evalprobe import (
    EmbeddingMatrix,
    embed_nodes,
    link_dataset,
    run_probe_seeds,
    summarize,
    teacher_embed,
    mean_row_cosine,
)
from .graph import (
    SyntheticSpec,
    TextAttributedGraph,
    default_word_pools,
    load_binary,
    load_jsonl,
    make_synthetic_tag,
    save_binary,
)
from .ppr import WalkMatrix, exact_ppr, push_ppr
from .sampler import attach_ppr_features, graph_as_sample, sample_edge_subgraph, sample_node_subgraph
from .text import Vocabulary, build_vocab
from .training import LOSS_CSV_HEADER, Trainer, load_bundle
from .util import (
    ArtifactError,
    NumericalError,
    SstagError,
    ValidationError,
    format_float,
    rng_stream,
    sha256_file,
)


# -- run-directory plumbing ----------------------------------------------------


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive marker so two commands cannot interleave in one directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(f"{run_dir} is locked by another command (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_meta(run_dir: Path, inputs: dict) -> None:
    meta = {"version": __version__, "inputs": inputs}
    (run_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_sources(getattr(args, "config", None), getattr(args, "set", []) or [])
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for name in getattr(args, "ablate", []) or []:
        key = {"mask": "no_mask_loss", "st": "no_st_loss", "me": "no_me_loss",
               "gnn": "no_gnn", "ppr": "no_ppr"}.get(name)
        if key is None:
            raise ValidationError(f"unknown ablation {name!r} (mask|st|me|gnn|ppr)")
        setattr(cfg, key, True)
    return cfg


# -- commands ------------------------------------------------------------------


def cmd_ingest(args) -> int:
    g = load_jsonl(args.nodes, args.edges, directed=args.directed)
    save_binary(g, args.out)
    print(f"wrote {args.out}: {g.n_nodes} nodes, {g.n_edges} edges")
    return 0


def cmd_synth(args) -> int:
    p_intra = tuple(float(x) for x in args.p_intra.split(",")) if "," in args.p_intra else float(args.p_intra)
    spec = SyntheticSpec(
        n_nodes=args.nodes,
        n_clusters=args.clusters,
        p_intra=p_intra,
        p_inter=args.p_inter,
        word_pools=default_word_pools(args.clusters, args.pool_distinct, args.pool_shared),
        words_per_node=args.words,
    )
    g = make_synthetic_tag(spec, seed=args.seed)
    save_binary(g, args.out)
    print(f"wrote {args.out}: {g.n_nodes} nodes, {g.n_edges} edges, {args.clusters} clusters")
    return 0


def _ppr_csv(pi, topk=None) -> str:
    order = np.argsort(-pi.scores, kind="stable")
    if topk is not None:
        order = order[:topk]
    lines = ["node,score"]
    for idx in order:
        lines.append(f"{int(pi.ids[idx])},{format_float(pi.scores[idx])}")
    return "\n".join(lines) + "\n"


def cmd_ppr(args) -> int:
    g = load_binary(args.graph)
    walk = WalkMatrix.from_graph(g)
    if args.exact:
        pi = exact_ppr(walk, args.seed_node, args.alpha)
    else:
        pi = push_ppr(walk, args.seed_node, args.alpha, args.epsilon)
    text = _ppr_csv(pi, args.topk)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}: {pi.ids.shape[0]} scored nodes")
    return 0


def cmd_sample(args) -> int:
    g = load_binary(args.graph)
    walk = WalkMatrix.from_graph(g)
    cfg = load_config(args)
    budgets = tuple(cfg.hop_budgets)
    rng = rng_stream(cfg.seed, "cli-sample")
    if args.task == "node":
        pi = push_ppr(walk, args.anchor, cfg.alpha, cfg.epsilon)
        sub = sample_node_subgraph(g, args.anchor, pi, budgets, rng)
    elif args.task == "edge":
        if args.anchor2 is None:
            raise ValidationError("edge task needs --anchor2")
        pi_u = push_ppr(walk, args.anchor, cfg.alpha, cfg.epsilon)
        pi_v = push_ppr(walk, args.anchor2, cfg.alpha, cfg.epsilon)
        sub = sample_edge_subgraph(g, args.anchor, args.anchor2, pi_u, pi_v, budgets, rng)
    else:
        sub = graph_as_sample(g)
    attach_ppr_features(sub, walk, cfg.alpha, cfg.epsilon, cfg.d_p, enabled=not cfg.no_ppr)
    text = sub.to_json() + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}: {sub.n_nodes}-node {sub.task_kind} sample")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    g = load_binary(args.graph)
    run_dir = Path(args.out_dir)
    with run_lock(run_dir):
        vocab = build_vocab(g.node_texts, min_count=cfg.vocab_min_count)
        if args.resume:
            trainer = Trainer.load(args.resume, g, vocab)
        else:
            trainer = Trainer.fresh(g, vocab, cfg.model_config(vocab.size), cfg.train_settings())
        # --until stops a run early without touching the recipe (steps still
        # defines the lr schedule); a bare resume finishes the recipe
        until = args.until if args.until is not None else trainer.s.steps
        try:
            trainer.run(until)
        except NumericalError as exc:
            raise NumericalError(f"{exc} (after {trainer.step_count} completed steps)") from exc
        ckpt = run_dir / "ckpt.sstc"
        trainer.save(ckpt)
        vocab.save(run_dir / "vocab.tsv")
        mode = "a" if args.resume and (run_dir / "loss_curve.csv").exists() else "w"
        with open(run_dir / "loss_curve.csv", mode, encoding="utf-8") as fh:
            if mode == "w":
                fh.write(LOSS_CSV_HEADER + "\n")
            for row in trainer.rows:
                fh.write(row + "\n")
        (run_dir / "config.resolved").write_text(cfg.resolved_text())
        write_meta(run_dir, {"graph": sha256_file(args.graph), "vocab": vocab.content_hash()})
    last = trainer.rows[-1] if trainer.rows else "no steps run"
    print(f"trained to step {trainer.step_count}; final row: {last}")
    print(f"wrote {ckpt}")
    return 0


def _load_embeddings_csv(path) -> EmbeddingMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "id":
            raise ValidationError(f"{path}: expected embeddings CSV header id,e0,...")
        width = len(header) - 1
        ids = []
        rows = []
        for ln, line in enumerate(fh, start=2):
            cells = line.strip().split(",")
            if len(cells) != width + 1:
                raise ValidationError(f"{path}:{ln}: expected {width + 1} cells")
            ids.append(int(cells[0]))
            rows.append([float(c) for c in cells[1:]])
    emb = EmbeddingMatrix(
        ids=np.array(ids, np.int64),
        matrix=np.array(rows, np.float64).reshape(len(ids), width),
    )
    emb.validate()
    return emb


def _write_embeddings_csv(path, emb: EmbeddingMatrix) -> None:
    d = emb.matrix.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id," + ",".join(f"e{i}" for i in range(d)) + "\n")
        for nid, row in zip(emb.ids, emb.matrix):
            fh.write(str(int(nid)) + "," + ",".join(format_float(x) for x in row) + "\n")


def _anchor_ids(args, g: TextAttributedGraph) -> np.ndarray | None:
    if args.anchors == "all":
        return None
    wanted = []
    with open(args.anchors, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                wanted.append(int(line))
    lookup = {int(orig): idx for idx, orig in enumerate(g.original_ids)}
    missing = [w for w in wanted if w not in lookup]
    if missing:
        raise ValidationError(f"unknown anchor id {missing[0]}")
    return np.array([lookup[w] for w in wanted], np.int64)


def cmd_embed(args) -> int:
    cfg = load_config(args)
    g = load_binary(args.graph)
    vocab = Vocabulary.load(args.vocab)
    bundle, settings, meta = load_bundle(args.ckpt, vocab)
    nodes = _anchor_ids(args, g)
    emb = embed_nodes(
        bundle,
        g,
        vocab,
        nodes=nodes,
        alpha=settings.alpha,
        feature_eps=cfg.feature_eps,
        chunk=cfg.embed_chunk,
        provenance={"ckpt": sha256_file(args.ckpt), "graph": sha256_file(args.graph)},
        use_ppr=not settings.no_ppr,
    )
    _write_embeddings_csv(args.out, emb)
    print(f"wrote {args.out}: {emb.matrix.shape[0]} x {emb.matrix.shape[1]}")
    return 0


def _node_probe_data(g: TextAttributedGraph, emb: EmbeddingMatrix):
    if g.node_labels is None or g.split is None:
        raise ValidationError("node probe needs labels and a split on the graph")
    train_idx = g.split.train
    test_idx = g.split.test
    labels = g.node_labels
    if np.isnan(labels[np.concatenate([train_idx, test_idx])]).any():
        raise ValidationError("node probe split contains unlabeled nodes")
    feats = emb.rows_of(g.original_ids)
    return feats[train_idx], labels[train_idx], feats[test_idx], labels[test_idx]


def _edge_probe_data(g: TextAttributedGraph, emb: EmbeddingMatrix, seed: int, mode: str):
    pairs, labels = link_dataset(g, seed)
    feats_u = emb.rows_of(g.original_ids[pairs[:, 0]])
    feats_v = emb.rows_of(g.original_ids[pairs[:, 1]])
    feats = np.concatenate([feats_u, feats_v], axis=1) if mode == "concat" else feats_u * feats_v
    rng = rng_stream(seed, "linksplit")
    order = rng.permutation(labels.shape[0])
    cut = int(0.6 * labels.shape[0])
    tr, te = order[:cut], order[cut:]
    if len(np.unique(labels[tr])) < 2 or len(np.unique(labels[te])) < 2:
        raise ValidationError("link split degenerated to a single class")
    return feats[tr], labels[tr], feats[te], labels[te]


_METRICS = {"node": {"accuracy", "rmse"}, "edge": {"roc_auc", "accuracy"}}


def cmd_probe(args) -> int:
    cfg = load_config(args)
    g = load_binary(args.graph)
    emb = _load_embeddings_csv(args.emb)
    metric = args.metric
    if metric not in _METRICS.get(args.task, set()):
        raise ValidationError(f"metric {metric!r} does not fit task {args.task!r}")
    if args.task == "node":
        ftr, ltr, fte, lte = _node_probe_data(g, emb)
    else:
        ftr, ltr, fte, lte = _edge_probe_data(g, emb, cfg.seed, cfg.edge_mode)
    reports = run_probe_seeds(
        ftr, ltr, fte, lte, args.task, metric, seeds=range(cfg.probe_seeds),
        lr=cfg.probe_lr, max_steps=cfg.probe_steps, plateau=cfg.probe_plateau,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    mean, std = summarize(reports)
    print(f"{args.task} {metric}: {mean:.4f} +/- {std:.4f} over {len(reports)} seeds")
    return 0


def cmd_eval_all(args) -> int:
    """Pipeline: pretrain (unless given a checkpoint), embed, probe node+edge."""
    cfg = load_config(args)
    g = load_binary(args.graph)
    run_dir = Path(args.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.ckpt) if args.ckpt else run_dir / "ckpt.sstc"

    if not args.ckpt:
        pre_args = argparse.Namespace(
            graph=args.graph, out_dir=args.out_dir, resume=None, until=None,
            config=getattr(args, "config", None), set=getattr(args, "set", []),
            seed=getattr(args, "seed", None), ablate=getattr(args, "ablate", []),
        )
        cmd_pretrain(pre_args)

    vocab = Vocabulary.load(run_dir / "vocab.tsv") if (run_dir / "vocab.tsv").exists() else build_vocab(
        g.node_texts, min_count=cfg.vocab_min_count
    )
    bundle, settings, _ = load_bundle(ckpt, vocab)
    emb = embed_nodes(
        bundle, g, vocab,
        alpha=settings.alpha, feature_eps=cfg.feature_eps, chunk=cfg.embed_chunk,
        provenance={"ckpt": sha256_file(ckpt), "graph": sha256_file(args.graph)},
        use_ppr=not settings.no_ppr,
    )
    _write_embeddings_csv(run_dir / "embeddings.csv", emb)

    teacher = teacher_embed(bundle, g, vocab, no_gnn=settings.no_gnn)
    agreement = mean_row_cosine(teacher.matrix, emb.rows_of(g.original_ids))
    print(f"teacher-student mean cosine: {agreement:.4f}")

    lines = []
    all_reports = []
    ftr, ltr, fte, lte = _node_probe_data(g, emb)
    node_reports = run_probe_seeds(
        ftr, ltr, fte, lte, "node", "accuracy", seeds=range(cfg.probe_seeds),
        lr=cfg.probe_lr, max_steps=cfg.probe_steps, plateau=cfg.probe_plateau,
    )
    all_reports += node_reports
    mean, std = summarize(node_reports)
    lines.append(f"node accuracy: {mean:.4f} +/- {std:.4f}")

    ftr, ltr, fte, lte = _edge_probe_data(g, emb, cfg.seed, cfg.edge_mode)
    edge_reports = run_probe_seeds(
        ftr, ltr, fte, lte, "edge", "roc_auc", seeds=range(cfg.probe_seeds),
        lr=cfg.probe_lr, max_steps=cfg.probe_steps, plateau=cfg.probe_plateau,
    )
    all_reports += edge_reports
    mean, std = summarize(edge_reports)
    lines.append(f"edge roc_auc: {mean:.4f} +/- {std:.4f}")

    with open(run_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for r in all_reports:
            fh.write(r.to_json() + "\n")
    for line in lines:
        print(line)
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sstag",
        description="Self-supervised text-attributed-graph pretraining at desk scale.",
    )
    parser.add_argument("--version", action="version", version=f"sstag {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default=None, help="key = value config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
            sp.add_argument("--seed", type=int, default=None)

    sp = subs.add_parser("ingest", help="JSONL nodes/edges -> binary graph")
    sp.add_argument("--nodes", required=True)
    sp.add_argument("--edges", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--directed", action="store_true")
    sp.set_defaults(func=cmd_ingest)

    sp = subs.add_parser("synth", help="clustered synthetic text graph")
    sp.add_argument("--out", required=True)
    sp.add_argument("--nodes", type=int, default=200)
    sp.add_argument("--clusters", type=int, default=2)
    sp.add_argument("--p-intra", default="0.2,0.06", dest="p_intra")
    sp.add_argument("--p-inter", type=float, default=0.02, dest="p_inter")
    sp.add_argument("--words", type=int, default=4)
    sp.add_argument("--pool-distinct", type=int, default=12)
    sp.add_argument("--pool-shared", type=int, default=12)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = subs.add_parser("ppr", help="personalized pagerank scores for one seed node")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--seed-node", type=int, required=True, dest="seed_node")
    sp.add_argument("--alpha", type=float, default=0.15)
    sp.add_argument("--epsilon", type=float, default=1e-6)
    sp.add_argument("--exact", action="store_true")
    sp.add_argument("--topk", type=int, default=None)
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_ppr)

    sp = subs.add_parser("sample", help="context subgraph around an anchor")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--task", choices=["node", "edge", "graph"], default="node")
    sp.add_argument("--anchor", type=int, default=0)
    sp.add_argument("--anchor2", type=int, default=None)
    sp.add_argument("--out", default="-")
    common(sp)
    sp.set_defaults(func=cmd_sample)

    sp = subs.add_parser("pretrain", help="joint teacher-student pretraining")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--out-dir", required=True, dest="out_dir")
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.add_argument("--until", type=int, default=None, help="stop after this step (partial run)")
    sp.add_argument("--ablate", action="append", default=[], choices=["mask", "st", "me", "gnn", "ppr"])
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = subs.add_parser("embed", help="student-only node embeddings")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--anchors", default="all", help="'all' or a file of node ids")
    common(sp)
    sp.set_defaults(func=cmd_embed)

    sp = subs.add_parser("probe", help="linear probe over frozen embeddings")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--emb", required=True)
    sp.add_argument("--task", choices=["node", "edge"], required=True)
    sp.add_argument("--metric", choices=["accuracy", "roc_auc", "rmse"], required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_probe)

    sp = subs.add_parser("eval-all", help="pretrain -> embed -> node+edge probes")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--out-dir", required=True, dest="out_dir")
    sp.add_argument("--ckpt", default=None, help="reuse an existing checkpoint")
    sp.add_argument("--ablate", action="append", default=[], choices=["mask", "st", "me", "gnn", "ppr"])
    common(sp)
    sp.set_defaults(func=cmd_eval_all)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ArtifactError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return 4
    except SstagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
