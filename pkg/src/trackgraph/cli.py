"""Batch entry points: synthesize, track, train, evaluate, inspect.

Exit codes: 0 success, 2 for validation and parse failures, 3 for
runtime failures (I/O, numeric divergence). Every command is
deterministic under fixed seed and inputs.
"""

import argparse
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from trackgraph.builder import dump_graph, edge_coverage, fully_connected_edge_count
from trackgraph.config import RunConfig, load_config
from trackgraph.core import NumericError, ValidationError
from trackgraph.ingest import (
    ScenarioSpec,
    ground_truth,
    parse_mot,
    synthesize,
    write_detections,
    write_embeddings,
    write_mot,
)
from trackgraph.metrics import evaluate, graph_stats, render_keyvalues, render_report
from trackgraph.mpn import (
    TrainSchedule,
    edge_labels,
    init_params,
    load_params,
    save_params,
    train,
)
from trackgraph.pipeline import ClipTracker
from trackgraph.solver import build_traj_graph
from trackgraph.stitcher import ClipPlan, run_clipped


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="key=value config file; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, type=f.type, default=None, dest=f.name,
                       help=argparse.SUPPRESS)


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    return load_config(args.config, overrides)


def _tracker(cfg: RunConfig, **kw) -> ClipTracker:
    return ClipTracker(
        window=cfg.window,
        step=cfg.step,
        top_k=cfg.top_k,
        new_track_threshold=cfg.new_track_threshold,
        assign_threshold=cfg.assign_threshold,
        traj_passes=cfg.traj_passes,
        threads=cfg.threads,
        pass1_mode=cfg.pass1_mode,
        **kw,
    )


def _check_embed_dim(dets, expect: int, origin: str) -> None:
    if len(dets) and dets.embedding_dim != expect:
        raise ValidationError(
            f"embeddings are {dets.embedding_dim}-d but {origin} expects {expect}-d"
        )


def cmd_synth(args: argparse.Namespace) -> int:
    spec = ScenarioSpec(
        n_objects=args.objects,
        n_frames=args.frames,
        seed=args.seed,
        speed=args.speed,
        turn_prob=args.turn_prob,
        miss_rate=args.miss_rate,
        embedding_noise_sigma=args.sigma,
    )
    dets = synthesize(spec)
    gt = ground_truth(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "det.txt", dets)
    write_embeddings(out / "det.emb", dets.embeddings())
    write_detections(out / "gt.txt", gt)
    print(f"objects={spec.n_objects}")
    print(f"frames={spec.n_frames}")
    print(f"detections={len(dets)}")
    print(f"out={out}")
    return 0


def cmd_track(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    dets = parse_mot(args.det, args.emb, cfg.embed_dim)
    params = load_params(args.params) if args.params else None
    if args.require_params and params is None:
        raise ValidationError("--require-params is set but no --params were given")
    if params is not None:
        _check_embed_dim(dets, params.embed_dim, "the checkpoint")
    sink: list = []
    tracker = _tracker(
        cfg,
        params=params,
        score_mode="oracle" if args.oracle else "auto",
        stats_sink=sink,
    )
    started = time.perf_counter()
    tracks = run_clipped(dets, ClipPlan(cfg.clip_len, cfg.overlap), tracker)
    elapsed = time.perf_counter() - started
    write_mot(args.out, tracks)
    print(f"clips={len(sink)}")
    print(f"node_count={sum(s.node_count for s in sink)}")
    print(f"edge_count={sum(s.edge_count for s in sink)}")
    print(f"tracks={len(tracks)}")
    print(f"seconds={elapsed:.3f}")
    return 0


def _labelled_graphs(dets, cfg: RunConfig):
    """Per-clip training graphs: part graphs plus fragment-level graphs."""
    tracker = _tracker(cfg)
    primary, secondary = [], []
    for s in ClipPlan(cfg.clip_len, cfg.overlap).starts(dets.n_frames):
        sub, _ = dets.slice_frames(s, s + cfg.clip_len)
        if len(sub) == 0:
            continue
        graph = tracker.build_graph(sub)
        if graph.edges:
            primary.append((graph, edge_labels(graph)))
        n_det = graph.n_det_nodes
        ids = np.arange(n_det, dtype=np.int64)
        for node in graph.nodes[n_det:]:
            for i in node.payload.det_indices:
                if i >= 0:
                    ids[i] = n_det + node.node_index
        frag = build_traj_graph([graph.nodes[i].payload for i in range(n_det)], ids)
        if frag.edges:
            secondary.append((frag, edge_labels(frag)))
    return primary, secondary


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    dets = parse_mot(args.gt, args.emb, cfg.embed_dim)
    if not dets.has_gt:
        raise ValidationError("training needs an identity on every detection")
    _check_embed_dim(dets, cfg.embed_dim, "the configuration")
    primary, secondary = _labelled_graphs(dets, cfg)
    params = init_params(
        cfg.seed, cfg.embed_dim, cfg.node_dim, cfg.edge_dim, cfg.hidden_dim, cfg.steps
    )
    schedule = TrainSchedule(
        cfg.iterations, cfg.learning_rate, cfg.weight_decay, cfg.gamma, cfg.unfreeze_at
    )
    result = train(primary, secondary, params, schedule)
    save_params(args.out, result.params)
    losses = [loss for _, loss in result.history]
    print(f"graphs={len(primary)}+{len(secondary)}")
    print(f"iterations={len(losses)}")
    if losses:
        print(f"first_loss={losses[0]:.6f}")
        print(f"last_loss={losses[-1]:.6f}")
        print(f"min_loss={min(losses):.6f}")
    print(f"out={args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    pred = parse_mot(args.pred)
    gt = parse_mot(args.gt)
    if len(pred) and len(gt):
        pf = [d.frame for d in pred.detections]
        gf = [d.frame for d in gt.detections]
        if (min(pf), max(pf)) != (min(gf), max(gf)):
            print(
                f"warning: frame ranges differ "
                f"(pred {min(pf)}..{max(pf)}, gt {min(gf)}..{max(gf)})",
                file=sys.stderr,
            )
    report = evaluate(pred, gt, cfg.iou_gate)
    print(render_report(report))
    print(render_keyvalues(report), end="")
    return 0


def cmd_graph_stats(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    dets = parse_mot(args.det, args.emb, cfg.embed_dim)
    graph = _tracker(cfg).build_graph(dets)
    s = graph_stats(graph)
    print(f"det_nodes={s.det_nodes}")
    print(f"traj_nodes={s.traj_nodes}")
    print(f"node_count={s.node_count}")
    print(f"det_det={s.det_det}")
    print(f"det_traj={s.det_traj}")
    print(f"traj_traj={s.traj_traj}")
    print(f"edge_count={s.edge_count}")
    full = fully_connected_edge_count(dets)
    print(f"fully_connected={full}")
    if full:
        print(f"edge_ratio={s.edge_count / full:.6f}")
    if dets.has_gt:
        print(f"coverage={edge_coverage(graph, dets):.6f}")
    if args.dump:
        print(dump_graph(graph), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trackgraph",
        description="Composite-graph multi-object tracking over MOT text files.",
    )
    sub = parser.add_subparsers(required=True, metavar="command")

    p = sub.add_parser("synth", help="write a synthetic detection/gt pair")
    p.add_argument("--objects", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speed", type=float, default=4.0)
    p.add_argument("--turn-prob", type=float, default=0.0)
    p.add_argument("--miss-rate", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=0.0,
                   help="embedding noise standard deviation")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="run the tracker over a detection file")
    p.add_argument("--det", required=True)
    p.add_argument("--emb", default=None, help="embedding sidecar")
    p.add_argument("--params", default=None, help="trained checkpoint")
    p.add_argument("--require-params", action="store_true")
    p.add_argument("--oracle", action="store_true",
                   help="score edges from ground-truth ids in the input")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train", help="fit edge-scoring parameters")
    p.add_argument("--gt", required=True, help="labelled MOT file")
    p.add_argument("--emb", default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a result file against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("graph-stats", help="build and inspect the part graph")
    p.add_argument("--det", required=True)
    p.add_argument("--emb", default=None)
    p.add_argument("--dump", action="store_true", help="print the full graph")
    _add_config_flags(p)
    p.set_defaults(func=cmd_graph_stats)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
