"""Tracker evaluation: MOTA, IDF1, identity switches, graph statistics.

The frame matching keeps yesterday's pairs alive while they still
clear the overlap gate, which is what makes identity switches a
property of the tracker rather than of assignment jitter. Identity
scores come from one global matching between predicted and annotated
ids instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from trackgraph.core import (
    BoundingBox,
    EdgeKind,
    NodeKind,
    TrackGraph,
    ValidationError,
    iou,
)
from trackgraph.ingest import DetectionSet


@dataclass(frozen=True)
class Correspondence:
    """Aggregate CLEAR counts from per-frame matching."""

    tp: int
    fp: int
    fn: int
    ids: int
    gt_count: int


def _require_ids(dets: DetectionSet, side: str) -> None:
    if any(d.gt_id is None for d in dets.detections):
        raise ValidationError(f"{side} detections carry no identities")


def _rows_by_frame(dets: DetectionSet) -> dict[int, list[tuple[int, BoundingBox]]]:
    rows: dict[int, list[tuple[int, BoundingBox]]] = {}
    for d in dets.detections:
        rows.setdefault(d.frame, []).append((d.gt_id, d.box))
    return rows


def match_frames(
    pred: DetectionSet, gt: DetectionSet, iou_gate: float = 0.5
) -> Correspondence:
    """Per-frame box matching with continuity preference.

    Pairs matched in the previous frame persist while their overlap
    stays at or above the gate; everything else goes through an optimal
    assignment on overlap, gated the same way. A switch is counted when
    a ground-truth id is matched to a different prediction id than the
    last time it was matched at all.
    """
    _require_ids(pred, "predicted")
    _require_ids(gt, "ground-truth")
    pred_rows = _rows_by_frame(pred)
    gt_rows = _rows_by_frame(gt)
    tp = fp = fn = switches = 0
    prev: dict[int, int] = {}
    last_pid: dict[int, int] = {}
    for t in sorted(set(pred_rows) | set(gt_rows)):
        gts = gt_rows.get(t, [])
        prs = pred_rows.get(t, [])
        free_g = set(range(len(gts)))
        free_p = set(range(len(prs)))
        matches: dict[int, int] = {}
        pid_col = {pid: j for j, (pid, _) in enumerate(prs)}
        for gi, (gid, gbox) in enumerate(gts):
            j = pid_col.get(prev.get(gid))
            if j is not None and j in free_p and iou(gbox, prs[j][1]) >= iou_gate:
                matches[gi] = j
                free_g.discard(gi)
                free_p.discard(j)
        if free_g and free_p:
            g_idx, p_idx = sorted(free_g), sorted(free_p)
            cost = np.asarray(
                [[1.0 - iou(gts[g][1], prs[p][1]) for p in p_idx] for g in g_idx]
            )
            for r, c in zip(*linear_sum_assignment(cost)):
                if 1.0 - cost[r, c] >= iou_gate:
                    matches[g_idx[r]] = p_idx[c]
        prev = {}
        for gi, j in matches.items():
            gid, pid = gts[gi][0], prs[j][0]
            tp += 1
            if gid in last_pid and last_pid[gid] != pid:
                switches += 1
            last_pid[gid] = pid
            prev[gid] = pid
        fn += len(gts) - len(matches)
        fp += len(prs) - len(matches)
    return Correspondence(tp, fp, fn, switches, gt_count=len(gt))


def mota(c: Correspondence) -> Optional[float]:
    """1 - (FN + FP + IDS)/GT; None when there is no ground truth."""
    if c.gt_count == 0:
        return None
    return 1.0 - (c.fn + c.fp + c.ids) / c.gt_count


def idf1(pred: DetectionSet, gt: DetectionSet, iou_gate: float = 0.5) -> float:
    """Identity F1 under the best global id-to-id matching.

    A (gt id, pred id) pair earns one unit per frame where both have a
    box and the boxes clear the gate; the matching maximises the total.
    Both sides empty scores 1.0 by convention.
    """
    _require_ids(pred, "predicted")
    _require_ids(gt, "ground-truth")
    if len(pred) == 0 and len(gt) == 0:
        return 1.0
    if len(pred) == 0 or len(gt) == 0:
        return 0.0
    gt_tracks: dict[int, dict[int, BoundingBox]] = {}
    for d in gt.detections:
        gt_tracks.setdefault(d.gt_id, {})[d.frame] = d.box
    pred_tracks: dict[int, dict[int, BoundingBox]] = {}
    for d in pred.detections:
        pred_tracks.setdefault(d.gt_id, {})[d.frame] = d.box
    gids, pids = sorted(gt_tracks), sorted(pred_tracks)
    overlap = np.zeros((len(gids), len(pids)))
    for a, g in enumerate(gids):
        frames = gt_tracks[g]
        for b, p in enumerate(pids):
            other = pred_tracks[p]
            overlap[a, b] = sum(
                1 for f, box in frames.items()
                if f in other and iou(box, other[f]) >= iou_gate
            )
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    idtp = float(overlap[rows, cols].sum())
    return 2.0 * idtp / (len(pred) + len(gt))


@dataclass(frozen=True)
class GraphStats:
    """Node and edge counts broken down by kind."""

    det_nodes: int
    traj_nodes: int
    det_det: int
    det_traj: int
    traj_traj: int

    @property
    def node_count(self) -> int:
        return self.det_nodes + self.traj_nodes

    @property
    def edge_count(self) -> int:
        return self.det_det + self.det_traj + self.traj_traj


def graph_stats(graph: TrackGraph) -> GraphStats:
    kinds = [e.kind for e in graph.edges]
    return GraphStats(
        det_nodes=sum(1 for n in graph.nodes if n.kind is NodeKind.DET),
        traj_nodes=sum(1 for n in graph.nodes if n.kind is NodeKind.TRAJ),
        det_det=kinds.count(EdgeKind.DET_DET),
        det_traj=kinds.count(EdgeKind.DET_TRAJ),
        traj_traj=kinds.count(EdgeKind.TRAJ_TRAJ),
    )


@dataclass(frozen=True)
class EvalReport:
    """Everything one evaluation run produces.

    mota is None when the ground truth is empty; coverage is None when
    no graph-level audit was requested.
    """

    mota: Optional[float]
    idf1: float
    tp: int
    fp: int
    fn: int
    ids: int
    gt_count: int
    edge_count: int = 0
    node_count: int = 0
    coverage: Optional[float] = None

    def __post_init__(self):
        if self.gt_count > 0:
            expect = 1.0 - (self.fn + self.fp + self.ids) / self.gt_count
            if self.mota is None or abs(self.mota - expect) > 1e-9:
                raise ValidationError("mota disagrees with its own counts")


def evaluate(
    pred: DetectionSet,
    gt: DetectionSet,
    iou_gate: float = 0.5,
    graph: Optional[TrackGraph] = None,
    coverage: Optional[float] = None,
) -> EvalReport:
    c = match_frames(pred, gt, iou_gate)
    stats = graph_stats(graph) if graph is not None else None
    return EvalReport(
        mota=mota(c),
        idf1=idf1(pred, gt, iou_gate),
        tp=c.tp,
        fp=c.fp,
        fn=c.fn,
        ids=c.ids,
        gt_count=c.gt_count,
        edge_count=stats.edge_count if stats else 0,
        node_count=stats.node_count if stats else 0,
        coverage=coverage,
    )


def _num(value: Optional[float]) -> str:
    return "undefined" if value is None else repr(float(value))


def render_report(r: EvalReport) -> str:
    """Human-readable two-column table."""
    rows = [
        ("MOTA", _num(r.mota)),
        ("IDF1", _num(r.idf1)),
        ("TP", str(r.tp)),
        ("FP", str(r.fp)),
        ("FN", str(r.fn)),
        ("IDS", str(r.ids)),
        ("GT", str(r.gt_count)),
        ("Nodes", str(r.node_count)),
        ("Edges", str(r.edge_count)),
        ("Coverage", _num(r.coverage)),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def render_keyvalues(r: EvalReport) -> str:
    """Machine-readable key=value lines, one metric per line."""
    rows = [
        ("mota", _num(r.mota)),
        ("idf1", _num(r.idf1)),
        ("tp", str(r.tp)),
        ("fp", str(r.fp)),
        ("fn", str(r.fn)),
        ("ids", str(r.ids)),
        ("gt_count", str(r.gt_count)),
        ("node_count", str(r.node_count)),
        ("edge_count", str(r.edge_count)),
        ("coverage", _num(r.coverage)),
    ]
    return "\n".join(f"{k}={v}" for k, v in rows) + "\n"
