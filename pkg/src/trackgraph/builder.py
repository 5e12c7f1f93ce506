"""Partially connected composite-node graph construction.

Frame-by-frame association turns raw detections into coarse tracklets
and emits candidate detection links along the way. The part graph then
keeps every detection as a node, promotes tracklets with two or more
members to trajectory nodes, links isolated detections to their
temporally nearest trajectory nodes, and fully connects trajectory
pairs whose frame spans do not overlap. Every edge points forward in
time, so the result is a DAG by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from trackgraph.affinity import AffinityMatrix, step_cost_matrix
from trackgraph.core import (
    CompositeNode,
    Detection,
    Edge,
    EdgeKind,
    NodeKind,
    TrackGraph,
    Tracklet,
    ValidationError,
    temporal_iou,
)
from trackgraph.ingest import DetectionSet
from trackgraph.mpn import init_edge_features


@dataclass(frozen=True)
class BuilderConfig:
    """Association knobs: candidate fan-out, acceptance bar, history depth."""

    top_k: int = 5
    new_track_threshold: float = 0.3
    lookback: int = 32

    def __post_init__(self):
        if self.top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {self.top_k}")
        if not (0.0 < self.new_track_threshold < 1.0):
            raise ValidationError(
                f"new_track_threshold must lie in (0, 1), got {self.new_track_threshold}"
            )
        if self.lookback < 1:
            raise ValidationError(f"lookback must be >= 1, got {self.lookback}")


def _det_node(index: int, det: Detection) -> CompositeNode:
    return CompositeNode(NodeKind.DET, det, index)


def associate_frames(
    dets: DetectionSet, aff: AffinityMatrix, cfg: BuilderConfig
) -> tuple[list[Tracklet], list[Edge]]:
    """Greedy-over-time association into tracklets plus candidate links.

    Detections of the first populated frame each start a tracklet. Every
    later frame runs an optimal assignment against the tracklets that
    still have a member inside the lookback window; a pairing whose best
    score (mean windowed appearance or last-box overlap) falls below the
    threshold is dropped and the detection starts a new tracklet. Each
    accepted match emits detection links from the tracklet's last member
    to the assigned detection and to the top-k appearance candidates of
    that frame, which caps the link count at len(dets) * (top_k + 1).
    """
    if len(dets) == 0:
        return [], []
    tracks: list[list[tuple[int, Detection]]] = []
    links: list[Edge] = []
    frames = sorted(dets.by_frame)
    first = frames[0]
    for t in frames:
        idxs = dets.by_frame[t]
        if t == first:
            tracks.extend([(int(j), dets.detections[int(j)])] for j in idxs)
            continue
        lo = max(first, t - cfg.lookback)
        active = [k for k, mem in enumerate(tracks) if lo <= mem[-1][1].frame < t]
        taken: set[int] = set()
        if active:
            members = [
                [i for i, d in tracks[k] if lo <= d.frame < t] for k in active
            ]
            last_boxes = [tracks[k][-1][1].box for k in active]
            frame_boxes = [dets.detections[int(j)].box for j in idxs]
            cost, m_bar = step_cost_matrix(members, last_boxes, idxs, frame_boxes, aff)
            for r, c in zip(*linear_sum_assignment(cost)):
                if -cost[r, c] < cfg.new_track_threshold:
                    continue
                track = tracks[active[r]]
                u_idx, u_det = track[-1]
                order = np.argsort(-m_bar[r], kind="stable")[: cfg.top_k]
                targets = {int(idxs[c])} | {int(idxs[c2]) for c2 in order}
                for v_idx in sorted(targets):
                    links.append(
                        Edge(
                            u_idx,
                            v_idx,
                            EdgeKind.DET_DET,
                            init_edge_features(
                                _det_node(u_idx, u_det),
                                _det_node(v_idx, dets.detections[v_idx]),
                            ),
                        )
                    )
                track.append((int(idxs[c]), dets.detections[int(idxs[c])]))
                taken.add(int(c))
        tracks.extend(
            [(int(j), dets.detections[int(j)])]
            for c, j in enumerate(idxs)
            if c not in taken
        )
    tracklets = [Tracklet.from_members(k, mem) for k, mem in enumerate(tracks)]
    return tracklets, links


def build_part_graph(
    tracklets: Sequence[Tracklet],
    detdet_links: Sequence[Edge],
    dets: DetectionSet,
    cfg: Optional[BuilderConfig] = None,
) -> TrackGraph:
    """Assemble the partially connected graph over detections and tracklets.

    Node indices follow the detection set (detection i becomes node i);
    tracklets with at least two members append after them. Singleton
    detections link to the nearest trajectory node ending before them
    and the nearest one starting after them, both within the lookback.
    Trajectory pairs connect exactly when their spans are disjoint,
    earlier span first.
    """
    cfg = cfg or BuilderConfig()
    det_nodes = [_det_node(i, d) for i, d in enumerate(dets.detections)]
    promoted = [t for t in tracklets if len(t) >= 2]
    traj_nodes = [
        CompositeNode(NodeKind.TRAJ, t, len(det_nodes) + p)
        for p, t in enumerate(promoted)
    ]
    absorbed = {i for t in promoted for i in t.det_indices}
    edges = list(detdet_links)
    for i, d in enumerate(dets.detections):
        if i in absorbed:
            continue
        before = [
            tn
            for tn in traj_nodes
            if tn.span[1] < d.frame and d.frame - tn.span[1] <= cfg.lookback
        ]
        if before:
            # latest end wins; ties fall to the lower node index
            tn = max(before, key=lambda tn: (tn.span[1], -tn.node_index))
            edges.append(
                Edge(
                    tn.node_index,
                    i,
                    EdgeKind.DET_TRAJ,
                    init_edge_features(tn, det_nodes[i]),
                )
            )
        after = [
            tn
            for tn in traj_nodes
            if tn.span[0] > d.frame and tn.span[0] - d.frame <= cfg.lookback
        ]
        if after:
            tn = min(after, key=lambda tn: (tn.span[0], tn.node_index))
            edges.append(
                Edge(
                    i,
                    tn.node_index,
                    EdgeKind.DET_TRAJ,
                    init_edge_features(det_nodes[i], tn),
                )
            )
    for a in range(len(traj_nodes)):
        for b in range(a + 1, len(traj_nodes)):
            ta, tb = traj_nodes[a], traj_nodes[b]
            if temporal_iou(ta.payload, tb.payload) != 0.0:
                continue
            u, v = (ta, tb) if ta.span[1] < tb.span[0] else (tb, ta)
            edges.append(
                Edge(
                    u.node_index,
                    v.node_index,
                    EdgeKind.TRAJ_TRAJ,
                    init_edge_features(u, v),
                )
            )
    return TrackGraph(tuple(det_nodes + traj_nodes), tuple(edges))


def edge_coverage(graph: TrackGraph, dets: DetectionSet) -> float:
    """Fraction of consecutive same-identity pairs the graph can realise.

    A pair counts when its detections sit inside one trajectory node,
    or when an edge joins the nodes standing in for them (the detection
    node itself, or the trajectory node absorbing it). Expects a graph
    whose detection nodes are indexed like dets. Vacuously 1.0 with no
    pairs.
    """
    if not dets.has_gt:
        raise ValidationError("coverage needs ground-truth identities")
    in_traj: dict[int, int] = {}
    for node in graph.nodes:
        if node.kind is NodeKind.TRAJ:
            for i in node.payload.det_indices:
                if i >= 0:
                    in_traj[i] = node.node_index
    by_id: dict[int, list[int]] = {}
    for i, d in enumerate(dets.detections):
        by_id.setdefault(d.gt_id, []).append(i)
    pairs = [
        p for idxs in by_id.values() for p in zip(idxs, idxs[1:])
    ]
    if not pairs:
        return 1.0
    edge_set = {(e.u, e.v) for e in graph.edges}

    def covered(i: int, j: int) -> bool:
        ti, tj = in_traj.get(i), in_traj.get(j)
        if ti is not None and ti == tj:
            return True
        us = {i} if ti is None else {i, ti}
        vs = {j} if tj is None else {j, tj}
        return any((a, b) in edge_set for a in us for b in vs)

    return sum(covered(i, j) for i, j in pairs) / len(pairs)


def fully_connected_edge_count(dets: DetectionSet) -> int:
    """Closed-form edge count of the fully connected cross-frame graph."""
    n = len(dets)
    ssq = sum(int(ix.size) ** 2 for ix in dets.by_frame.values())
    return (n * n - ssq) // 2


def dump_graph(graph: TrackGraph) -> str:
    """Line-oriented dump: all nodes, then all edges."""
    lines = []
    for node in graph.nodes:
        if node.kind is NodeKind.DET:
            d = node.payload
            b = d.box
            lines.append(
                f"node {node.node_index} det frame={d.frame} "
                f"box={b.x:g},{b.y:g},{b.w:g},{b.h:g} conf={d.confidence:g}"
            )
        else:
            t = node.payload
            lines.append(
                f"node {node.node_index} traj start={t.start_frame} "
                f"end={t.end_frame} members={len(t)}"
            )
    for e in graph.edges:
        feats = ",".join(f"{x:g}" for x in e.init_features)
        score = "none" if e.score is None else f"{e.score:g}"
        lines.append(f"edge {e.u} {e.v} {e.kind.value} f={feats} score={score}")
    return "\n".join(lines) + ("\n" if lines else "")
