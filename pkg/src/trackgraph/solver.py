"""Identity assignment from edge scores.

Rounding projects fractional edge scores onto flow-feasible binary
labelings: at most one positive outgoing and one positive incoming
edge per node, the discrete analogue of unit-capacity flow. A greedy
projection handles real instances; an exhaustive oracle checks it on
small ones. Connected components over the positive edges then assign
identities, refusing any merge that would put two time-overlapping
nodes in one group. Aggregation applies the machinery twice: once over
detection links, then over trajectory graphs built from the first
pass, re-scored with the same parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

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
from trackgraph.mpn import GraphTensors, MpnParams, forward, init_edge_features

_EXACT_EDGE_CAP = 20

ScoredEdge = tuple[int, int, float]


@dataclass(frozen=True)
class RoundingProblem:
    """Scored forward edges over n_nodes; scores live in [0, 1]."""

    n_nodes: int
    edges: tuple[ScoredEdge, ...] = ()

    def __post_init__(self):
        for u, v, s in self.edges:
            if u == v:
                raise ValidationError("rounding edge endpoints must differ")
            if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                raise ValidationError(f"edge ({u}, {v}) endpoint out of range")
            if not (0.0 <= s <= 1.0):
                raise ValidationError(f"edge score must lie in [0, 1], got {s}")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def scores(self) -> np.ndarray:
        return np.asarray([s for _, _, s in self.edges], dtype=np.float64)


@dataclass(frozen=True)
class Labeling:
    """Binary edge decisions, aligned with a problem's edge order."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.int64)
        if arr.ndim != 1 or (arr.size and not np.all((arr == 0) | (arr == 1))):
            raise ValidationError("labels must be a flat 0/1 array")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)


def _candidate_order(problem: RoundingProblem, eps: float) -> list[int]:
    """Edges above the threshold, strongest first, endpoint tie-break."""
    idx = [k for k, (_, _, s) in enumerate(problem.edges) if s > eps]
    idx.sort(key=lambda k: (-problem.edges[k][2], problem.edges[k][0], problem.edges[k][1]))
    return idx


def greedy_round(problem: RoundingProblem, eps: float = 0.5) -> Labeling:
    """Accept edges strongest-first while both degree budgets are free."""
    labels = np.zeros(problem.n_edges, dtype=np.int64)
    out_used = np.zeros(problem.n_nodes, dtype=bool)
    in_used = np.zeros(problem.n_nodes, dtype=bool)
    for k in _candidate_order(problem, eps):
        u, v, _ = problem.edges[k]
        if not out_used[u] and not in_used[v]:
            labels[k] = 1
            out_used[u] = True
            in_used[v] = True
    return Labeling(labels)


def exact_round(problem: RoundingProblem, eps: float = 0.5) -> Labeling:
    """Exhaustive optimum of the rounding objective; ties pick fewer ones.

    Only edges above the threshold may be labeled 1, mirroring the
    greedy candidate rule so the two are comparable. Minimizes
    sum of (1 - 2 * score) over the chosen edges, which is the variable
    part of ||labels - scores||^2. Capped at 20 edges.
    """
    if problem.n_edges > _EXACT_EDGE_CAP:
        raise ValidationError(
            f"exhaustive rounding handles at most {_EXACT_EDGE_CAP} edges, "
            f"got {problem.n_edges}"
        )
    cand = sorted(_candidate_order(problem, eps))  # storage order for lex ties
    costs = [1.0 - 2.0 * problem.edges[k][2] for k in cand]
    # best possible remaining improvement from position i onward
    neg_suffix = [0.0] * (len(cand) + 1)
    for i in range(len(cand) - 1, -1, -1):
        neg_suffix[i] = neg_suffix[i + 1] + min(costs[i], 0.0)

    best_cost = np.inf
    best: Optional[np.ndarray] = None
    labels = np.zeros(problem.n_edges, dtype=np.int64)
    out_used = np.zeros(problem.n_nodes, dtype=bool)
    in_used = np.zeros(problem.n_nodes, dtype=bool)

    def walk(i: int, cost: float):
        nonlocal best_cost, best
        if cost + neg_suffix[i] >= best_cost:
            return
        if i == len(cand):
            best_cost = cost
            best = labels.copy()
            return
        k = cand[i]
        u, v, _ = problem.edges[k]
        walk(i + 1, cost)  # zero branch first keeps ties lexicographic
        if not out_used[u] and not in_used[v]:
            labels[k] = 1
            out_used[u] = True
            in_used[v] = True
            walk(i + 1, cost + costs[i])
            labels[k] = 0
            out_used[u] = False
            in_used[v] = False

    walk(0, 0.0)
    assert best is not None  # the all-zero leaf always completes
    return Labeling(best)


def rounding_objective(problem: RoundingProblem, labeling: Labeling) -> float:
    """Squared distance between the binary labels and the scores."""
    if labeling.labels.shape != (problem.n_edges,):
        raise ValidationError("labeling does not align with the problem")
    diff = labeling.labels.astype(np.float64) - problem.scores()
    return float(np.dot(diff, diff))


def is_feasible(problem: RoundingProblem, labeling: Labeling) -> bool:
    """Degree check: at most one positive edge out of and into any node."""
    if labeling.labels.shape != (problem.n_edges,):
        return False
    out_deg = np.zeros(problem.n_nodes, dtype=np.int64)
    in_deg = np.zeros(problem.n_nodes, dtype=np.int64)
    for (u, v, _), y in zip(problem.edges, labeling.labels):
        if y:
            out_deg[u] += 1
            in_deg[v] += 1
    return bool(out_deg.max(initial=0) <= 1 and in_deg.max(initial=0) <= 1)


def connected_components_ids(
    spans: np.ndarray, edges: Sequence[ScoredEdge]
) -> np.ndarray:
    """Group nodes along positive edges without overlapping any spans.

    Edges merge strongest-first; a merge is refused when the two groups
    occupy a common frame. Returns one id per node, numbered by first
    appearance.
    """
    spans = np.asarray(spans, dtype=np.int64)
    n = spans.shape[0]
    parent = list(range(n))
    frames = [set(range(int(s), int(e) + 1)) for s, e in spans]

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    order = sorted(range(len(edges)), key=lambda k: (-edges[k][2], edges[k][0], edges[k][1]))
    for k in order:
        u, v, _ = edges[k]
        ra, rb = find(int(u)), find(int(v))
        if ra == rb or not frames[ra].isdisjoint(frames[rb]):
            continue
        parent[rb] = ra
        frames[ra] |= frames[rb]
        frames[rb] = set()
    roots = np.asarray([find(i) for i in range(n)], dtype=np.int64)
    return _relabel(roots)


def _relabel(ids: np.ndarray) -> np.ndarray:
    """Consecutive ids in order of first appearance."""
    mapping: dict[int, int] = {}
    out = np.empty(ids.shape[0], dtype=np.int64)
    for i, g in enumerate(ids.tolist()):
        mapping.setdefault(g, len(mapping))
        out[i] = mapping[g]
    return out


def build_traj_graph(
    detections: Sequence[Detection], det_ids: np.ndarray
) -> TrackGraph:
    """Trajectory-level graph: one node per id, edges where spans allow.

    Every id becomes a tracklet node, length one included; pairs with
    disjoint frame spans connect fully, earlier span first.
    """
    det_ids = np.asarray(det_ids, dtype=np.int64)
    if det_ids.shape != (len(detections),):
        raise ValidationError("det_ids must align with detections")
    members: dict[int, list[tuple[int, Detection]]] = {}
    for i, d in enumerate(detections):
        members.setdefault(int(det_ids[i]), []).append((i, d))
    nodes = []
    for p, g in enumerate(sorted(members)):
        nodes.append(
            CompositeNode(NodeKind.TRAJ, Tracklet.from_members(g, members[g]), p)
        )
    edges = []
    for a in range(len(nodes)):
        for b in range(a + 1, len(nodes)):
            ta, tb = nodes[a], nodes[b]
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
    return TrackGraph(tuple(nodes), tuple(edges))


ScoreFn = Callable[[Union[TrackGraph, GraphTensors]], np.ndarray]


def aggregate(
    graph: TrackGraph,
    params: Optional[MpnParams],
    eps: float = 0.5,
    traj_passes: int = 1,
    score_fn: Optional[ScoreFn] = None,
    pass1_mode: str = "rounding",
) -> np.ndarray:
    """Two-stage identity assignment over a part graph.

    Pass 1 scores every edge and rounds the detection-level links into
    identities ("rounding"), or adopts the coarse tracklets the builder
    already formed ("tracker"). Each trajectory pass then regroups the
    current identities into tracklet nodes, re-scores their graph with
    the same parameters, keeps edges above the threshold, and merges
    groups whose spans stay disjoint; it stops early when nothing
    merges. Returns one id per detection node, numbered by first
    appearance.
    """
    if pass1_mode not in ("rounding", "tracker"):
        raise ValidationError(f"unknown pass1_mode {pass1_mode!r}")
    if not (0.0 < eps <= 1.0):
        raise ValidationError(f"eps must lie in (0, 1], got {eps}")
    if traj_passes < 0:
        raise ValidationError("traj_passes must be non-negative")
    n_det = graph.n_det_nodes
    if n_det == 0:
        return np.zeros(0, dtype=np.int64)
    if any(node.kind is not NodeKind.DET for node in graph.nodes[:n_det]):
        raise ValidationError("detection nodes must come first in the graph")

    def run_scores(g: TrackGraph) -> np.ndarray:
        if score_fn is not None:
            return np.asarray(score_fn(g), dtype=np.float64)
        if params is None:
            raise ValidationError("aggregate needs params or a score_fn")
        return forward(g, params)[1]

    if pass1_mode == "rounding":
        scores = run_scores(graph)
        det_edges = tuple(
            (e.u, e.v, float(np.clip(scores[k], 0.0, 1.0)))
            for k, e in enumerate(graph.edges)
            if e.kind is EdgeKind.DET_DET
        )
        problem = RoundingProblem(n_det, det_edges)
        lab = greedy_round(problem, eps)
        positive = [det_edges[k] for k in np.flatnonzero(lab.labels)]
        det_spans = np.asarray([graph.nodes[i].span for i in range(n_det)])
        ids = connected_components_ids(det_spans, positive)
    else:
        ids = np.arange(n_det, dtype=np.int64)
        for node in graph.nodes[n_det:]:
            for i in node.payload.det_indices:
                if i >= 0:
                    ids[i] = n_det + node.node_index
        ids = _relabel(ids)

    dets_seq = [graph.nodes[i].payload for i in range(n_det)]
    for _ in range(traj_passes):
        tg = build_traj_graph(dets_seq, ids)
        if tg.n_traj_nodes <= 1:
            break
        t_scores = run_scores(tg)
        positive = [
            (e.u, e.v, float(np.clip(t_scores[k], 0.0, 1.0)))
            for k, e in enumerate(tg.edges)
            if t_scores[k] > eps
        ]
        t_spans = np.asarray([node.span for node in tg.nodes])
        gids = connected_components_ids(t_spans, positive)
        if len(set(gids.tolist())) == tg.n_traj_nodes:
            break
        new_ids = np.empty_like(ids)
        for p, node in enumerate(tg.nodes):
            for i in node.payload.det_indices:
                new_ids[i] = gids[p]
        ids = new_ids
    return _relabel(ids)
