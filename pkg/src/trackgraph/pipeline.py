"""Single-clip tracking pipeline, packaged as a callable.

Wires the stages end to end: windowed appearance affinity, frame-by-
frame association, part-graph assembly, edge scoring, and identity
aggregation. A ClipTracker instance closes over all knobs, so it plugs
straight into run_clipped as the per-clip pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from trackgraph.affinity import (
    WindowPlan,
    accumulate_affinity,
    cosine_scorer,
    oracle_scorer,
)
from trackgraph.builder import BuilderConfig, associate_frames, build_part_graph
from trackgraph.core import TrackGraph, Tracklet, ValidationError
from trackgraph.ingest import DetectionSet
from trackgraph.metrics import graph_stats
from trackgraph.mpn import MpnParams, handcrafted_scores, oracle_scores
from trackgraph.solver import aggregate

_MODES = ("auto", "mpn", "handcrafted", "oracle")


@dataclass(frozen=True)
class ClipTracker:
    """Configured tracker for one clip of detections.

    score_mode picks the edge scorer: "mpn" needs trained params,
    "handcrafted" uses the fixed-weight fallback, "oracle" scores from
    ground-truth ids, and "auto" resolves to "mpn" when params are
    present, "handcrafted" otherwise. The affinity stage follows suit:
    oracle mode gets identity similarities, every other mode cosine.
    """

    window: int = 32
    step: int = 16
    top_k: int = 5
    new_track_threshold: float = 0.3
    assign_threshold: float = 0.5
    traj_passes: int = 1
    threads: int = 1
    params: Optional[MpnParams] = None
    score_mode: str = "auto"
    pass1_mode: str = "rounding"
    # receives one GraphStats per processed clip when set
    stats_sink: Optional[list] = None

    def __post_init__(self):
        if self.score_mode not in _MODES:
            raise ValidationError(f"unknown score_mode {self.score_mode!r}")
        if self.score_mode == "mpn" and self.params is None:
            raise ValidationError("score_mode 'mpn' needs trained params")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")

    @property
    def mode(self) -> str:
        if self.score_mode != "auto":
            return self.score_mode
        return "mpn" if self.params is not None else "handcrafted"

    def build_graph(self, dets: DetectionSet) -> TrackGraph:
        """Affinity, association, and part-graph assembly for one clip."""
        frames = sorted(dets.by_frame)
        span = frames[-1] - frames[0] + 1
        window = min(self.window, span)
        plan = WindowPlan(span, window, min(self.step, window))
        scorer = oracle_scorer if self.mode == "oracle" else cosine_scorer
        aff = accumulate_affinity(
            dets, plan, scorer, origin=frames[0], threads=self.threads
        )
        cfg = BuilderConfig(self.top_k, self.new_track_threshold, self.window)
        tracklets, links = associate_frames(dets, aff, cfg)
        return build_part_graph(tracklets, links, dets, cfg)

    def __call__(self, dets: DetectionSet) -> list[Tracklet]:
        if len(dets) == 0:
            return []
        mode = self.mode
        graph = self.build_graph(dets)
        if self.stats_sink is not None:
            self.stats_sink.append(graph_stats(graph))
        score_fn = None
        if mode == "oracle":
            score_fn = oracle_scores
        elif mode == "handcrafted":
            score_fn = handcrafted_scores
        ids = aggregate(
            graph,
            self.params,
            eps=self.assign_threshold,
            traj_passes=self.traj_passes,
            score_fn=score_fn,
            pass1_mode=self.pass1_mode,
        )
        groups: dict[int, list[tuple[int, object]]] = {}
        for i, g in enumerate(ids.tolist()):
            groups.setdefault(g, []).append((i, dets.detections[i]))
        return [Tracklet.from_members(g, groups[g]) for g in sorted(groups)]
