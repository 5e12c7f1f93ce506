"""Domain types and geometric primitives shared by the whole pipeline.

Boxes live in pixel space as (left, top, width, height). Frames are
integer time indices starting at 0. A tracklet is a strictly
time-ordered run of detections, at most one per frame, carrying the
arithmetic mean of its members' appearance embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

DEFAULT_EMBED_DIM = 16

# relative tolerance used when validating cached aggregate values
MEAN_RTOL = 1e-9


class ValidationError(ValueError):
    """An input violates a documented invariant."""


class ParseError(ValidationError):
    """A text or binary interchange file is malformed."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class NumericError(RuntimeError):
    """A numeric computation produced non-finite values."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with positive extent."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"box values must be finite, got {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(
                f"box needs w > 0 and h > 0, got w={self.w} h={self.h}"
            )

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    # rounding can nudge the ratio past 1 for near-identical boxes
    return min(1.0, inter / (a.area + b.area - inter))


@dataclass(frozen=True)
class Detection:
    """One detector output: frame, box, confidence, appearance embedding.

    gt_id is the annotated identity when known, None otherwise.
    """

    frame: int
    box: BoundingBox
    confidence: float
    embedding: np.ndarray
    gt_id: Optional[int] = None

    def __post_init__(self):
        if self.frame < 0:
            raise ValidationError(f"frame must be >= 0, got {self.frame}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(
                f"confidence must lie in [0, 1], got {self.confidence}"
            )
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or emb.size == 0:
            raise ValidationError("embedding must be a non-empty 1-d vector")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("embedding must be finite")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class Tracklet:
    """A time-ordered run of detections under one identity.

    det_indices carries each member's position in the originating
    detection set; -1 marks synthesized (interpolated) members.
    """

    id: int
    detections: tuple[Detection, ...]
    mean_embedding: np.ndarray
    start_frame: int
    end_frame: int
    det_indices: tuple[int, ...]

    def __post_init__(self):
        if not self.detections:
            raise ValidationError("tracklet needs at least one detection")
        if len(self.det_indices) != len(self.detections):
            raise ValidationError("det_indices must align with detections")
        frames = [d.frame for d in self.detections]
        for a, b in zip(frames, frames[1:]):
            if b <= a:
                raise ValidationError(
                    f"tracklet frames must strictly increase, got {a} then {b}"
                )
        if self.start_frame != frames[0] or self.end_frame != frames[-1]:
            raise ValidationError("start/end frames disagree with members")
        mean = np.asarray(self.mean_embedding, dtype=np.float64)
        expect = np.mean([d.embedding for d in self.detections], axis=0)
        if mean.shape != expect.shape or not np.allclose(
            mean, expect, rtol=MEAN_RTOL, atol=1e-12
        ):
            raise ValidationError("mean_embedding is not the member mean")
        mean.setflags(write=False)
        object.__setattr__(self, "mean_embedding", mean)

    @classmethod
    def from_members(
        cls, track_id: int, members: Sequence[tuple[int, Detection]]
    ) -> "Tracklet":
        """Build a tracklet from (detection index, detection) pairs."""
        if not members:
            raise ValidationError("tracklet needs at least one detection")
        ordered = sorted(members, key=lambda m: m[1].frame)
        dets = tuple(d for _, d in ordered)
        idxs = tuple(i for i, _ in ordered)
        mean = np.mean([d.embedding for d in dets], axis=0)
        return cls(
            id=track_id,
            detections=dets,
            mean_embedding=mean,
            start_frame=dets[0].frame,
            end_frame=dets[-1].frame,
            det_indices=idxs,
        )

    def __len__(self) -> int:
        return len(self.detections)

    @property
    def first_box(self) -> BoundingBox:
        return self.detections[0].box

    @property
    def last_box(self) -> BoundingBox:
        return self.detections[-1].box


def temporal_iou(a: Tracklet, b: Tracklet) -> float:
    """Overlap of two tracklets' inclusive frame spans, in [0, 1].

    Counted in whole frames: spans [1,5] and [4,8] share 2 frames out
    of 8 covered, so 0.25. Zero exactly when the spans are disjoint.
    """
    inter = min(a.end_frame, b.end_frame) - max(a.start_frame, b.start_frame) + 1
    if inter <= 0:
        return 0.0
    len_a = a.end_frame - a.start_frame + 1
    len_b = b.end_frame - b.start_frame + 1
    return inter / (len_a + len_b - inter)


class NodeKind(Enum):
    DET = "det"
    TRAJ = "traj"


class EdgeKind(Enum):
    DET_DET = "det-det"
    DET_TRAJ = "det-traj"
    TRAJ_TRAJ = "traj-traj"


@dataclass(frozen=True)
class CompositeNode:
    """Graph node wrapping either a single detection or a tracklet."""

    kind: NodeKind
    payload: Union[Detection, Tracklet]
    node_index: int

    def __post_init__(self):
        if self.kind is NodeKind.DET and not isinstance(self.payload, Detection):
            raise ValidationError("det node must wrap a Detection")
        if self.kind is NodeKind.TRAJ and not isinstance(self.payload, Tracklet):
            raise ValidationError("traj node must wrap a Tracklet")

    @property
    def span(self) -> tuple[int, int]:
        """Inclusive (start, end) frame span."""
        if self.kind is NodeKind.DET:
            return (self.payload.frame, self.payload.frame)
        return (self.payload.start_frame, self.payload.end_frame)

    @property
    def first_box(self) -> BoundingBox:
        if self.kind is NodeKind.DET:
            return self.payload.box
        return self.payload.first_box

    @property
    def last_box(self) -> BoundingBox:
        if self.kind is NodeKind.DET:
            return self.payload.box
        return self.payload.last_box

    @property
    def feature(self) -> np.ndarray:
        """Appearance vector: the embedding, or the member mean for tracklets."""
        if self.kind is NodeKind.DET:
            return self.payload.embedding
        return self.payload.mean_embedding


@dataclass(frozen=True)
class Edge:
    """Directed link between two nodes; u's span ends before v's starts."""

    u: int
    v: int
    kind: EdgeKind
    init_features: np.ndarray
    score: Optional[float] = None
    label: Optional[int] = None

    def __post_init__(self):
        if self.u == self.v:
            raise ValidationError("edge endpoints must differ")
        feats = np.asarray(self.init_features, dtype=np.float64)
        if feats.shape != (6,):
            raise ValidationError(
                f"init_features must have shape (6,), got {feats.shape}"
            )
        if not np.all(np.isfinite(feats)):
            raise ValidationError("init_features must be finite")
        feats.setflags(write=False)
        object.__setattr__(self, "init_features", feats)
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"score must lie in [0, 1], got {self.score}")
        if self.label is not None and self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class TrackGraph:
    """Immutable composite-node graph.

    Every edge points forward in time (u's span ends strictly before
    v's span starts), so the graph is a DAG by construction.
    frame_index maps each frame to the nodes active at it.
    """

    nodes: tuple[CompositeNode, ...]
    edges: tuple[Edge, ...]
    frame_index: dict[int, tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        for pos, node in enumerate(self.nodes):
            if node.node_index != pos:
                raise ValidationError(
                    f"node at position {pos} carries index {node.node_index}"
                )
        seen = set()
        n = len(self.nodes)
        for e in self.edges:
            if not (0 <= e.u < n and 0 <= e.v < n):
                raise ValidationError(f"edge ({e.u}, {e.v}) endpoint out of range")
            key = (e.u, e.v, e.kind)
            if key in seen:
                raise ValidationError(f"duplicate edge {key}")
            seen.add(key)
            if self.nodes[e.u].span[1] >= self.nodes[e.v].span[0]:
                raise ValidationError(
                    f"edge ({e.u}, {e.v}) does not move forward in time"
                )
        index: dict[int, list[int]] = {}
        for node in self.nodes:
            lo, hi = node.span
            for f in range(lo, hi + 1):
                index.setdefault(f, []).append(node.node_index)
        frozen = {f: tuple(ix) for f, ix in sorted(index.items())}
        object.__setattr__(self, "frame_index", frozen)

    @property
    def n_det_nodes(self) -> int:
        return sum(1 for n in self.nodes if n.kind is NodeKind.DET)

    @property
    def n_traj_nodes(self) -> int:
        return sum(1 for n in self.nodes if n.kind is NodeKind.TRAJ)
