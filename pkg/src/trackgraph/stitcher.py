"""Long videos as overlapping clips: track each, then merge the seams.

Two per-clip tracks describe the same object when they picked the same
input detections in the frames both cover. That overlap ratio drives a
bipartite assignment between consecutive clips; matched tracks merge
under the earlier clip's id, with the later clip owning any frame both
claim. Remaining gaps are closed by linear interpolation at the end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from trackgraph.core import (
    BoundingBox,
    Detection,
    Tracklet,
    ValidationError,
)
from trackgraph.ingest import DetectionSet

# sentinel cost for pairs that must not match; real costs stay in [0, 1]
_FORBIDDEN = 1e6


@dataclass(frozen=True)
class ClipPlan:
    """Clip length and the overlap consecutive clips share."""

    clip_len: int = 512
    overlap: int = 256

    def __post_init__(self):
        if not 0 < self.overlap < self.clip_len:
            raise ValidationError(
                f"need 0 < overlap < clip_len, got {self.overlap}/{self.clip_len}"
            )

    @property
    def stride(self) -> int:
        return self.clip_len - self.overlap

    def starts(self, n_frames: int) -> list[int]:
        """Clip start frames; the last clip reaches the video end."""
        out = []
        s = 0
        while True:
            out.append(s)
            if s + self.clip_len >= n_frames:
                break
            s += self.stride
        return out


def _assignments(track: Tracklet) -> dict[int, int]:
    """frame -> chosen input detection index, interpolated members skipped."""
    return {d.frame: i for i, d in zip(track.det_indices, track.detections) if i >= 0}


def track_iou(a: Tracklet, b: Tracklet) -> float:
    """Overlap ratio of two tracks' detection choices.

    Intersection counts frames where both picked the same detection;
    union counts every (frame, detection) assignment once.
    """
    aa, bb = _assignments(a), _assignments(b)
    inter = sum(1 for f, i in aa.items() if bb.get(f) == i)
    union = len(aa) + len(bb) - inter
    return inter / union if union else 0.0


def _merge(a: Tracklet, b: Tracklet) -> Tracklet:
    """Union of members under a's id; b's choice wins a contested frame."""
    by_frame = {d.frame: (i, d) for i, d in zip(a.det_indices, a.detections)}
    by_frame.update({d.frame: (i, d) for i, d in zip(b.det_indices, b.detections)})
    return Tracklet.from_members(a.id, list(by_frame.values()))


def stitch(
    tracks_a: Sequence[Tracklet], tracks_b: Sequence[Tracklet]
) -> list[Tracklet]:
    """Merge two clips' track sets over their shared frame range.

    Pairs that never chose a common detection cannot match. The
    assignment minimises total (1 - overlap ratio) over the rest;
    unmatched tracks pass through, right-side ones under fresh ids.
    """
    if not tracks_a or not tracks_b:
        return list(tracks_a) + list(tracks_b)
    cost = np.full((len(tracks_a), len(tracks_b)), _FORBIDDEN)
    for i, ta in enumerate(tracks_a):
        for j, tb in enumerate(tracks_b):
            iou = track_iou(ta, tb)
            if iou > 0.0:
                cost[i, j] = 1.0 - iou
    rows, cols = linear_sum_assignment(cost)
    matched = [(r, c) for r, c in zip(rows, cols) if cost[r, c] < 1.5]

    out = []
    used_b = {c for _, c in matched}
    pair = dict(matched)
    for i, ta in enumerate(tracks_a):
        out.append(_merge(ta, tracks_b[pair[i]]) if i in pair else ta)
    next_id = max((t.id for t in out), default=-1) + 1
    for j, tb in enumerate(tracks_b):
        if j not in used_b:
            out.append(Tracklet.from_members(
                next_id, list(zip(tb.det_indices, tb.detections))))
            next_id += 1
    return out


def interpolate_gaps(track: Tracklet) -> Tracklet:
    """Fill missing frames between consecutive members linearly.

    Inserted detections carry the endpoint-minimum confidence, the mean
    embedding, and detection index -1. Gap-free tracks come back as-is.
    """
    dets = track.detections
    if all(b.frame - a.frame == 1 for a, b in zip(dets, dets[1:])):
        return track
    members = list(zip(track.det_indices, dets))
    for lo, hi in zip(dets, dets[1:]):
        gap = hi.frame - lo.frame
        conf = min(lo.confidence, hi.confidence)
        emb = 0.5 * (lo.embedding + hi.embedding)
        for k in range(1, gap):
            w = k / gap
            box = BoundingBox(
                lo.box.x + w * (hi.box.x - lo.box.x),
                lo.box.y + w * (hi.box.y - lo.box.y),
                lo.box.w + w * (hi.box.w - lo.box.w),
                lo.box.h + w * (hi.box.h - lo.box.h),
            )
            members.append((-1, Detection(lo.frame + k, box, conf, emb)))
    return Tracklet.from_members(track.id, members)


Pipeline = Callable[[DetectionSet], list[Tracklet]]


def run_clipped(
    dets: DetectionSet, plan: ClipPlan, pipeline: Pipeline
) -> list[Tracklet]:
    """Track a long video clip by clip and fold the results left to right.

    The pipeline sees each clip as its own detection set; its track
    indices are translated back to the full set before stitching. Gap
    interpolation runs once, on the final tracks.
    """
    merged: list[Tracklet] = []
    for s in plan.starts(dets.n_frames):
        sub, idx = dets.slice_frames(s, s + plan.clip_len)
        if len(sub) == 0:
            continue
        clip_tracks = [
            Tracklet.from_members(
                t.id, [(int(idx[i]), d) for i, d in zip(t.det_indices, t.detections)]
            )
            for t in pipeline(sub)
        ]
        merged = stitch(merged, clip_tracks) if merged else clip_tracks
    return [interpolate_gaps(t) for t in merged]
