"""Sliding-window appearance affinity over a clip.

A scorer produces a dense pairwise similarity block for the detections
inside one window. Blocks from overlapping windows are accumulated as
(sum, count) per detection pair and averaged on read, so a pair scored
in several windows gets the arithmetic mean of its window scores.
Similarity is only defined across frames; same-frame pairs are never
stored.

The per-step association cost combines the windowed appearance mean
against each tracklet member with the IoU of the tracklet's last box:
C = -max(appearance, iou), entries in [-1, 0].
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from trackgraph.core import BoundingBox, ValidationError, iou
from trackgraph.ingest import DetectionSet


@dataclass(frozen=True)
class WindowPlan:
    """Sliding-window layout: window length, stride, covered span."""

    clip_len: int
    window: int = 32
    step: int = 16

    def __post_init__(self):
        if self.step < 1 or self.window < 1 or self.clip_len < 1:
            raise ValidationError("window plan values must be positive")
        if self.step > self.window:
            raise ValidationError("step must not exceed the window")
        if self.window > self.clip_len:
            raise ValidationError("window must not exceed the clip")

    def starts(self, origin: int = 0) -> list[int]:
        """Window start frames; the last window reaches the clip end."""
        out = []
        s = 0
        while True:
            out.append(origin + s)
            if s + self.window >= self.clip_len:
                break
            s += self.step
        return out


@dataclass(frozen=True)
class Window:
    """One window's detections in global-index order."""

    start: int
    indices: np.ndarray  # positions in the parent detection set
    frames: np.ndarray
    embeddings: np.ndarray  # (n, D)
    gt_ids: tuple  # entries may be None


Scorer = Callable[[Window], np.ndarray]


def cosine_scorer(window: Window) -> np.ndarray:
    """(1 + cosine) / 2 between embeddings, mapped onto [0, 1]."""
    emb = window.embeddings
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0):
        raise ValidationError("cosine similarity undefined for zero embeddings")
    unit = emb / norms[:, None]
    sims = (1.0 + unit @ unit.T) / 2.0
    return np.clip(sims, 0.0, 1.0)


def oracle_scorer(window: Window) -> np.ndarray:
    """1 for same annotated identity, 0 otherwise."""
    ids = window.gt_ids
    if any(g is None for g in ids):
        raise ValidationError("oracle scorer needs identities on every detection")
    arr = np.asarray(ids)
    return (arr[:, None] == arr[None, :]).astype(np.float64)


class AffinityMatrix:
    """Sparse cross-frame similarity, averaged over contributing windows.

    Stored as sorted flat keys (i * n + j with i < j) with per-pair
    sums and window counts.
    """

    def __init__(self, n: int, keys: np.ndarray, sums: np.ndarray, counts: np.ndarray):
        self.n = int(n)
        order = np.argsort(keys, kind="stable")
        self._keys = keys[order]
        self._sums = sums[order]
        self._counts = counts[order]
        if np.any(self._counts < 1):
            raise ValidationError("every stored pair needs a positive count")

    def __len__(self) -> int:
        return self._keys.size

    @staticmethod
    def _flat(n: int, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        lo = np.minimum(i, j).astype(np.int64)
        hi = np.maximum(i, j).astype(np.int64)
        return lo * n + hi

    def lookup(self, i: np.ndarray, j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Averaged similarities for index pairs; second array flags hits."""
        i = np.atleast_1d(np.asarray(i, dtype=np.int64))
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        flat = self._flat(self.n, i, j)
        vals = np.zeros(flat.shape)
        if self._keys.size == 0:
            return vals, np.zeros(flat.shape, dtype=bool)
        pos = np.searchsorted(self._keys, flat)
        pos = np.clip(pos, 0, self._keys.size - 1)
        found = self._keys[pos] == flat
        hit = np.flatnonzero(found)
        vals[hit] = self._sums[pos[hit]] / self._counts[pos[hit]]
        return vals, found

    def value(self, i: int, j: int, default: float = 0.0) -> float:
        v, found = self.lookup(np.asarray([i]), np.asarray([j]))
        return float(v[0]) if found[0] else default

    def entry(self, i: int, j: int) -> tuple[float, int]:
        """(sum, count) of a stored pair; raises KeyError when absent."""
        flat = self._flat(self.n, np.asarray([i]), np.asarray([j]))
        pos = int(np.searchsorted(self._keys, flat[0]))
        if pos >= self._keys.size or self._keys[pos] != flat[0]:
            raise KeyError((i, j))
        return float(self._sums[pos]), int(self._counts[pos])

    def pairs(self) -> list[tuple[int, int]]:
        out = []
        for k in self._keys.tolist():
            out.append((k // self.n, k % self.n))
        return out


def _window_contributions(dets: DetectionSet, frames: np.ndarray, emb: np.ndarray,
                          start: int, plan: WindowPlan, scorer: Scorer):
    lo = np.searchsorted(frames, start, side="left")
    hi = np.searchsorted(frames, start + plan.window, side="left")
    idx = np.arange(lo, hi, dtype=np.int64)
    if idx.size < 2:
        return None
    wframes = frames[lo:hi]
    window = Window(
        start=start,
        indices=idx,
        frames=wframes,
        embeddings=emb[lo:hi],
        gt_ids=tuple(dets.detections[k].gt_id for k in idx),
    )
    block = scorer(window)
    if block.shape != (idx.size, idx.size):
        raise ValidationError(
            f"scorer returned shape {block.shape} for a window of {idx.size}"
        )
    if block.size and (block.min() < 0.0 or block.max() > 1.0):
        raise ValidationError("scorer similarities must lie in [0, 1]")
    # keep upper-triangle cross-frame pairs; detections are frame-sorted
    li, lj = np.triu_indices(idx.size, k=1)
    cross = wframes[li] != wframes[lj]
    li, lj = li[cross], lj[cross]
    keys = idx[li] * len(dets) + idx[lj]
    return keys, block[li, lj]


def accumulate_affinity(
    dets: DetectionSet,
    plan: WindowPlan,
    scorer: Scorer,
    origin: int = 0,
    threads: int = 1,
) -> AffinityMatrix:
    """Score every window and average overlapping contributions.

    origin anchors the first window; detections are expected to lie in
    [origin, origin + clip_len). Windows are independent, so they can
    be scored on a small thread pool; merging stays deterministic
    because contributions are reduced in window order.
    """
    n = len(dets)
    frames = np.asarray([d.frame for d in dets.detections], dtype=np.int64)
    if n and (frames.min() < origin or frames.max() >= origin + plan.clip_len):
        raise ValidationError("detections fall outside the planned clip")
    emb = dets.embeddings()
    starts = plan.starts(origin)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(
                    lambda s: _window_contributions(dets, frames, emb, s, plan, scorer),
                    starts,
                )
            )
    else:
        results = [
            _window_contributions(dets, frames, emb, s, plan, scorer) for s in starts
        ]
    parts = [r for r in results if r is not None]
    if not parts:
        empty = np.empty(0, dtype=np.int64)
        return AffinityMatrix(n, empty, np.empty(0), np.empty(0, dtype=np.int64))
    all_keys = np.concatenate([p[0] for p in parts])
    all_vals = np.concatenate([p[1] for p in parts])
    keys, inverse = np.unique(all_keys, return_inverse=True)
    sums = np.bincount(inverse, weights=all_vals, minlength=keys.size)
    counts = np.bincount(inverse, minlength=keys.size)
    return AffinityMatrix(n, keys, sums, counts.astype(np.int64))


def appearance_matrix(
    members_in_window: Sequence[Sequence[int]],
    frame_dets: np.ndarray,
    aff: AffinityMatrix,
) -> np.ndarray:
    """Mean windowed similarity of each track's members to each detection.

    Pairs the accumulator never saw contribute 0 to the mean, keeping
    rows in [0, 1].
    """
    n_t, n_d = len(members_in_window), len(frame_dets)
    out = np.zeros((n_t, n_d))
    fd = np.asarray(frame_dets, dtype=np.int64)
    for r, members in enumerate(members_in_window):
        m = np.asarray(members, dtype=np.int64)
        if m.size == 0:
            raise ValidationError("active track has no members in the window")
        ii = np.repeat(m, n_d)
        jj = np.tile(fd, m.size)
        vals, _ = aff.lookup(ii, jj)
        out[r] = vals.reshape(m.size, n_d).sum(axis=0) / m.size
    return out


def step_cost_matrix(
    members_in_window: Sequence[Sequence[int]],
    last_boxes: Sequence[BoundingBox],
    frame_dets: np.ndarray,
    frame_boxes: Sequence[BoundingBox],
    aff: AffinityMatrix,
) -> tuple[np.ndarray, np.ndarray]:
    """Association costs C = -max(appearance mean, last-box IoU).

    Returns (C, appearance matrix); the appearance rows also drive
    candidate-link selection downstream.
    """
    if len(members_in_window) != len(last_boxes):
        raise ValidationError("member lists and last boxes must align")
    m_bar = appearance_matrix(members_in_window, frame_dets, aff)
    m_hat = np.zeros_like(m_bar)
    for r, lb in enumerate(last_boxes):
        for c, fb in enumerate(frame_boxes):
            m_hat[r, c] = iou(lb, fb)
    return -np.maximum(m_bar, m_hat), m_bar
