"""Time-aware message passing over a track graph, with analytic gradients.

Edges carry a 6-feature descriptor (height-normalised offsets, log size
ratios, frame gap, appearance distance). Node states start as an affine
projection of the appearance embedding; edge states start as an encoded
feature vector. Each step updates every edge from its endpoints, then
every node from directional message sums: messages arriving from
earlier neighbours pass through the past MLP, those from later
neighbours through the future MLP, and the node MLP fuses the two sums.
Edge states keep their initial encoding concatenated alongside, so step
0 information survives every update. A logistic classifier on the final
edge state yields link scores in (0, 1).

All forward passes are mirrored by hand-written reverse-mode backward
passes; gradients are exact, not approximated.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from trackgraph.core import (
    CompositeNode,
    NumericError,
    ParseError,
    TrackGraph,
    ValidationError,
)

_CKPT_MAGIC = b"TGCKPT01"
_SCORE_CLAMP = 1e-7


# ----------------------------------------------------------- edge features


def init_edge_features(u: CompositeNode, v: CompositeNode) -> np.ndarray:
    """Raw descriptor of a forward link u -> v.

    Uses u's last box against v's first box: offsets normalised by the
    summed heights, log width/height ratios, frame gap, and euclidean
    distance of the (mean) appearance embeddings. Detections act as
    length-1 tracklets.
    """
    bu = u.last_box
    bv = v.first_box
    gap = v.span[0] - u.span[1]
    if gap <= 0:
        raise ValidationError("edge features need u to end before v starts")
    denom = bu.h + bv.h
    fu, fv = u.feature, v.feature
    if fu.shape != fv.shape:
        raise ValidationError("endpoint embeddings disagree in dimension")
    return np.asarray(
        [
            2.0 * (bv.x - bu.x) / denom,
            2.0 * (bv.y - bu.y) / denom,
            np.log(bv.w / bu.w),
            np.log(bv.h / bu.h),
            float(gap),
            float(np.linalg.norm(fu - fv)),
        ]
    )


# ------------------------------------------------------------------- MLPs


@dataclass
class MlpParams:
    """Fully connected stack; rectifier between layers, optional logistic out."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "linear"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("weights and biases must align and be non-empty")
        if self.output not in ("linear", "logistic"):
            raise ValidationError(f"unknown output activation {self.output!r}")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValidationError("layer shapes disagree")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


def mlp_init(rng: np.random.Generator, dims: Sequence[int], output: str = "linear") -> MlpParams:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)) per layer."""
    weights, biases = [], []
    for d_in, d_out in zip(dims, dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return MlpParams(weights, biases, output)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mlp_forward(p: MlpParams, x: np.ndarray):
    """Returns (output, cache) with per-layer inputs and pre-activations."""
    acts = [x]
    pres = []
    last = len(p.weights) - 1
    for l, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = acts[-1] @ w + b
        pres.append(z)
        if l < last:
            acts.append(np.maximum(z, 0.0))
        elif p.output == "logistic":
            acts.append(_sigmoid(z))
        else:
            acts.append(z)
    return acts[-1], (acts, pres)


def mlp_backward(p: MlpParams, cache, dout: np.ndarray):
    """Returns (d_input, (dweights, dbiases)) for a cached forward pass."""
    acts, pres = cache
    last = len(p.weights) - 1
    dws = [None] * len(p.weights)
    dbs = [None] * len(p.biases)
    d = dout
    for l in range(last, -1, -1):
        if l == last:
            if p.output == "logistic":
                s = acts[-1]
                dz = d * s * (1.0 - s)
            else:
                dz = d
        else:
            dz = d * (pres[l] > 0)
        dws[l] = acts[l].T @ dz
        dbs[l] = dz.sum(axis=0)
        d = dz @ p.weights[l].T
    return d, (dws, dbs)


# ------------------------------------------------------------- parameters


@dataclass
class MpnParams:
    """All learnable parameters plus the architecture constants."""

    node_proj: MlpParams
    edge_encoder: MlpParams
    edge_mlp: MlpParams
    past_mlp: MlpParams
    future_mlp: MlpParams
    node_mlp: MlpParams
    classifier_mlp: MlpParams
    embed_dim: int
    node_dim: int
    edge_dim: int
    steps: int

    _COMPONENTS = (
        "node_proj",
        "edge_encoder",
        "edge_mlp",
        "past_mlp",
        "future_mlp",
        "node_mlp",
        "classifier_mlp",
    )

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        d_v, d_e = self.node_dim, self.edge_dim
        pair_in = 2 * d_v + 2 * d_e
        checks = (
            (self.node_proj, self.embed_dim, d_v),
            (self.edge_encoder, 6, d_e),
            (self.edge_mlp, pair_in, d_e),
            (self.past_mlp, pair_in, d_v),
            (self.future_mlp, pair_in, d_v),
            (self.node_mlp, 2 * d_v, d_v),
            (self.classifier_mlp, 2 * d_e, 1),
        )
        for mlp, d_in, d_out in checks:
            if mlp.in_dim != d_in or mlp.out_dim != d_out:
                raise ValidationError(
                    f"component expects {d_in}->{d_out}, got "
                    f"{mlp.in_dim}->{mlp.out_dim}"
                )
        if self.classifier_mlp.output != "logistic":
            raise ValidationError("classifier must end in a logistic unit")

    def components(self) -> list[tuple[str, MlpParams]]:
        return [(name, getattr(self, name)) for name in self._COMPONENTS]

    def arrays(self) -> list[np.ndarray]:
        """Every parameter array, in a fixed traversal order."""
        out = []
        for _, mlp in self.components():
            for w, b in zip(mlp.weights, mlp.biases):
                out.append(w)
                out.append(b)
        return out


def init_params(
    seed: int,
    embed_dim: int = 16,
    node_dim: int = 32,
    edge_dim: int = 16,
    hidden: int = 64,
    steps: int = 12,
) -> MpnParams:
    rng = np.random.default_rng(seed)
    pair_in = 2 * node_dim + 2 * edge_dim
    return MpnParams(
        node_proj=mlp_init(rng, [embed_dim, node_dim]),
        edge_encoder=mlp_init(rng, [6, hidden, edge_dim]),
        edge_mlp=mlp_init(rng, [pair_in, hidden, edge_dim]),
        past_mlp=mlp_init(rng, [pair_in, hidden, node_dim]),
        future_mlp=mlp_init(rng, [pair_in, hidden, node_dim]),
        node_mlp=mlp_init(rng, [2 * node_dim, hidden, node_dim]),
        classifier_mlp=mlp_init(rng, [2 * edge_dim, hidden, 1], output="logistic"),
        embed_dim=embed_dim,
        node_dim=node_dim,
        edge_dim=edge_dim,
        steps=steps,
    )


def zero_params_like(params: MpnParams) -> MpnParams:
    out = copy.deepcopy(params)
    for arr in out.arrays():
        arr[...] = 0.0
    return out


# ---------------------------------------------------------- graph tensors


@dataclass(frozen=True)
class GraphTensors:
    """Array view of a track graph for the network."""

    u: np.ndarray  # (m,) source node index, earlier in time
    v: np.ndarray  # (m,) target node index
    feats: np.ndarray  # (m, 6) raw edge descriptors
    node_feat: np.ndarray  # (n, D) node appearance vectors
    spans: np.ndarray  # (n, 2) inclusive frame spans

    @property
    def n_nodes(self) -> int:
        return self.node_feat.shape[0]

    @property
    def n_edges(self) -> int:
        return self.u.size


def graph_tensors(graph: TrackGraph) -> GraphTensors:
    n = len(graph.nodes)
    if n == 0:
        raise ValidationError("graph has no nodes")
    node_feat = np.stack([node.feature for node in graph.nodes])
    spans = np.asarray([node.span for node in graph.nodes], dtype=np.int64)
    m = len(graph.edges)
    u = np.asarray([e.u for e in graph.edges], dtype=np.int64)
    v = np.asarray([e.v for e in graph.edges], dtype=np.int64)
    feats = (
        np.stack([e.init_features for e in graph.edges])
        if m
        else np.empty((0, 6))
    )
    return GraphTensors(u, v, feats, node_feat, spans)


def _as_tensors(graph: Union[TrackGraph, GraphTensors]) -> GraphTensors:
    if isinstance(graph, GraphTensors):
        return graph
    return graph_tensors(graph)


# ----------------------------------------------------------------- forward


@dataclass
class EmbeddingState:
    """Final node and edge states after message passing."""

    node: np.ndarray  # (n, d_v)
    edge: np.ndarray  # (m, 2 * d_e), initial encoding in the second half
    step: int


def init_node_features(graph: Union[TrackGraph, GraphTensors], params: MpnParams) -> np.ndarray:
    """Projected appearance vectors, the step-0 node states."""
    g = _as_tensors(graph)
    h0, _ = mlp_forward(params.node_proj, g.node_feat)
    return h0


def _forward(g: GraphTensors, params: MpnParams, keep_cache: bool):
    d_v, d_e = params.node_dim, params.edge_dim
    u, v = g.u, g.v
    h, proj_cache = mlp_forward(params.node_proj, g.node_feat)
    e0, enc_cache = mlp_forward(params.edge_encoder, g.feats)
    ebar = np.hstack([e0, e0])
    steps_cache = []
    for _ in range(params.steps):
        edge_in = np.hstack([h[u], ebar, h[v]])
        core, edge_cache = mlp_forward(params.edge_mlp, edge_in)
        ebar_new = np.hstack([core, e0])
        past_in = np.hstack([h[u], ebar_new, h[v]])
        m_past, past_cache = mlp_forward(params.past_mlp, past_in)
        fut_in = np.hstack([h[v], ebar_new, h[u]])
        m_fut, fut_cache = mlp_forward(params.future_mlp, fut_in)
        past_sum = np.zeros((g.n_nodes, d_v))
        fut_sum = np.zeros((g.n_nodes, d_v))
        np.add.at(past_sum, v, m_past)
        np.add.at(fut_sum, u, m_fut)
        h_new, node_cache = mlp_forward(params.node_mlp, np.hstack([past_sum, fut_sum]))
        if keep_cache:
            steps_cache.append((edge_cache, past_cache, fut_cache, node_cache))
        h, ebar = h_new, ebar_new
    scores, clf_cache = mlp_forward(params.classifier_mlp, ebar)
    scores = scores.ravel()
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(scores))):
        raise NumericError("message passing produced non-finite values")
    state = EmbeddingState(node=h, edge=ebar, step=params.steps)
    cache = (proj_cache, enc_cache, steps_cache, clf_cache) if keep_cache else None
    return state, scores, cache


def forward(
    graph: Union[TrackGraph, GraphTensors], params: MpnParams
) -> tuple[EmbeddingState, np.ndarray]:
    """Run message passing; returns final states and per-edge scores."""
    state, scores, _ = _forward(_as_tensors(graph), params, keep_cache=False)
    return state, scores


# -------------------------------------------------------------- focal loss


def focal_loss(scores: np.ndarray, labels: np.ndarray, gamma: float = 1.0) -> float:
    """Mean focal term -(1 - p_t)^gamma log p_t; gamma=0 recovers BCE."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must align")
    if scores.size == 0:
        return 0.0
    p = np.clip(scores, _SCORE_CLAMP, 1.0 - _SCORE_CLAMP)
    p_t = np.where(labels == 1, p, 1.0 - p)
    return float(np.mean(-((1.0 - p_t) ** gamma) * np.log(p_t)))


def focal_grad(scores: np.ndarray, labels: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """d(mean focal)/d(scores), zero where the clamp is active."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        return np.zeros_like(scores)
    p = np.clip(scores, _SCORE_CLAMP, 1.0 - _SCORE_CLAMP)
    p_t = np.where(labels == 1, p, 1.0 - p)
    if gamma == 0.0:
        dl_dpt = -1.0 / p_t
    else:
        dl_dpt = gamma * (1.0 - p_t) ** (gamma - 1.0) * np.log(p_t) - (
            (1.0 - p_t) ** gamma
        ) / p_t
    dpt_ds = np.where(labels == 1, 1.0, -1.0)
    active = (scores > _SCORE_CLAMP) & (scores < 1.0 - _SCORE_CLAMP)
    return np.where(active, dl_dpt * dpt_ds, 0.0) / scores.size


# ---------------------------------------------------------------- backward


def backward(
    graph: Union[TrackGraph, GraphTensors],
    params: MpnParams,
    labels: np.ndarray,
    gamma: float = 1.0,
) -> tuple[float, np.ndarray, MpnParams]:
    """Loss, scores, and exact parameter gradients (as an MpnParams tree)."""
    g = _as_tensors(graph)
    labels = np.asarray(labels)
    if labels.shape != (g.n_edges,):
        raise ValidationError("labels must align with graph edges")
    state, scores, cache = _forward(g, params, keep_cache=True)
    proj_cache, enc_cache, steps_cache, clf_cache = cache
    loss = focal_loss(scores, labels, gamma)

    grads = zero_params_like(params)
    d_v, d_e = params.node_dim, params.edge_dim
    u, v = g.u, g.v
    n, m = g.n_nodes, g.n_edges

    def add_mlp_grads(target: MlpParams, delta):
        dws, dbs = delta
        for w, dw in zip(target.weights, dws):
            w += dw
        for b, db in zip(target.biases, dbs):
            b += db

    dscores = focal_grad(scores, labels, gamma)
    debar_carry, clf_delta = mlp_backward(
        params.classifier_mlp, clf_cache, dscores[:, None]
    )
    add_mlp_grads(grads.classifier_mlp, clf_delta)

    dh = np.zeros((n, d_v))
    de0 = np.zeros((m, d_e))
    lo, hi = d_v, d_v + 2 * d_e
    for s in range(params.steps - 1, -1, -1):
        edge_cache, past_cache, fut_cache, node_cache = steps_cache[s]
        dnode_in, node_delta = mlp_backward(params.node_mlp, node_cache, dh)
        add_mlp_grads(grads.node_mlp, node_delta)
        dm_past = dnode_in[:, :d_v][v]
        dm_fut = dnode_in[:, d_v:][u]
        dpast_in, past_delta = mlp_backward(params.past_mlp, past_cache, dm_past)
        add_mlp_grads(grads.past_mlp, past_delta)
        dfut_in, fut_delta = mlp_backward(params.future_mlp, fut_cache, dm_fut)
        add_mlp_grads(grads.future_mlp, fut_delta)

        dh_prev = np.zeros((n, d_v))
        np.add.at(dh_prev, u, dpast_in[:, :d_v])
        np.add.at(dh_prev, v, dpast_in[:, hi:])
        np.add.at(dh_prev, v, dfut_in[:, :d_v])
        np.add.at(dh_prev, u, dfut_in[:, hi:])

        debar = debar_carry + dpast_in[:, lo:hi] + dfut_in[:, lo:hi]
        dcore = debar[:, :d_e]
        de0 += debar[:, d_e:]

        dedge_in, edge_delta = mlp_backward(params.edge_mlp, edge_cache, dcore)
        add_mlp_grads(grads.edge_mlp, edge_delta)
        np.add.at(dh_prev, u, dedge_in[:, :d_v])
        np.add.at(dh_prev, v, dedge_in[:, hi:])
        debar_carry = dedge_in[:, lo:hi]
        dh = dh_prev

    de0 += debar_carry[:, :d_e] + debar_carry[:, d_e:]
    _, enc_delta = mlp_backward(params.edge_encoder, enc_cache, de0)
    add_mlp_grads(grads.edge_encoder, enc_delta)
    _, proj_delta = mlp_backward(params.node_proj, proj_cache, dh)
    add_mlp_grads(grads.node_proj, proj_delta)
    return loss, scores, grads


# ------------------------------------------------------------------ labels


def _node_purity(node: CompositeNode):
    """(gt id, first index/frame, last) when all members share an id."""
    if node.kind.value == "det":
        d = node.payload
        return (d.gt_id, d.frame, d.frame) if d.gt_id is not None else None
    ids = {d.gt_id for d in node.payload.detections}
    if len(ids) != 1 or None in ids:
        return None
    return (ids.pop(), node.payload.start_frame, node.payload.end_frame)


def edge_labels(graph: TrackGraph) -> np.ndarray:
    """1 for edges linking consecutive same-identity fragments, else 0.

    An edge is positive when both endpoints are identity-pure, share
    the identity, and no observed detection of that identity falls
    strictly between u's last frame and v's first frame.
    """
    id_frames: dict[int, set[int]] = {}
    for node in graph.nodes:
        payload = node.payload
        dets = (payload,) if node.kind.value == "det" else payload.detections
        for d in dets:
            if d.gt_id is not None:
                id_frames.setdefault(d.gt_id, set()).add(d.frame)
    sorted_frames = {g: np.asarray(sorted(fs)) for g, fs in id_frames.items()}

    labels = np.zeros(len(graph.edges), dtype=np.int64)
    for k, e in enumerate(graph.edges):
        pu = _node_purity(graph.nodes[e.u])
        pv = _node_purity(graph.nodes[e.v])
        if pu is None or pv is None or pu[0] != pv[0]:
            continue
        frames = sorted_frames[pu[0]]
        between = np.count_nonzero((frames > pu[2]) & (frames < pv[1]))
        if between == 0:
            labels[k] = 1
    return labels


def oracle_scores(graph: TrackGraph) -> np.ndarray:
    """Ground-truth edge scores: the labels as floats."""
    return edge_labels(graph).astype(np.float64)


def handcrafted_scores(graph: Union[TrackGraph, GraphTensors]) -> np.ndarray:
    """Fixed-weight fallback classifier on the raw edge descriptors.

    Penalises positional drift per frame of gap, size changes,
    appearance distance, and long gaps. Tuned once against the
    synthetic generator; useful when no trained checkpoint exists.
    """
    g = _as_tensors(graph)
    if g.n_edges == 0:
        return np.zeros(0)
    dx, dy, lw, lh, dt, de = (g.feats[:, i] for i in range(6))
    drift = np.hypot(dx, dy) / np.maximum(dt, 1.0)
    logit = (
        5.0
        - 8.0 * drift
        - 4.0 * (np.abs(lw) + np.abs(lh))
        - 4.5 * de
        - 0.15 * (dt - 1.0)
    )
    return _sigmoid(logit)


# ------------------------------------------------------------- checkpoints


def save_params(path: Union[str, Path], params: MpnParams) -> None:
    """Versioned little-endian binary checkpoint (float32 payload)."""
    head = [params.embed_dim, params.node_dim, params.edge_dim, params.steps]
    shapes: list[int] = []
    payload = []
    for _, mlp in params.components():
        shapes.append(len(mlp.weights))
        shapes.append(1 if mlp.output == "logistic" else 0)
        for w, b in zip(mlp.weights, mlp.biases):
            shapes.extend(w.shape)
            payload.append(w.astype("<f4").ravel())
            payload.append(b.astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(np.asarray(head + shapes, dtype="<u8").tobytes())
        for arr in payload:
            fh.write(arr.tobytes())


def _ckpt_error(path):
    return ParseError(f"checkpoint {path} is malformed or truncated")


def load_params(path: Union[str, Path]) -> MpnParams:
    raw = Path(path).read_bytes()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise _ckpt_error(path)
    # layout mirrors save_params; consume the integer header first. The
    # header length is data-dependent, so read it word by word instead
    # of viewing the whole remainder as integers (the float32 payload
    # need not align to 8 bytes).
    pos = len(_CKPT_MAGIC)

    def take(k):
        nonlocal pos
        end = pos + 8 * k
        if end > len(raw):
            raise _ckpt_error(path)
        out = np.frombuffer(raw, dtype="<u8", count=k, offset=pos)
        pos = end
        return [int(x) for x in out]

    embed_dim, node_dim, edge_dim, steps = take(4)
    comp_shapes = []
    for _ in MpnParams._COMPONENTS:
        n_layers, logistic = take(2)
        layers = [tuple(take(2)) for _ in range(n_layers)]
        comp_shapes.append((layers, "logistic" if logistic else "linear"))
    try:
        data = np.frombuffer(raw, dtype="<f4", offset=pos).astype(np.float64)
    except ValueError:
        raise _ckpt_error(path) from None

    cursor = 0

    def pull(count):
        nonlocal cursor
        out = data[cursor : cursor + count]
        if out.size != count:
            raise _ckpt_error(path)
        cursor += count
        return out

    mlps = []
    for layers, output in comp_shapes:
        weights, biases = [], []
        for d_in, d_out in layers:
            weights.append(pull(d_in * d_out).reshape(d_in, d_out))
            biases.append(pull(d_out))
        mlps.append(MlpParams(weights, biases, output))
    if cursor != data.size:
        raise _ckpt_error(path)
    return MpnParams(
        *mlps,
        embed_dim=embed_dim,
        node_dim=node_dim,
        edge_dim=edge_dim,
        steps=steps,
    )


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainSchedule:
    """Plain gradient descent settings with staged second-pass loss."""

    iterations: int = 2000
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    gamma: float = 1.0
    unfreeze_second_at: int = 500

    def __post_init__(self):
        if self.iterations < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ValidationError("schedule values must be non-negative")


@dataclass
class TrainResult:
    params: MpnParams
    history: list[tuple[int, float]]


LabelledGraph = tuple[GraphTensors, np.ndarray]


def train(
    primary: Sequence[LabelledGraph],
    secondary: Sequence[LabelledGraph],
    params: MpnParams,
    schedule: TrainSchedule,
) -> TrainResult:
    """Full-batch descent over labelled graphs.

    One parameter set serves both the detection-level and the
    trajectory-level pass; the trajectory graphs join the loss only
    from iteration unfreeze_second_at onwards. Weight decay applies to
    weight matrices, not biases.
    """
    if not primary:
        raise ValidationError("training needs at least one labelled graph")
    params = copy.deepcopy(params)
    history = []
    for it in range(schedule.iterations):
        batch = list(primary)
        if it >= schedule.unfreeze_second_at:
            batch += list(secondary)
        total_loss = 0.0
        total = zero_params_like(params)
        for g, labels in batch:
            loss, _, grads = backward(g, params, labels, schedule.gamma)
            total_loss += loss
            for acc, piece in zip(total.arrays(), grads.arrays()):
                acc += piece
        total_loss /= len(batch)
        if not np.isfinite(total_loss):
            raise NumericError(f"training diverged at iteration {it}")
        history.append((it, total_loss))
        for p_arr, g_arr in zip(params.arrays(), total.arrays()):
            step = g_arr * (1.0 / len(batch))
            if p_arr.ndim == 2 and schedule.weight_decay:
                step = step + schedule.weight_decay * p_arr
            p_arr -= schedule.learning_rate * step
    return TrainResult(params=params, history=history)
