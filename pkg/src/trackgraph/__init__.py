"""Graph-based multi-object tracking at desk scale.

The pipeline chains sliding-window appearance affinity, a frame-by-frame
coarse tracker, a partially connected detection/tracklet graph, a
message-passing edge classifier, flow-feasible rounding with temporal
grouping, overlapped clip stitching, and CLEAR/identity metrics.
"""

from trackgraph.core import (
    BoundingBox,
    CompositeNode,
    Detection,
    Edge,
    EdgeKind,
    NodeKind,
    NumericError,
    ParseError,
    TrackGraph,
    Tracklet,
    ValidationError,
    iou,
    temporal_iou,
)

__all__ = [
    "BoundingBox",
    "CompositeNode",
    "Detection",
    "Edge",
    "EdgeKind",
    "NodeKind",
    "NumericError",
    "ParseError",
    "TrackGraph",
    "Tracklet",
    "ValidationError",
    "iou",
    "temporal_iou",
]
