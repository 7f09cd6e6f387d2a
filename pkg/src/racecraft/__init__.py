"""racecraft: lap-memory racing planner-controller and experiment harness."""

from .track import TrackLayout, build_track, curvature_at, frenet_to_global, global_to_frenet, wrap_s

__all__ = [
    "TrackLayout",
    "build_track",
    "curvature_at",
    "frenet_to_global",
    "global_to_frenet",
    "wrap_s",
]

__version__ = "0.1.0"
