"""Closed race tracks as piecewise straight/arc segments in the plane.

A track is a closed center line with a constant-width corridor.  Vehicle
states are expressed in track coordinates (arc length ``s`` along the center
line, lateral offset ``ey``, heading error ``epsi``); this module provides
the conversions between those coordinates and the global frame, curvature
lookup, and arc-length wrapping.

Sign convention: ``ey > 0`` is to the *left* of the direction of travel.
All canonical shapes run counterclockwise.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

STRAIGHT = "straight"
ARC = "arc"


class AmbiguousProjectionWarning(UserWarning):
    """Two center-line points are equidistant from the queried pose."""


@dataclass(frozen=True)
class Segment:
    kind: str
    length: float
    curvature: float

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"segment length must be positive, got {self.length}")
        if self.kind == STRAIGHT and self.curvature != 0.0:
            raise ValueError("straight segments must have zero curvature")
        if self.kind == ARC and self.curvature == 0.0:
            raise ValueError("arc segments must have nonzero curvature")


@dataclass(frozen=True)
class TrackLayout:
    """Immutable closed track: ordered segments plus a corridor width."""

    shape: str
    width: float
    segments: tuple[Segment, ...]
    # start pose of each segment, precomputed at construction
    _s0: np.ndarray = field(repr=False, default=None)
    _x0: np.ndarray = field(repr=False, default=None)
    _y0: np.ndarray = field(repr=False, default=None)
    _h0: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"track width must be positive, got {self.width}")
        n = len(self.segments)
        s0 = np.zeros(n + 1)
        x0 = np.zeros(n + 1)
        y0 = np.zeros(n + 1)
        h0 = np.zeros(n + 1)
        for i, seg in enumerate(self.segments):
            s0[i + 1] = s0[i] + seg.length
            x, y, h = _advance(x0[i], y0[i], h0[i], seg.length, seg.curvature)
            x0[i + 1], y0[i + 1], h0[i + 1] = x, y, h
        for name, arr in (("_s0", s0), ("_x0", x0), ("_y0", y0), ("_h0", h0)):
            object.__setattr__(self, name, arr)

    @property
    def total_length(self) -> float:
        return float(self._s0[-1])

    @property
    def curvatures(self) -> np.ndarray:
        return np.array([seg.curvature for seg in self.segments])

    def closure_residual(self) -> tuple[float, float]:
        """(position error [m], heading error [rad]) between lap end and start."""
        dpos = math.hypot(self._x0[-1] - self._x0[0], self._y0[-1] - self._y0[0])
        dhead = abs(_wrap_angle(self._h0[-1] - self._h0[0]))
        return dpos, dhead

    def to_json(self) -> str:
        doc = {
            "shape": self.shape,
            "width": self.width,
            "segments": [
                {"kind": s.kind, "length": s.length, "curvature": s.curvature}
                for s in self.segments
            ],
        }
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "TrackLayout":
        doc = json.loads(text)
        segs = tuple(
            Segment(d["kind"], float(d["length"]), float(d["curvature"]))
            for d in doc["segments"]
        )
        return TrackLayout(doc["shape"], float(doc["width"]), segs)


def _advance(x: float, y: float, h: float, u: float, kappa: float):
    """Pose after traveling u meters along a constant-curvature segment."""
    if kappa == 0.0:
        return x + u * math.cos(h), y + u * math.sin(h), h
    h1 = h + kappa * u
    x1 = x + (math.sin(h1) - math.sin(h)) / kappa
    y1 = y - (math.cos(h1) - math.cos(h)) / kappa
    return x1, y1, h1


def _wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return -((-np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi)


# --- canonical shapes -------------------------------------------------------
#
# Unit-proportion segment sequences, scaled so the total length matches the
# requested target exactly.  Closure is exact by construction:
#   * ellipse and m_shape repeat a half-sequence with net heading turn of pi
#     (the second half retraces the first rotated by 180 degrees);
#   * l_shape rounds the corners of a closed rectilinear polygon.


def _ellipse_unit() -> list[tuple[float, float]]:
    # four-arc oval: tight 90-degree end arcs (radius 1), gentle 90-degree
    # side arcs (radius 2)
    half = [(math.pi / 2.0, 1.0), (2.0 * math.pi / 2.0, 0.5)]
    return half + half


def _m_shape_unit() -> list[tuple[float, float]]:
    # pinched loop: each half swings left 135, reverses right 90, swings
    # left 135 between two straights; the two right-hand arcs are the
    # shape's direction reversals
    half = [
        (2.0, 0.0),
        (3.0 * math.pi / 4.0, 1.0),
        (math.pi / 2.0, -1.0),
        (3.0 * math.pi / 4.0, 1.0),
        (2.0, 0.0),
    ]
    return half + half


def _l_shape_unit() -> list[tuple[float, float]]:
    # rounded rectilinear L: one long and one short leg, five left corners
    # and one right (inner) corner, all rounded with radius 1.2
    edges = [10.0, 4.0, 6.0, 4.0, 4.0, 8.0]
    turns = [1.0, 1.0, -1.0, 1.0, 1.0, 1.0]
    r = 1.2
    out: list[tuple[float, float]] = []
    for i, e in enumerate(edges):
        out.append((e - 2.0 * r, 0.0))
        out.append((r * math.pi / 2.0, turns[i] / r))
    return out


_UNIT_SHAPES = {
    "ellipse": _ellipse_unit,
    "m_shape": _m_shape_unit,
    "l_shape": _l_shape_unit,
}


def build_track(shape: str, target_length: float, width: float) -> TrackLayout:
    """Build a canonical closed track scaled to the requested length.

    ``shape`` is one of ``l_shape``, ``m_shape``, ``ellipse``.  Segment
    lengths scale linearly and curvatures inversely, so the scaled layout
    closes exactly and its total length equals ``target_length`` up to
    floating-point rounding.
    """
    if target_length <= 0:
        raise ValueError(f"target_length must be positive, got {target_length}")
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    try:
        unit = _UNIT_SHAPES[shape]()
    except KeyError:
        raise ValueError(f"unknown track shape {shape!r}") from None
    unit_total = sum(u for u, _ in unit)
    scale = target_length / unit_total
    segs = tuple(
        Segment(STRAIGHT if k == 0.0 else ARC, u * scale, k / scale)
        for u, k in unit
    )
    return TrackLayout(shape, width, segs)


def wrap_s(track: TrackLayout, s) -> float | np.ndarray:
    """Wrap arc length into [0, L)."""
    length = track.total_length
    w = s % length
    # tiny negative inputs round the modulo up to exactly L
    if np.ndim(w) == 0:
        return 0.0 if w == length else w
    w[w == length] = 0.0
    return w


def segment_index(track: TrackLayout, s) -> int | np.ndarray:
    sw = wrap_s(track, s)
    idx = np.searchsorted(track._s0, sw, side="right") - 1
    # guard the half-open upper boundary against rounding
    return np.minimum(idx, len(track.segments) - 1)


def curvature_at(track: TrackLayout, s) -> float | np.ndarray:
    """Piecewise-constant curvature of the segment containing wrap_s(s)."""
    idx = segment_index(track, s)
    kappas = track.curvatures
    if np.ndim(idx) == 0:
        return float(kappas[idx])
    return kappas[idx]


def center_pose(track: TrackLayout, s) -> tuple:
    """Global (x, y, heading) of the center-line point at arc length s."""
    s_arr = np.asarray(wrap_s(track, s), dtype=float)
    scalar = s_arr.ndim == 0
    s_arr = np.atleast_1d(s_arr)
    idx = np.minimum(
        np.searchsorted(track._s0, s_arr, side="right") - 1, len(track.segments) - 1
    )
    u = s_arr - track._s0[idx]
    h0 = track._h0[idx]
    x0 = track._x0[idx]
    y0 = track._y0[idx]
    kap = track.curvatures[idx]
    x = np.empty_like(s_arr)
    y = np.empty_like(s_arr)
    h = h0 + kap * u
    straight = kap == 0.0
    x[straight] = x0[straight] + u[straight] * np.cos(h0[straight])
    y[straight] = y0[straight] + u[straight] * np.sin(h0[straight])
    arc = ~straight
    x[arc] = x0[arc] + (np.sin(h[arc]) - np.sin(h0[arc])) / kap[arc]
    y[arc] = y0[arc] - (np.cos(h[arc]) - np.cos(h0[arc])) / kap[arc]
    if scalar:
        return float(x[0]), float(y[0]), float(h[0])
    return x, y, h


def frenet_to_global(track: TrackLayout, s, ey, epsi) -> tuple:
    """Map track coordinates (s, ey, epsi) to a global pose (x, y, heading)."""
    cx, cy, ch = center_pose(track, s)
    x = cx - np.asarray(ey) * np.sin(ch)
    y = cy + np.asarray(ey) * np.cos(ch)
    heading = ch + epsi
    if np.ndim(x) == 0:
        return float(x), float(y), float(heading)
    return x, y, heading


def global_to_frenet(track: TrackLayout, pose) -> tuple[float, float, float]:
    """Project a global pose (x, y, heading) onto the center line.

    Returns (s, ey, epsi) with s in [0, L).  When two center-line points are
    equidistant within 1e-9 the tie is broken toward smaller s and an
    AmbiguousProjectionWarning is emitted.
    """
    px, py, heading = float(pose[0]), float(pose[1]), float(pose[2])
    best: list[tuple[float, float]] = []  # (distance, s)
    for i, seg in enumerate(track.segments):
        x0 = track._x0[i]
        y0 = track._y0[i]
        h0 = track._h0[i]
        if seg.kind == STRAIGHT:
            tx, ty = math.cos(h0), math.sin(h0)
            u = (px - x0) * tx + (py - y0) * ty
            u = min(max(u, 0.0), seg.length)
            qx, qy = x0 + u * tx, y0 + u * ty
        else:
            k = seg.curvature
            nx, ny = -math.sin(h0), math.cos(h0)
            cx_, cy_ = x0 + nx / k, y0 + ny / k
            psi = math.atan2(py - cy_, px - cx_)
            h_star = psi + math.copysign(math.pi / 2.0, k)
            u = float(_wrap_angle(h_star - h0)) / k
            if u < 0.0 or u > seg.length:
                d_start = math.hypot(px - x0, py - y0)
                xe, ye, _ = _advance(x0, y0, h0, seg.length, k)
                d_end = math.hypot(px - xe, py - ye)
                u = 0.0 if d_start <= d_end else seg.length
            # p(u) = center - n(h_u)/k with n = (-sin h, cos h)
            h_u = h0 + k * u
            qx = cx_ + math.sin(h_u) / k
            qy = cy_ - math.cos(h_u) / k
        dist = math.hypot(px - qx, py - qy)
        best.append((dist, track._s0[i] + u))
    best.sort(key=lambda t: (t[0], t[1]))
    if len(best) > 1 and best[1][0] - best[0][0] < 1e-9:
        # distinct center-line points equally close; keep the smaller s
        if abs(best[0][1] - best[1][1]) > 1e-9:
            warnings.warn(
                "projection is ambiguous; taking the smaller arc length",
                AmbiguousProjectionWarning,
                stacklevel=2,
            )
    s = wrap_s(track, best[0][1])
    cx, cy, ch = center_pose(track, s)
    ey = -(px - cx) * math.sin(ch) + (py - cy) * math.cos(ch)
    epsi = float(_wrap_angle(heading - ch))
    return float(s), float(ey), epsi
