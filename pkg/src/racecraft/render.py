"""SVG snapshot rendering of episode states in global coordinates."""

from __future__ import annotations

import numpy as np

from . import track as trk
from .simulation import EpisodeLog
from .vehicle import EPSI, EY, S, VehicleParams


def vehicle_corners(track: trk.TrackLayout, s: float, ey: float, epsi: float,
                    length: float, width: float) -> np.ndarray:
    """Global (4, 2) body-corner positions of a vehicle at a track pose."""
    x, y, heading = trk.frenet_to_global(track, s, ey, epsi)
    c, sn = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -sn], [sn, c]])
    half = np.array(
        [[length / 2, width / 2], [length / 2, -width / 2],
         [-length / 2, -width / 2], [-length / 2, width / 2]]
    )
    return half @ rot.T + np.array([x, y])


def _polyline(track, s_vals, ey):
    xs, ys, _ = trk.frenet_to_global(track, np.asarray(s_vals, dtype=float),
                                     np.full(len(s_vals), float(ey)), 0.0)
    return xs, ys


def _fmt_points(xs, ys):
    return " ".join(f"{x:.4f},{-y:.4f}" for x, y in zip(xs, ys))


def render_snapshot(log: EpisodeLog, t: int, track: trk.TrackLayout,
                    vehicle: VehicleParams | None = None) -> str:
    """One control step of an episode as an SVG document.

    Blue track boundaries, dashed center line, green obstacle rectangles,
    the red ego rectangle, and (when the log kept them) the orange
    open-loop predicted trajectory.
    """
    vehicle = vehicle or VehicleParams()
    if t < 0 or t >= len(log.steps):
        raise IndexError(f"step {t} outside the logged range")
    s_grid = np.arange(0.0, track.total_length, 0.1)
    cx, cy, _ = trk.center_pose(track, s_grid)
    half = track.width / 2.0
    in_x, in_y = _polyline(track, s_grid, +half)
    out_x, out_y = _polyline(track, s_grid, -half)

    all_x = np.concatenate([in_x, out_x])
    all_y = np.concatenate([in_y, out_y])
    margin = 1.0
    x0, x1 = all_x.min() - margin, all_x.max() + margin
    y0, y1 = all_y.min() - margin, all_y.max() + margin

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.2f} {-y1:.2f} '
        f'{x1 - x0:.2f} {y1 - y0:.2f}" width="900">',
        f'<polygon class="boundary-inner" points="{_fmt_points(in_x, in_y)}" '
        'fill="none" stroke="#1f4fbf" stroke-width="0.05"/>',
        f'<polygon class="boundary-outer" points="{_fmt_points(out_x, out_y)}" '
        'fill="none" stroke="#1f4fbf" stroke-width="0.05"/>',
        f'<polygon class="centerline" points="{_fmt_points(cx, cy)}" fill="none" '
        'stroke="#8a5a2b" stroke-width="0.02" stroke-dasharray="0.3,0.2"/>',
    ]

    if log.predictions and t < len(log.predictions) and log.predictions[t] is not None:
        pred = np.asarray(log.predictions[t])
        px, py, _ = trk.frenet_to_global(track, pred[:, S], pred[:, EY], pred[:, EPSI])
        parts.append(
            f'<polyline class="prediction" points="{_fmt_points(px, py)}" '
            'fill="none" stroke="#f28c28" stroke-width="0.05"/>'
        )

    obs = np.asarray(log.obstacle_states[t])
    for j in range(obs.shape[0]):
        corners = vehicle_corners(track, obs[j, S], obs[j, EY], obs[j, EPSI],
                                  vehicle.length, vehicle.width)
        parts.append(
            f'<polygon class="obstacle" points="{_fmt_points(corners[:, 0], corners[:, 1])}" '
            'fill="#2e9e44" stroke="none"/>'
        )

    ego = log.ego_states[t]
    corners = vehicle_corners(track, ego[S], ego[EY], ego[EPSI],
                              vehicle.length, vehicle.width)
    parts.append(
        f'<polygon class="ego" points="{_fmt_points(corners[:, 0], corners[:, 1])}" '
        'fill="#d62718" stroke="none"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts)
