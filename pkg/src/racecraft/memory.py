"""Lap-indexed history of states, inputs, and time-to-finish cost-to-go.

Completed laps form the data set the planner draws terminal targets from.
Each recorded point carries its cost-to-go: the number of control steps the
car needed to reach the finish line from that state in its own lap.  Target
candidates are the K nearest stored states under a diagonal metric; near the
start/finish seam, the opening steps of the following lap are aliased one
lap ahead (s + L, negative cost-to-go) so targets can pull the car through
the line instead of parking on it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .vehicle import EY, S

DEFAULT_DZ = np.array([0.1, 0.1, 0.1, 0.1, 1.0, 1.0])


class InsufficientHistoryError(RuntimeError):
    """Not enough finalized data to answer the query."""


@dataclass(frozen=True)
class HistoryPoint:
    state: np.ndarray
    input: np.ndarray
    lap_index: int
    step_index: int
    cost_to_go: float


@dataclass
class _Lap:
    states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    cost_to_go: np.ndarray | None = None

    @property
    def finalized(self) -> bool:
        return self.cost_to_go is not None


class LapMemory:
    """Single-writer store of per-lap histories; queries see finalized laps only."""

    def __init__(
        self,
        track_length: float,
        lap_window: int = 2,
        dz: np.ndarray | None = None,
        seam_margin: float = 1.8,
    ):
        self.track_length = float(track_length)
        self.lap_window = int(lap_window)
        self.dz = DEFAULT_DZ.copy() if dz is None else np.asarray(dz, dtype=float)
        self.seam_margin = float(seam_margin)
        self._laps: list[_Lap] = []
        self._open: _Lap | None = None
        self._pool_cache: dict = {}

    # --- recording --------------------------------------------------------

    @property
    def n_finalized(self) -> int:
        return sum(1 for lap in self._laps if lap.finalized)

    def start_lap(self) -> int:
        if self._open is not None:
            raise RuntimeError("previous lap not finalized")
        self._open = _Lap()
        self._laps.append(self._open)
        return len(self._laps) - 1

    def record_step(self, x, u, lap_index: int, step_index: int) -> None:
        if self._open is None or lap_index != len(self._laps) - 1:
            raise RuntimeError("no lap in progress at that index")
        if step_index != len(self._open.states):
            raise RuntimeError(
                f"expected step {len(self._open.states)}, got {step_index}"
            )
        self._open.states.append(np.array(x, dtype=float))
        self._open.inputs.append(np.array(u, dtype=float))

    def finalize_lap(self, t_lap: int) -> None:
        """Close the in-progress lap; point i gets cost-to-go t_lap - i.

        The lap must hold t_lap + 1 points (steps 0..t_lap), the last being
        the state that crossed the finish line (s >= L).
        """
        lap = self._open
        if lap is None:
            raise RuntimeError("no lap in progress")
        if len(lap.states) != t_lap + 1:
            raise ValueError(
                f"lap holds {len(lap.states)} points, expected {t_lap + 1}"
            )
        if lap.states[-1][S] < self.track_length:
            raise ValueError("terminal state has not crossed the finish line")
        lap.states = np.asarray(lap.states)
        lap.inputs = np.asarray(lap.inputs)
        lap.cost_to_go = t_lap - np.arange(t_lap + 1, dtype=float)
        self._open = None
        self._pool_cache.clear()

    def abandon_lap(self) -> None:
        """Drop the in-progress lap (episode ended before the line)."""
        if self._open is not None:
            self._laps.pop()
            self._open = None

    # --- queries ----------------------------------------------------------

    def _window_laps(self, lap_window: int) -> list[int]:
        done = [i for i, lap in enumerate(self._laps) if lap.finalized]
        return done[-lap_window:]

    def candidate_pool(self, s_query: float, lap_window: int | None = None):
        """Eligible (states, inputs, cost_to_go, lap, step) arrays for a query.

        Near the finish line the pool is augmented with the openings of the
        successor laps, shifted one lap ahead with negative cost-to-go.
        """
        window = self.lap_window if lap_window is None else lap_window
        lap_ids = self._window_laps(window)
        if not lap_ids:
            raise InsufficientHistoryError("no finalized laps")
        near_seam = (self.track_length - s_query) < self.seam_margin
        cache_key = (tuple(lap_ids), near_seam)
        cached = self._pool_cache.get(cache_key)
        if cached is not None:
            return cached
        zs, us, js, laps, steps = [], [], [], [], []
        for i in lap_ids:
            lap = self._laps[i]
            zs.append(lap.states)
            us.append(lap.inputs)
            js.append(lap.cost_to_go)
            laps.append(np.full(len(lap.states), i))
            steps.append(np.arange(len(lap.states)))
            nxt = i + 1
            if near_seam and nxt < len(self._laps) and self._laps[nxt].finalized:
                opening = self._laps[nxt].states[:, S] <= self.seam_margin
                m = int(np.count_nonzero(opening))
                if m:
                    shifted = self._laps[nxt].states[opening].copy()
                    shifted[:, S] += self.track_length
                    zs.append(shifted)
                    us.append(self._laps[nxt].inputs[opening])
                    # step k of the successor lap sits k+1 steps past this
                    # lap's finish-line point
                    js.append(-np.arange(1, m + 1, dtype=float))
                    laps.append(np.full(m, nxt))
                    steps.append(np.arange(m))
        pool = (
            np.concatenate(zs),
            np.concatenate(us),
            np.concatenate(js),
            np.concatenate(laps),
            np.concatenate(steps),
        )
        self._pool_cache[cache_key] = pool
        return pool

    def knn_query(
        self,
        x_t,
        k: int,
        dz: np.ndarray | None = None,
        lap_window: int | None = None,
    ) -> list[HistoryPoint]:
        """K nearest stored states to x_t, sorted ascending by cost-to-go.

        Exact-duplicate states are deduplicated (the smallest cost-to-go
        survives).  Ties in the metric are broken by cost-to-go then by
        (lap, step); ties in the output sort are broken by smaller distance.
        """
        x_t = np.asarray(x_t, dtype=float)
        weights = self.dz if dz is None else np.asarray(dz, dtype=float)
        zs, us, js, laps, steps = self.candidate_pool(x_t[S], lap_window)
        d2 = ((zs - x_t) ** 2) @ weights
        order = np.lexsort((steps, laps, js, d2))
        picked: list[int] = []
        seen: set[bytes] = set()
        for idx in order:
            key = zs[idx].tobytes()
            if key in seen:
                continue
            seen.add(key)
            picked.append(idx)
            if len(picked) == k:
                break
        if len(picked) < k:
            raise InsufficientHistoryError(
                f"only {len(picked)} distinct points available, need {k}"
            )
        picked.sort(key=lambda i: (js[i], d2[i], laps[i], steps[i]))
        return [
            HistoryPoint(zs[i].copy(), us[i].copy(), int(laps[i]), int(steps[i]), float(js[i]))
            for i in picked
        ]

    def transitions(self, lap_window: int | None = None):
        """(X, U, X_next) pairs of consecutive steps within recent laps."""
        window = self.lap_window if lap_window is None else lap_window
        lap_ids = self._window_laps(window)
        xs, us, xns = [], [], []
        for i in lap_ids:
            lap = self._laps[i]
            if len(lap.states) < 2:
                continue
            xs.append(lap.states[:-1])
            us.append(lap.inputs[:-1])
            xns.append(lap.states[1:])
        if not xs:
            return None, None, None
        return np.concatenate(xs), np.concatenate(us), np.concatenate(xns)

    def lap_times(self) -> list[int]:
        return [
            int(lap.cost_to_go[0]) for lap in self._laps if lap.finalized
        ]

    # --- persistence ------------------------------------------------------

    CSV_FIELDS = ["lap", "step", "vx", "vy", "wz", "epsi", "s", "ey", "a", "delta", "cost_to_go"]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_FIELDS)
            for i, lap in enumerate(self._laps):
                if not lap.finalized:
                    continue
                for j in range(len(lap.states)):
                    writer.writerow(
                        [i, j]
                        + [repr(float(v)) for v in lap.states[j]]
                        + [repr(float(v)) for v in lap.inputs[j]]
                        + [repr(float(lap.cost_to_go[j]))]
                    )

    @staticmethod
    def load_csv(path, track_length: float, **kwargs) -> "LapMemory":
        mem = LapMemory(track_length, **kwargs)
        rows: dict[int, list] = {}
        with open(path) as fh:
            for row in csv.DictReader(fh):
                rows.setdefault(int(row["lap"]), []).append(row)
        for lap_id in sorted(rows):
            idx = mem.start_lap()
            for row in sorted(rows[lap_id], key=lambda r: int(r["step"])):
                x = [float(row[f]) for f in ("vx", "vy", "wz", "epsi", "s", "ey")]
                u = [float(row["a"]), float(row["delta"])]
                mem.record_step(x, u, idx, int(row["step"]))
            mem.finalize_lap(len(rows[lap_id]) - 1)
        return mem

    def __deepcopy__(self, memo):
        import copy

        clone = LapMemory(self.track_length, self.lap_window, self.dz.copy(), self.seam_margin)
        for lap in self._laps:
            new = _Lap(
                states=copy.deepcopy(lap.states),
                inputs=copy.deepcopy(lap.inputs),
                cost_to_go=None if lap.cost_to_go is None else lap.cost_to_go.copy(),
            )
            clone._laps.append(new)
            if lap is self._open:
                clone._open = new
        return clone
