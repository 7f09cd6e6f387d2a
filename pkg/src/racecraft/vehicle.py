"""Frenet-frame dynamic bicycle model with Pacejka tires.

State vector (index constants below):

    x = [vx, vy, wz, epsi, s, ey]

with longitudinal/lateral body velocities ``vx``/``vy``, yaw rate ``wz``,
heading error ``epsi``, center-line arc length ``s``, and lateral deviation
``ey``.  Inputs are ``u = [a, delta]``: acceleration at the center of mass
and steering angle.

Tire lateral force per axle: ``Fy = D * sin(C * atan(B * alpha))`` with slip
angles computed from (vx, vy, wz, delta).  The high-rate simulator applies
forward Euler at ``dt_sim`` (1 kHz by default); the optimizers consume an
affine time-varying (ATV) model fit from logged transitions by a locally
weighted regressor, with an analytic-linearization fallback.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from . import track as trk

VX, VY, WZ, EPSI, S, EY = range(6)
ACC, STEER = 0, 1

N_STATES = 6
N_INPUTS = 2

FRENET_EPS = 1e-6


class FrenetSingularityError(ValueError):
    """The pose reached the Frenet blow-up 1 - kappa*ey = 0."""


@dataclass(frozen=True)
class VehicleParams:
    """Physical and limit parameters of a 1:10-scale car."""

    mass: float = 1.98
    yaw_inertia: float = 0.024
    lf: float = 0.125
    lr: float = 0.125
    length: float = 0.4
    width: float = 0.2
    tire_b_front: float = 5.0
    tire_c_front: float = 1.25
    tire_d_front: float = 0.8 * 1.98 * 9.81 / 2.0
    tire_b_rear: float = 5.0
    tire_c_rear: float = 1.25
    tire_d_rear: float = 0.8 * 1.98 * 9.81 / 2.0
    a_max: float = 1.0
    delta_max: float = 0.5
    v_min: float = 0.0
    v_max: float = 1.5

    def __post_init__(self):
        if self.lf + self.lr >= self.length:
            raise ValueError("axle distances must fit inside the vehicle length")
        if self.a_max <= 0 or self.delta_max <= 0:
            raise ValueError("input bounds must be positive")
        if self.v_max <= self.v_min:
            raise ValueError("v_max must exceed v_min")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "VehicleParams":
        return VehicleParams(**json.loads(text))

    @staticmethod
    def default() -> "VehicleParams":
        """Defaults shipped with the package (data/default_vehicle.json)."""
        text = resources.files("racecraft").joinpath("data/default_vehicle.json").read_text()
        return VehicleParams.from_json(text)


def clamp_input(u, p: VehicleParams):
    """Saturate inputs to the box |a| <= a_max, |delta| <= delta_max."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    np.minimum(np.maximum(u[..., ACC], -p.a_max), p.a_max, out=out[..., ACC])
    np.minimum(np.maximum(u[..., STEER], -p.delta_max), p.delta_max, out=out[..., STEER])
    return out


def tire_forces(x, u, p: VehicleParams):
    """Front/rear lateral tire forces from the decoupled Pacejka law."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    vx = x[..., VX]
    vy = x[..., VY]
    wz = x[..., WZ]
    delta = u[..., STEER]
    alpha_f = delta - np.arctan2(vy + p.lf * wz, vx)
    alpha_r = -np.arctan2(vy - p.lr * wz, vx)
    fyf = p.tire_d_front * np.sin(p.tire_c_front * np.arctan(p.tire_b_front * alpha_f))
    fyr = p.tire_d_rear * np.sin(p.tire_c_rear * np.arctan(p.tire_b_rear * alpha_r))
    return fyf, fyr


def continuous_dynamics(x, u, kappa, p: VehicleParams):
    """Time derivative of the state; broadcasts over leading dimensions."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    vx = x[..., VX]
    vy = x[..., VY]
    wz = x[..., WZ]
    epsi = x[..., EPSI]
    den = 1.0 - np.asarray(kappa) * x[..., EY]
    if np.abs(den).min() < FRENET_EPS:
        raise FrenetSingularityError(
            "lateral deviation reached the curvature center (1 - kappa*ey ~ 0)"
        )
    delta = u[..., STEER]
    fyf, fyr = tire_forces(x, u, p)
    cos_e = np.cos(epsi)
    sin_e = np.sin(epsi)
    sin_d = np.sin(delta)
    cos_d = np.cos(delta)
    progress = (vx * cos_e - vy * sin_e) / den
    dx = np.empty_like(x)
    dx[..., VX] = u[..., ACC] - fyf * sin_d / p.mass + wz * vy
    dx[..., VY] = (fyf * cos_d + fyr) / p.mass - wz * vx
    dx[..., WZ] = (p.lf * fyf * cos_d - p.lr * fyr) / p.yaw_inertia
    dx[..., EPSI] = wz - progress * kappa
    dx[..., S] = progress
    dx[..., EY] = vx * sin_e + vy * cos_e
    return dx


def sim_step(x, u, track: trk.TrackLayout, p: VehicleParams, dt_sim: float):
    """One forward-Euler step of the exact nonlinear model.

    Inputs are clamped to their box bounds before integration, and the
    acceleration is additionally clamped so vx never exits [v_min, v_max].
    Broadcasts over leading dimensions (multiple vehicles at once).
    """
    if dt_sim <= 0:
        raise ValueError("dt_sim must be positive")
    x = np.asarray(x, dtype=float)
    u = clamp_input(u, p)
    kappa = trk.curvature_at(track, x[..., S])
    dx = continuous_dynamics(x, u, kappa, p)
    _limit_speed(x, dx, p, dt_sim)
    return x + dt_sim * dx


def _limit_speed(x, dx, p, dt_sim):
    # pull acceleration back so vx lands exactly on a violated bound
    vx_next = x[..., VX] + dt_sim * dx[..., VX]
    if vx_next.ndim == 0:
        if vx_next > p.v_max:
            dx[VX] -= (vx_next - p.v_max) / dt_sim
        elif vx_next < p.v_min:
            dx[VX] -= (vx_next - p.v_min) / dt_sim
        return
    over = vx_next > p.v_max
    if over.any():
        dx[..., VX][over] -= (vx_next[over] - p.v_max) / dt_sim
    under = vx_next < p.v_min
    if under.any():
        dx[..., VX][under] -= (vx_next[under] - p.v_min) / dt_sim


def simulate_interval(x, u, track, p: VehicleParams, dt: float, dt_sim: float):
    """Hold u for one control interval dt, stepping the 1 kHz simulator."""
    n_sub = int(round(dt / dt_sim))
    x = np.asarray(x, dtype=float)
    u = clamp_input(u, p)
    kappas = track.curvatures
    bounds = track._s0
    n_seg = len(track.segments)
    length = track.total_length
    for _ in range(n_sub):
        kappa = kappas[
            np.minimum(np.searchsorted(bounds, x[..., S] % length, side="right") - 1, n_seg - 1)
        ]
        dx = continuous_dynamics(x, u, kappa, p)
        _limit_speed(x, dx, p, dt_sim)
        x = x + dt_sim * dx
    return x


def analytic_jacobians(x, u, kappa, p: VehicleParams, v_floor: float | None = None):
    """Continuous-time Jacobians (df/dx, df/du) at a single point.

    ``v_floor`` floors the speed used in the slip-angle partials; the model
    builder passes it to keep linearizations bounded near standstill, while
    the default (no floor) matches finite differences of the dynamics.
    """
    A, B = _jacobians_batch(
        np.asarray(x, dtype=float)[None],
        np.asarray(u, dtype=float)[None],
        np.asarray([kappa], dtype=float),
        p,
        v_floor,
    )
    return A[0], B[0]


def _jacobians_batch(x, u, kappa, p: VehicleParams, v_floor: float | None = None):
    """Vectorized continuous-time Jacobians over a batch of points."""
    vx = x[:, VX]
    vy = x[:, VY]
    wz = x[:, WZ]
    epsi = x[:, EPSI]
    ey = x[:, EY]
    delta = u[:, STEER]
    den = 1.0 - kappa * ey
    if np.abs(den).min() < FRENET_EPS:
        raise FrenetSingularityError(
            "lateral deviation reached the curvature center (1 - kappa*ey ~ 0)"
        )
    nb = x.shape[0]

    qf = vy + p.lf * wz
    qr = vy - p.lr * wz
    alpha_f = delta - np.arctan2(qf, vx)
    alpha_r = -np.arctan2(qr, vx)
    vx_lin = vx if v_floor is None else np.maximum(vx, v_floor)
    rf2 = vx_lin * vx_lin + qf * qf
    rr2 = vx_lin * vx_lin + qr * qr

    def pacejka(alpha, b, c, d):
        inner = np.arctan(b * alpha)
        f = d * np.sin(c * inner)
        dfda = d * np.cos(c * inner) * c * b / (1.0 + (b * alpha) ** 2)
        return f, dfda

    fyf, dff = pacejka(alpha_f, p.tire_b_front, p.tire_c_front, p.tire_d_front)
    fyr, dfr = pacejka(alpha_r, p.tire_b_rear, p.tire_c_rear, p.tire_d_rear)

    # d(alpha)/d(vx, vy, wz), shape (nb, 3)
    daf = np.stack([qf / rf2, -vx_lin / rf2, -p.lf * vx_lin / rf2], axis=1)
    dar = np.stack([qr / rr2, -vx_lin / rr2, p.lr * vx_lin / rr2], axis=1)

    sin_d, cos_d = np.sin(delta), np.cos(delta)
    cos_e, sin_e = np.cos(epsi), np.sin(epsi)
    fnum = vx * cos_e - vy * sin_e
    dfnum = np.zeros((nb, 6))
    dfnum[:, VX] = cos_e
    dfnum[:, VY] = -sin_e
    dfnum[:, EPSI] = -vx * sin_e - vy * cos_e

    A = np.zeros((nb, 6, 6))
    B = np.zeros((nb, 6, 2))

    # vx_dot = a - fyf*sin(delta)/m + wz*vy
    A[:, VX, :3] = -dff[:, None] * daf * sin_d[:, None] / p.mass
    A[:, VX, VY] += wz
    A[:, VX, WZ] += vy
    B[:, VX, ACC] = 1.0
    B[:, VX, STEER] = -(dff * sin_d + fyf * cos_d) / p.mass

    # vy_dot = (fyf*cos(delta) + fyr)/m - wz*vx
    A[:, VY, :3] = (dff[:, None] * daf * cos_d[:, None] + dfr[:, None] * dar) / p.mass
    A[:, VY, VX] += -wz
    A[:, VY, WZ] += -vx
    B[:, VY, STEER] = (dff * cos_d - fyf * sin_d) / p.mass

    # wz_dot = (lf*fyf*cos(delta) - lr*fyr)/Iz
    A[:, WZ, :3] = (
        p.lf * dff[:, None] * daf * cos_d[:, None] - p.lr * dfr[:, None] * dar
    ) / p.yaw_inertia
    B[:, WZ, STEER] = p.lf * (dff * cos_d - fyf * sin_d) / p.yaw_inertia

    # epsi_dot = wz - fnum*kappa/den ; s_dot = fnum/den
    A[:, EPSI, :] = -(kappa / den)[:, None] * dfnum
    A[:, EPSI, WZ] += 1.0
    A[:, EPSI, EY] += -fnum * kappa * kappa / (den * den)
    A[:, S, :] = dfnum / den[:, None]
    A[:, S, EY] += fnum * kappa / (den * den)

    # ey_dot = vx*sin(epsi) + vy*cos(epsi)
    A[:, EY, VX] = sin_e
    A[:, EY, VY] = cos_e
    A[:, EY, EPSI] = vx * cos_e - vy * sin_e
    return A, B


@dataclass
class ATVModel:
    """Per-step affine dynamics x_{k+1} = A_k x_k + B_k u_k + C_k."""

    A: np.ndarray  # (N, 6, 6)
    B: np.ndarray  # (N, 6, 2)
    C: np.ndarray  # (N, 6)

    @property
    def horizon(self) -> int:
        return self.A.shape[0]

    def rollout(self, x0: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """States obtained by pushing inputs through the affine recursion."""
        n = self.horizon
        xs = np.empty((n + 1, x0.shape[-1]))
        xs[0] = x0
        for k in range(n):
            xs[k + 1] = self.A[k] @ xs[k] + self.B[k] @ inputs[k] + self.C[k]
        return xs


V_LINEARIZATION_FLOOR = 0.3  # m/s, bounds slip-angle partials near standstill


def _analytic_affine_batch(
    x_refs, u_refs, track, p: VehicleParams, dt: float, dt_sim: float, n_chain: int = 10
):
    """Linearize the control-interval map around each reference point.

    The tire modes are much faster than the control period, so a one-step
    Euler linearization at dt is unstable.  Instead the variational map is
    chained over ``n_chain`` sub-intervals along the nonlinear rollout:
    A = prod (I + h J_x), with the offset chosen so the affine model
    reproduces the simulator exactly at the reference.
    """
    nb = x_refs.shape[0]
    h = dt / n_chain
    n_sub = int(round(h / dt_sim))
    eye = np.tile(np.eye(6), (nb, 1, 1))
    A = eye.copy()
    B = np.zeros((nb, 6, 2))
    x = x_refs.copy()
    u = clamp_input(u_refs, p)
    kappas = track.curvatures
    bounds = track._s0
    n_seg = len(track.segments)
    length = track.total_length
    for _ in range(n_chain):
        kappa = kappas[
            np.minimum(np.searchsorted(bounds, x[:, S] % length, side="right") - 1, n_seg - 1)
        ]
        jx, ju = _jacobians_batch(x, u, kappa, p, V_LINEARIZATION_FLOOR)
        step = eye + h * jx
        A = step @ A
        B = step @ B + h * ju
        for _ in range(n_sub):
            kap = kappas[
                np.minimum(
                    np.searchsorted(bounds, x[:, S] % length, side="right") - 1, n_seg - 1
                )
            ]
            dx = continuous_dynamics(x, u, kap, p)
            _limit_speed(x, dx, p, dt_sim)
            x = x + dt_sim * dx
    C = x - np.einsum("bij,bj->bi", A, x_refs) - np.einsum("bij,bj->bi", B, u_refs)
    return A, B, C


def fit_atv_model(
    transitions: tuple[np.ndarray, np.ndarray, np.ndarray],
    reference: tuple[np.ndarray, np.ndarray],
    track: trk.TrackLayout,
    p: VehicleParams,
    dt: float,
    dt_sim: float = 1e-3,
    n_reg: int = 40,
) -> ATVModel:
    """Fit the ATV model around a reference trajectory.

    ``transitions`` is (X, U, X_next) from logged laps, one row per recorded
    control step.  For every horizon step the n_reg nearest transitions in
    (vx, vy, wz) feed an Epanechnikov-weighted least-squares fit of the
    velocity rows against (vx, vy, wz, a, delta, 1); the position rows
    (epsi, s, ey) are linearized analytically, since they are known exactly
    given the local curvature and regressing them only mixes curvature
    regimes.  The analytic offset makes each step exact at its reference
    point; steps with too little data, a rank-deficient fit, or an unstable
    fitted velocity block fall back to the analytic linearization entirely.
    """
    x_refs, u_refs = reference
    x_refs = np.asarray(x_refs, dtype=float)
    u_refs = np.asarray(u_refs, dtype=float)
    xd, ud, xnd = transitions
    have = 0 if xd is None else xd.shape[0]
    if have > 4000:
        # the local fits only ever use near neighbors; keep the most
        # recent transitions so the search stays cheap as memory grows
        xd, ud, xnd = xd[-4000:], ud[-4000:], xnd[-4000:]

    A, B, C = _analytic_affine_batch(x_refs, u_refs, track, p, dt, dt_sim)
    if have >= n_reg:
        for k in range(u_refs.shape[0]):
            vel_next = A[k, :3] @ x_refs[k] + B[k, :3] @ u_refs[k] + C[k, :3]
            fit = _velocity_fit(xd, ud, xnd, x_refs[k], u_refs[k], n_reg, vel_next)
            if fit is not None:
                a_vel, b_vel, c_vel = fit
                A[k, :3, :3] = a_vel
                A[k, :3, 3:] = 0.0
                B[k, :3] = b_vel
                C[k, :3] = c_vel
    return ATVModel(A, B, C)


def _velocity_fit(xd, ud, xnd, x_ref, u_ref, n_reg, vel_next_ref):
    """Locally weighted regression of (vx', vy', wz') on (vx, vy, wz, a, delta)."""
    d2 = np.sum((xd[:, :3] - x_ref[:3]) ** 2, axis=1)
    idx = np.argpartition(d2, n_reg - 1)[:n_reg]
    d2sel = d2[idx]
    h2 = d2sel.max() * (1.0 + 1e-9) + 1e-12
    w = 0.75 * (1.0 - d2sel / h2)
    phi = np.concatenate(
        [xd[idx][:, :3] - x_ref[:3], ud[idx] - u_ref, np.ones((n_reg, 1))], axis=1
    )
    sw = np.sqrt(w)[:, None]
    theta, _, rank, _ = np.linalg.lstsq(sw * phi, sw * xnd[idx][:, :3], rcond=None)
    if rank < phi.shape[1]:
        return None
    a = theta[:3].T
    b = theta[3:5].T
    c = theta[5] - a @ x_ref[:3] - b @ u_ref
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
        return None
    # reject fits whose homogeneous part would blow up over the horizon, or
    # that contradict the simulator at the reference point itself
    if np.max(np.abs(np.linalg.eigvals(a))) > 1.1:
        return None
    pred_ref = a @ x_ref[:3] + b @ u_ref + c
    if np.max(np.abs(pred_ref - vel_next_ref)) > 0.3:
        return None
    return a, b, c
