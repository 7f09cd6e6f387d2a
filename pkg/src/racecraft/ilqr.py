"""Finite-horizon iterative LQR over affine time-varying dynamics.

Solves

    min  |x_N - z_g|^2_QN  +  sum_k |u_k|^2_R + |u_k - u_{k-1}|^2_dR
         + sum barriers q1 * exp(q2 * f(x_k, u_k, k))
    s.t. x_{k+1} = A_k x_k + B_k u_k + C_k,   x_0 given,

with the k=0 input-rate term taken against the previously executed input.
Inequality constraints f <= 0 enter as exponential penalties; their
curvature uses the Gauss-Newton outer product so the backward pass stays
positive semidefinite.  The input-rate coupling is handled by augmenting
the state with the previous input, which keeps the recursion standard.

The backward pass uses Levenberg-style diagonal regularization on the input
Hessian (mu in [1e-6, 1e6], x10 on a failed factorization, /2 after a
successful iteration) and a backtracking line search over
alpha in {1, 1/2, ..., 2^-8}, accepting any cost decrease.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MU_MIN = 1e-6
MU_MAX = 1e6
ALPHAS = tuple(0.5**i for i in range(9))
EXP_CLIP = 60.0  # keeps deeply violated barrier costs finite
GRAD_CAP = 1e8  # saturates barrier pressure so factorizations stay sane


class InvalidSeedError(ValueError):
    """Warm-start trajectory produced a non-finite cost."""


# --- barrier terms ----------------------------------------------------------


@dataclass
class BarrierTerm:
    """Inequality f(x_k, u_k, k) <= 0 penalized as q1*exp(q2*f).

    ``steps`` lists the horizon steps where the term is active; step N means
    the terminal state (no input).  Subclasses implement vectorized
    ``values``/``gradients`` over their active steps.
    """

    q1: float
    q2: float
    steps: np.ndarray

    def __post_init__(self):
        if self.q1 <= 0 or self.q2 <= 0:
            raise ValueError("barrier weights q1, q2 must be positive")
        self.steps = np.asarray(self.steps, dtype=int)

    def values(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradients(self, xs, us) -> tuple[np.ndarray, np.ndarray]:
        """(df/dx, df/du) rows aligned with ``steps``."""
        raise NotImplementedError


@dataclass
class BoxBarrier(BarrierTerm):
    """Linear constraint w_x.x + w_u.u - b <= 0 (one face of a box)."""

    w_x: np.ndarray | None = None
    w_u: np.ndarray | None = None
    bound: float = 0.0

    def values(self, xs, us):
        f = np.full(len(self.steps), -self.bound)
        if self.w_x is not None:
            f = f + xs[self.steps] @ self.w_x
        if self.w_u is not None:
            f = f + us[self.steps] @ self.w_u
        return f

    def gradients(self, xs, us):
        n, m = xs.shape[1], us.shape[1]
        k = len(self.steps)
        fx = np.zeros((k, n)) if self.w_x is None else np.tile(self.w_x, (k, 1))
        fu = np.zeros((k, m)) if self.w_u is None else np.tile(self.w_u, (k, 1))
        return fx, fu


@dataclass
class QuadraticBarrier(BarrierTerm):
    """Concave constraint r_k - sum_i w_ki (x_i - c_ki)^2 <= 0.

    Covers the obstacle ellipse (r = 1, w from the headway weight matrix)
    and the barrier-function decay condition (r from the previous margin).
    ``indices`` selects the state components entering the quadratic.
    """

    indices: np.ndarray = field(default_factory=lambda: np.array([4, 5]))
    centers: np.ndarray = None  # (len(steps), len(indices))
    weights: np.ndarray = None  # (len(steps), len(indices))
    radius: np.ndarray = None  # (len(steps),)

    def values(self, xs, us):
        diff = xs[self.steps][:, self.indices] - self.centers
        return self.radius - np.sum(self.weights * diff * diff, axis=1)

    def gradients(self, xs, us):
        n, m = xs.shape[1], us.shape[1]
        diff = xs[self.steps][:, self.indices] - self.centers
        fx = np.zeros((len(self.steps), n))
        fx[:, self.indices] = -2.0 * self.weights * diff
        return fx, np.zeros((len(self.steps), m))


@dataclass
class GenericBarrier(BarrierTerm):
    """Arbitrary scalar constraint given by evaluator callbacks."""

    fun: callable = None  # fun(x, u_or_None, k) -> float
    grad: callable = None  # grad(x, u_or_None, k) -> (df/dx, df/du or None)

    def values(self, xs, us):
        n_horizon = us.shape[0]
        return np.array(
            [
                self.fun(xs[k], us[k] if k < n_horizon else None, k)
                for k in self.steps
            ]
        )

    def gradients(self, xs, us):
        n, m = xs.shape[1], us.shape[1]
        n_horizon = us.shape[0]
        fx = np.zeros((len(self.steps), n))
        fu = np.zeros((len(self.steps), m))
        for i, k in enumerate(self.steps):
            gx, gu = self.grad(xs[k], us[k] if k < n_horizon else None, k)
            fx[i] = gx
            if gu is not None:
                fu[i] = gu
        return fx, fu


def input_box_barriers(a_max, delta_max, n_horizon, q1=1.0, q2=10.0):
    """Four box faces |a| <= a_max, |delta| <= delta_max over all stages."""
    steps = np.arange(n_horizon)
    out = []
    for idx, bound in ((0, a_max), (1, delta_max)):
        for sign in (1.0, -1.0):
            w = np.zeros(2)
            w[idx] = sign
            out.append(BoxBarrier(q1, q2, steps, w_x=None, w_u=w, bound=bound))
    return out


def state_bound_barriers(index, lo, hi, n_horizon, n_states=6, q1=1.0, q2=10.0):
    """Pair of faces lo <= x[index] <= hi over steps 1..N."""
    steps = np.arange(1, n_horizon + 1)
    out = []
    for sign, bound in ((1.0, hi), (-1.0, -lo)):
        w = np.zeros(n_states)
        w[index] = sign
        out.append(BoxBarrier(q1, q2, steps, w_x=w, w_u=None, bound=bound))
    return out


# --- cost specification -----------------------------------------------------


@dataclass
class CostSpec:
    """Quadratic tracking cost plus exponential barrier terms (diagonal weights)."""

    z_g: np.ndarray
    qn: np.ndarray  # terminal weight diagonal (n,)
    r: np.ndarray  # input weight diagonal (m,)
    dr: np.ndarray  # input-rate weight diagonal (m,)
    u_prev: np.ndarray  # executed input before the horizon (m,)
    barriers: list = field(default_factory=list)

    def __post_init__(self):
        self.z_g = np.asarray(self.z_g, dtype=float)
        self.qn = np.asarray(self.qn, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.dr = np.asarray(self.dr, dtype=float)
        self.u_prev = np.asarray(self.u_prev, dtype=float)
        if np.any(self.qn < 0) or np.any(self.r < 0) or np.any(self.dr < 0):
            raise ValueError("cost weights must be nonnegative")


@dataclass
class OpenLoopTrajectory:
    states: np.ndarray  # (N+1, n)
    inputs: np.ndarray  # (N, m)
    cost: float
    iterations: int
    converged: bool
    backtracks: int = 0


def _barrier_weight(term, f):
    # d/df of q1*exp(q2*f); the exponent clip keeps costs finite and the
    # cap keeps derivative magnitudes factorizable deep inside a violation
    return np.minimum(
        term.q1 * term.q2 * np.exp(np.minimum(term.q2 * f, EXP_CLIP)), GRAD_CAP
    )


def total_cost(traj, spec: CostSpec) -> float:
    """Full cost of a trajectory; accepts OpenLoopTrajectory or (states, inputs)."""
    if isinstance(traj, OpenLoopTrajectory):
        xs, us = traj.states, traj.inputs
    else:
        xs, us = traj
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    du = np.diff(np.vstack([spec.u_prev, us]), axis=0)
    cost = float(np.sum(us * us @ spec.r) + np.sum(du * du @ spec.dr))
    err = xs[-1] - spec.z_g
    cost += float(err @ (spec.qn * err))
    for term in spec.barriers:
        f = term.values(xs, us)
        cost += float(np.sum(term.q1 * np.exp(np.minimum(term.q2 * f, EXP_CLIP))))
    return cost


def cost_gradients(xs, us, spec: CostSpec):
    """Exact first derivatives of the full cost wrt every state and input.

    Returns (gx, gu) with gx[k] = dJ/dx_k for k = 0..N and gu[k] = dJ/du_k.
    These are the derivatives the backward pass consumes (via the augmented
    stage split) and the quantity checked against finite differences.
    """
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    n_h = us.shape[0]
    gx = np.zeros_like(xs)
    gu = np.zeros_like(us)
    du = np.diff(np.vstack([spec.u_prev, us]), axis=0)
    gu += 2.0 * us * spec.r
    gu += 2.0 * du * spec.dr
    gu[:-1] -= 2.0 * du[1:] * spec.dr
    gx[-1] += 2.0 * spec.qn * (xs[-1] - spec.z_g)
    for term in spec.barriers:
        f = term.values(xs, us)
        w = _barrier_weight(term, f)
        fx, fu = term.gradients(xs, us)
        np.add.at(gx, term.steps, w[:, None] * fx)
        stage = term.steps < n_h
        if stage.any():
            np.add.at(gu, term.steps[stage], (w[:, None] * fu)[stage])
    return gx, gu


# --- solver -----------------------------------------------------------------


class _FactorizationFailed(Exception):
    pass


def _stage_matrices(model):
    if hasattr(model, "A"):
        return (
            np.asarray(model.A, dtype=float),
            np.asarray(model.B, dtype=float),
            np.asarray(model.C, dtype=float),
        )
    return tuple(np.asarray(m, dtype=float) for m in model)


def rollout(model, x0, inputs):
    """Push an input sequence through the affine recursion."""
    A, B, C = _stage_matrices(model)
    n = A.shape[0]
    xs = np.empty((n + 1, x0.shape[0]))
    xs[0] = x0
    for k in range(n):
        xs[k + 1] = A[k] @ xs[k] + B[k] @ inputs[k] + C[k]
    return xs


def _derivative_tables(xs, us, spec):
    """Per-step gradient/Hessian pieces of barriers in (x, u) coordinates."""
    n_h, m = us.shape
    n = xs.shape[1]
    bgx = np.zeros((n_h + 1, n))
    bgu = np.zeros((n_h, m))
    bxx = np.zeros((n_h + 1, n, n))
    buu = np.zeros((n_h, m, m))
    bux = np.zeros((n_h, m, n))
    for term in spec.barriers:
        f = term.values(xs, us)
        w = _barrier_weight(term, f)
        gn = term.q2 * w
        fx, fu = term.gradients(xs, us)
        steps = term.steps
        # steps are unique within a term, so fancy-index += accumulates safely
        bgx[steps] += w[:, None] * fx
        bxx[steps] += gn[:, None, None] * np.einsum("ki,kj->kij", fx, fx)
        stage = steps < n_h
        if stage.any() and np.any(fu):
            sk = steps[stage]
            wu = w[stage, None] * fu[stage]
            bgu[sk] += wu
            bux[sk] += gn[stage, None, None] * np.einsum(
                "ki,kj->kij", fu[stage], fx[stage]
            )
            buu[sk] += gn[stage, None, None] * np.einsum(
                "ki,kj->kij", fu[stage], fu[stage]
            )
    return bgx, bgu, bxx, buu, bux


def solve(
    model,
    spec: CostSpec,
    x0: np.ndarray,
    warm_start: np.ndarray | None = None,
    max_iters: int = 50,
    tol: float = 1e-6,
) -> OpenLoopTrajectory:
    """Locally optimal trajectory for the barrier-augmented tracking problem.

    ``warm_start`` is an input sequence (N, m); omitted, the solver starts
    from zero inputs rolled through the model.  Always returns the best
    trajectory found.
    """
    A, B, C = _stage_matrices(model)
    n_h, n, m = B.shape
    x0 = np.asarray(x0, dtype=float)
    us = (
        np.zeros((n_h, m))
        if warm_start is None
        else np.array(warm_start, dtype=float)
    )
    xs = rollout((A, B, C), x0, us)
    cost = total_cost((xs, us), spec)
    if not np.isfinite(cost):
        raise InvalidSeedError("warm-start trajectory has non-finite cost")

    # augmented system (x, u_prev): constant across iterations
    na = n + m
    A_aug = np.zeros((n_h, na, na))
    B_aug = np.zeros((n_h, na, m))
    A_aug[:, :n, :n] = A
    B_aug[:, :n, :] = B
    B_aug[:, n:, :] = np.eye(m)

    r2 = 2.0 * np.diag(spec.r)
    dr2 = 2.0 * np.diag(spec.dr)
    qn2 = 2.0 * np.diag(spec.qn)

    mu = MU_MIN
    converged = False
    backtracks_total = 0
    iteration = 0
    best = (cost, xs, us)

    while iteration < max_iters:
        iteration += 1
        uprev = np.vstack([spec.u_prev, us[:-1]])
        bgx, bgu, bxx, buu, bux = _derivative_tables(xs, us, spec)

        # backward pass with mu escalation
        while True:
            try:
                kff, kfb, grad_inf = _backward(
                    A_aug, B_aug, xs, us, uprev, spec, bgx, bgu, bxx, buu, bux,
                    r2, dr2, qn2, mu,
                )
                break
            except _FactorizationFailed:
                mu *= 10.0
                if mu > MU_MAX:
                    return OpenLoopTrajectory(
                        best[1], best[2], best[0], iteration, converged, backtracks_total
                    )

        if grad_inf < 1e-8 * (1.0 + abs(cost)):
            converged = True
            break

        accepted = False
        for alpha in ALPHAS:
            xs_new, us_new = _forward(A, B, C, xs, us, uprev, spec.u_prev, kff, kfb, alpha)
            cost_new = total_cost((xs_new, us_new), spec)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            backtracks_total += 1
        if not accepted:
            break

        decrease = cost - cost_new
        xs, us, cost = xs_new, us_new, cost_new
        if cost < best[0]:
            best = (cost, xs, us)
        mu = max(mu / 2.0, MU_MIN)
        if decrease < tol * max(1.0, abs(cost)):
            converged = True
            break

    if cost <= best[0]:
        best = (cost, xs, us)
    return OpenLoopTrajectory(best[1], best[2], best[0], iteration, converged, backtracks_total)


def _backward(A_aug, B_aug, xs, us, uprev, spec, bgx, bgu, bxx, buu, bux, r2, dr2, qn2, mu):
    n_h, na, m = B_aug.shape
    n = na - m
    mu_eye = mu * np.eye(m)

    kff = np.empty((n_h, m))
    kfb = np.empty((n_h, m, na))

    vx = np.zeros(na)
    vx[:n] = qn2 @ (xs[-1] - spec.z_g) + bgx[-1]
    vxx = np.zeros((na, na))
    vxx[:n, :n] = qn2 + bxx[-1]

    du_all = us - uprev
    lu_all = us @ r2 + du_all @ dr2 + bgu
    ludu_all = -(du_all @ dr2)
    r2dr2 = r2 + dr2

    grad_inf = 0.0
    for k in range(n_h - 1, -1, -1):
        Ak = A_aug[k]
        Bk = B_aug[k]
        qx = Ak.T @ vx
        qx[:n] += bgx[k]
        qx[n:] += ludu_all[k]
        qu = lu_all[k] + Bk.T @ vx
        vxxA = vxx @ Ak
        qxx = Ak.T @ vxxA
        qxx[:n, :n] += bxx[k]
        qxx[n:, n:] += dr2
        quu = r2dr2 + buu[k] + Bk.T @ vxx @ Bk
        qux = Bk.T @ vxxA
        qux[:, :n] += bux[k]
        qux[:, n:] -= dr2

        quu_reg = quu + mu_eye
        try:
            np.linalg.cholesky(quu_reg)
            sol = np.linalg.solve(quu_reg, np.column_stack([qu, qux]))
        except np.linalg.LinAlgError:
            raise _FactorizationFailed
        if not np.all(np.isfinite(sol)):
            raise _FactorizationFailed
        kv = -sol[:, 0]
        K = -sol[:, 1:]
        kff[k] = kv
        kfb[k] = K

        g = float(np.max(np.abs(qu)))
        if g > grad_inf:
            grad_inf = g
        vx = qx + K.T @ (quu_reg @ kv) + K.T @ qu + qux.T @ kv
        vxx = qxx + K.T @ (quu_reg @ K) + K.T @ qux + qux.T @ K
        vxx = 0.5 * (vxx + vxx.T)
    return kff, kfb, grad_inf


def _forward(A, B, C, xs_ref, us_ref, uprev_ref, u_prev0, kff, kfb, alpha):
    n_h, n, m = B.shape
    xs = np.empty_like(xs_ref)
    us = np.empty_like(us_ref)
    xs[0] = xs_ref[0]
    u_prev = u_prev0
    for k in range(n_h):
        dxa = np.concatenate([xs[k] - xs_ref[k], u_prev - uprev_ref[k]])
        us[k] = us_ref[k] + alpha * kff[k] + kfb[k] @ dxa
        xs[k + 1] = A[k] @ xs[k] + B[k] @ us[k] + C[k]
        u_prev = us[k]
    return xs, us
