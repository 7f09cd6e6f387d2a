"""Independent oracle implementations used only by the tests.

Each oracle re-derives a quantity the library computes, through a different
route: scalar math instead of vectorized numpy, exhaustive search instead of
indexed queries, dynamic-programming recursions instead of iterative
solvers.  They are deliberately written without reusing the library's
internals beyond basic data containers.
"""

import math

import numpy as np


def bicycle_derivative_scalar(x, u, kappa, p):
    """Second implementation of the tire/chassis model, scalar math only."""
    vx, vy, wz, epsi, _, ey = [float(v) for v in x]
    a, delta = float(u[0]), float(u[1])
    alpha_f = delta - math.atan2(vy + p.lf * wz, vx)
    alpha_r = -math.atan2(vy - p.lr * wz, vx)
    fyf = p.tire_d_front * math.sin(p.tire_c_front * math.atan(p.tire_b_front * alpha_f))
    fyr = p.tire_d_rear * math.sin(p.tire_c_rear * math.atan(p.tire_b_rear * alpha_r))
    den = 1.0 - kappa * ey
    progress = (vx * math.cos(epsi) - vy * math.sin(epsi)) / den
    return [
        a - fyf * math.sin(delta) / p.mass + wz * vy,
        (fyf * math.cos(delta) + fyr) / p.mass - wz * vx,
        (p.lf * fyf * math.cos(delta) - p.lr * fyr) / p.yaw_inertia,
        wz - progress * kappa,
        progress,
        vx * math.sin(epsi) + vy * math.cos(epsi),
    ]


def riccati_affine_lqr(A, B, C, qn_diag, z_goal, r_diag, x0):
    """Exact affine-LQR optimum via the backward value recursion.

    Handles x' = Ax + Bu + c with cost |x_N - z|^2_QN + sum |u|^2_R by
    propagating V(x) = x'Px + 2 q'x + const.
    """
    n_h, n, m = B.shape
    P = np.diag(qn_diag).astype(float)
    q = -np.diag(qn_diag) @ z_goal
    R = np.diag(r_diag)
    gains = []
    for k in range(n_h - 1, -1, -1):
        Ak, Bk, Ck = A[k], B[k], C[k]
        H = R + Bk.T @ P @ Bk
        Hinv = np.linalg.inv(H)
        K = Hinv @ Bk.T @ P @ Ak
        d = Hinv @ Bk.T @ (P @ Ck + q)
        gains.append((K, d))
        AK = Ak - Bk @ K
        q_new = AK.T @ (P @ (Ck - Bk @ d) + q) + K.T @ R @ d
        P = K.T @ R @ K + AK.T @ P @ AK
        P = 0.5 * (P + P.T)
        q = q_new
    gains.reverse()
    xs = np.zeros((n_h + 1, n))
    us = np.zeros((n_h, m))
    xs[0] = x0
    for k in range(n_h):
        K, d = gains[k]
        us[k] = -K @ xs[k] - d
        xs[k + 1] = A[k] @ xs[k] + B[k] @ us[k] + C[k]
    return xs, us


def riccati_affine_lqr_with_rate(A, B, C, qn_diag, z_goal, r_diag, dr_diag, u_prev, x0):
    """Rate-penalized variant solved on the (x, u_prev) augmented system.

    Stage cost on the augmented state z = (x, u_prev):
    z'Mz + u'Ru u + 2 z'N u with M = S'dR S, Ru = R + dR, N = -S'dR and
    S the selector of u_prev.  The recursion propagates V(z) = z'Pz + 2q'z.
    """
    n_h, n, m = B.shape
    na = n + m
    A_aug = np.zeros((n_h, na, na))
    B_aug = np.zeros((n_h, na, m))
    C_aug = np.zeros((n_h, na))
    A_aug[:, :n, :n] = A
    B_aug[:, :n, :] = B
    B_aug[:, n:, :] = np.eye(m)
    C_aug[:, :n] = C

    R = np.diag(r_diag).astype(float)
    dR = np.diag(dr_diag).astype(float)
    M = np.zeros((na, na))
    M[n:, n:] = dR
    N_cross = np.zeros((na, m))
    N_cross[n:, :] = -dR
    Ru = R + dR

    P = np.zeros((na, na))
    P[:n, :n] = np.diag(qn_diag)
    q = np.zeros(na)
    q[:n] = -np.diag(qn_diag) @ z_goal
    gains = []
    for k in range(n_h - 1, -1, -1):
        Ak, Bk, Ck = A_aug[k], B_aug[k], C_aug[k]
        H = Ru + Bk.T @ P @ Bk
        Hinv = np.linalg.inv(H)
        K = Hinv @ (N_cross.T + Bk.T @ P @ Ak)
        d = Hinv @ (Bk.T @ (P @ Ck + q))
        gains.append((K, d))
        AK = Ak - Bk @ K
        P_new = M + K.T @ Ru @ K - N_cross @ K - K.T @ N_cross.T + AK.T @ P @ AK
        q_new = K.T @ (Ru @ d) - N_cross @ d + AK.T @ (P @ (Ck - Bk @ d) + q)
        P = 0.5 * (P_new + P_new.T)
        q = q_new
    gains.reverse()
    xs_aug = np.zeros((n_h + 1, na))
    xs_aug[0, :n] = x0
    xs_aug[0, n:] = u_prev
    us = np.zeros((n_h, m))
    for k in range(n_h):
        K, d = gains[k]
        us[k] = -K @ xs_aug[k] - d
        xs_aug[k + 1] = A_aug[k] @ xs_aug[k] + B_aug[k] @ us[k] + C_aug[k]
    return xs_aug[:, :n], us


def brute_force_knn(pool_states, pool_cost, pool_lap, pool_step, x_query, k, weights):
    """Exhaustive nearest-neighbor search mirroring the query's tie rules."""
    entries = []
    for i in range(len(pool_states)):
        d2 = 0.0
        for j in range(6):
            diff = pool_states[i][j] - x_query[j]
            d2 += weights[j] * diff * diff
        entries.append((d2, pool_cost[i], pool_lap[i], pool_step[i], i))
    entries.sort()
    picked = []
    seen = set()
    for d2, cost, lap, step, i in entries:
        key = tuple(pool_states[i])
        if key in seen:
            continue
        seen.add(key)
        picked.append((d2, cost, lap, step, i))
        if len(picked) == k:
            break
    picked.sort(key=lambda t: (t[1], t[0], t[2], t[3]))
    return [t[4] for t in picked]


def arc_length_point(segments, s_target, step=1e-5):
    """Global point at arc length s via brute-force heading integration."""
    x = y = h = 0.0
    remaining = s_target
    for length, kappa in segments:
        if remaining <= 0:
            break
        span = min(length, remaining)
        n = max(1, int(span / step))
        du = span / n
        for _ in range(n):
            x += du * math.cos(h + kappa * du / 2.0)
            y += du * math.sin(h + kappa * du / 2.0)
            h += kappa * du
        remaining -= span
    return x, y, h
