"""Compiled inner loop: one Euler step fused with all trajectory accumulators.

Mirrors ``dynamics.euler_step`` followed by ``fields.accumulate``; the numpy
pair stays the reference implementation and the test suite checks that the
two agree.
"""

import math

import numpy as np
from numba import njit

# accumulator columns
M, QVR, DRIFT, FRAME, S, B, BTILDE, CUBIC = range(8)
N_FIXED = 8


@njit(cache=True)
def fused_step(u, xi, phi, phi_next, grad, lap, dphi_x, lo, hi,
               beta, dt, rho, sigma2, sqrt_n, n, ls, do_cubic, do_diag,
               acc, x0, max_resid, track_residual):
    """Advance ``u`` (R, J) in place by one step and update ``acc`` (R, K).

    ``lo:hi`` bounds the slots where the test function (and its gradient,
    padded by one slot) is nonzero; sums outside vanish identically.
    Returns -1 on success, otherwise ``replica * J + slot`` of the first
    instability.
    """
    R, J = u.shape
    b2h = 0.5 * beta * beta
    sb = beta * math.sqrt(dt)
    mdt = dt / n
    L = ls.shape[0]
    wbar = np.empty(J)
    cs = np.empty(J + 1)
    for r in range(R):
        for j in range(J):
            wbar[j] = 1.0 - math.exp(-u[r, j]) + b2h
        # field-level sums use the pre-step state
        m_inc = -phi[0] * xi[r, 0]
        drift_sum = 0.0
        s_sum = 0.0
        b_sum = 0.0
        bt_sum = 0.0
        c_sum = 0.0
        for j in range(lo, hi):
            dj = (wbar[j - 1] if j > 0 else 0.0) - wbar[j]
            drift_sum += phi[j] * dj
            nxt = phi[j + 1] if j + 1 < J else 0.0
            m_inc += (phi[j] - nxt) * xi[r, j + 1]
            if do_diag:
                s_sum += wbar[j] * lap[j]
                b_sum += wbar[j] * grad[j] - (u[r, j] - rho) * dphi_x[j]
            if j >= 1:
                pair = wbar[j - 1] * wbar[j]
                bt_sum += pair * grad[j]
                if do_cubic and j + 1 < J:
                    c_sum += pair * wbar[j + 1] * grad[j]
        if L > 0:
            cs[0] = 0.0
            for j in range(J):
                cs[j + 1] = cs[j] + wbar[j]
            for a in range(L):
                l = ls[a]
                inv = 1.0 / l
                q_sum = 0.0
                cq_sum = 0.0
                top = min(hi, J - l + 1)
                for j in range(lo, top):
                    avg = (cs[j + l] - cs[j]) * inv
                    q_sum += (avg * avg - sigma2 * inv) * grad[j]
                    if do_cubic and j + 1 + l <= J:
                        avg1 = (cs[j + 1 + l] - cs[j + 1]) * inv
                        cq_sum += avg1 * avg1 * avg1 * grad[j]
                acc[r, N_FIXED + a] += mdt * sqrt_n * q_sum
                if do_cubic:
                    acc[r, N_FIXED + L + a] += mdt * sqrt_n * cq_sum
        # Euler update over the whole lattice
        for j in range(J):
            dj = (wbar[j - 1] if j > 0 else 0.0) - wbar[j]
            if not (abs(dj) * dt <= 1.0):
                return r * J + j
            u_new = u[r, j] + (dj * dt + sb * (xi[r, j + 1] - xi[r, j]))
            if not math.isfinite(u_new):
                return r * J + j
            u[r, j] = u_new
        frame_sum = 0.0
        x_after = 0.0
        for j in range(J):
            if phi_next[j] != 0.0 or phi[j] != 0.0:
                frame_sum += (u[r, j] - rho) * (phi_next[j] - phi[j])
                x_after += (u[r, j] - rho) * phi_next[j]
        dm = sb * m_inc
        acc[r, M] += dm
        acc[r, QVR] += dm * dm
        acc[r, DRIFT] += dt * drift_sum
        acc[r, FRAME] += frame_sum
        acc[r, BTILDE] += mdt * sqrt_n * bt_sum
        if do_cubic:
            acc[r, CUBIC] += mdt * sqrt_n * c_sum
        if do_diag:
            acc[r, S] += mdt * 0.5 * s_sum
            acc[r, B] += mdt * sqrt_n * b_sum
        if track_residual:
            lhs = x_after - x0[r]
            rhs = acc[r, DRIFT] + acc[r, FRAME] + acc[r, M]
            scale = abs(lhs) + abs(acc[r, DRIFT]) + abs(acc[r, FRAME]) + abs(acc[r, M])
            if scale > 0.0:
                res = abs(lhs - rhs) / scale
                if res > max_resid[r]:
                    max_resid[r] = res
    return -1
