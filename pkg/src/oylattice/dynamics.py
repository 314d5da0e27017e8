"""Lattice time evolution.

Two integrators share one noise convention: a block ``xi`` of ``J + 1``
standard Gaussians per step, slot 0 realizing the boundary motion B^(0).

* ``euler_step`` advances the increments ``u_j`` (the main engine);
* ``h_step`` advances the log-partition functions ``h_j`` and serves as a
  pathwise oracle, since ``u_j = h_j - h_{j-1}`` must be reproduced.

The drift of ``u_j`` only involves ``u_{j-1}`` and ``u_j``, so the first
``J`` slots of the half-infinite system evolve autonomously and no right
boundary condition is needed.

All arrays may carry leading batch (replica) axes; the lattice is the last
axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .special import ModelParams, sample_u


class InstabilityError(RuntimeError):
    """Raised when the explicit scheme leaves its stability region."""

    def __init__(self, message, step=None, slot=None, replica=None):
        super().__init__(message)
        self.step = step
        self.slot = slot
        self.replica = replica


@dataclass(frozen=True)
class LatticeState:
    s: float
    u: np.ndarray

    @property
    def J(self) -> int:
        return self.u.shape[-1]


@dataclass(frozen=True)
class NoiseBlock:
    xi: np.ndarray


@dataclass(frozen=True)
class HState:
    s: float
    h: np.ndarray

    def increments(self) -> np.ndarray:
        return np.diff(self.h, axis=-1)


def centered_W(u: np.ndarray, params: ModelParams) -> np.ndarray:
    """``Wbar_j = 1 - e^{-u_j} + beta^2/2``."""
    return 1.0 - np.exp(-u) + 0.5 * params.beta**2


def drift(state: LatticeState, params: ModelParams) -> np.ndarray:
    """``d_j = Wbar_{j-1} - Wbar_j`` with ``Wbar_0 = 0``."""
    try:
        with np.errstate(over="raise"):
            wbar = centered_W(state.u, params)
    except FloatingPointError:
        idx = np.argwhere(state.u < -700.0)
        where = idx[0].tolist() if idx.size else "?"
        raise InstabilityError(f"exp(-u) overflows at index {where}") from None
    d = np.empty_like(wbar)
    d[..., 0] = -wbar[..., 0]
    d[..., 1:] = wbar[..., :-1] - wbar[..., 1:]
    return d


def noise_increment(noise: NoiseBlock, params: ModelParams) -> np.ndarray:
    """``beta (xi_j - xi_{j-1}) sqrt(dt)`` for j = 1..J."""
    xi = noise.xi
    return (params.beta * math.sqrt(params.dt)) * (xi[..., 1:] - xi[..., :-1])


def max_stable_dt(u: np.ndarray) -> float:
    """Step-size ceiling ``min(0.01, 1 / (4 max e^{-u}))``."""
    return min(0.01, 0.25 / float(np.max(np.exp(-u))))


def check_initial_dt(state: LatticeState, params: ModelParams) -> None:
    limit = max_stable_dt(state.u)
    if params.dt > limit * (1 + 1e-12):
        raise InstabilityError(f"dt={params.dt} exceeds the stability ceiling {limit:.4g} at initialization")


def _raise_unstable(d, u_new, dt, step):
    bad = ~np.isfinite(u_new) | ~(np.abs(d) * dt <= 1.0)
    idx = np.argwhere(bad)[0]
    replica = tuple(int(i) for i in idx[:-1]) or None
    raise InstabilityError(
        f"scheme unstable at step {step}, slot {int(idx[-1]) + 1}"
        + (f", replica {replica}" if replica else ""),
        step=step,
        slot=int(idx[-1]) + 1,
        replica=replica,
    )


def euler_step(state: LatticeState, noise: NoiseBlock, params: ModelParams, step: Optional[int] = None,
               d: Optional[np.ndarray] = None) -> LatticeState:
    """One Euler-Maruyama step of the u-system.

    ``d`` may be passed in when the caller already evaluated the drift.
    """
    if d is None:
        d = drift(state, params)
    dt = params.dt
    u_new = state.u + (d * dt + noise_increment(noise, params))
    if not (np.max(np.abs(d)) * dt <= 1.0 and np.isfinite(u_new).all()):
        _raise_unstable(d, u_new, dt, step)
    return LatticeState(state.s + dt, u_new)


def h_step(state: HState, noise: NoiseBlock, params: ModelParams, step: Optional[int] = None) -> HState:
    """One Euler-Maruyama step of the log-partition system.

    ``h_0`` follows ``theta dt + beta dB^(0)`` and, for ``j >= 1``,
    ``dh_j = e^{-(h_j - h_{j-1})} dt + beta dB^(j)``: the Ito term of the
    multiplicative equation for ``Z_j`` is cancelled by the logarithm.
    """
    dt = params.dt
    h = state.h
    xi = noise.xi
    sdt = params.beta * math.sqrt(dt)
    h_new = np.empty_like(h)
    h_new[..., 0] = h[..., 0] + params.theta * dt + sdt * xi[..., 0]
    inc = h[..., 1:] - h[..., :-1]
    h_new[..., 1:] = h[..., 1:] + np.exp(-inc) * dt + sdt * xi[..., 1:]
    if not np.isfinite(h_new).all():
        raise InstabilityError(f"non-finite log-partition at step {step}", step=step)
    return HState(state.s + dt, h_new)


def h_state_from(state: LatticeState, h0: float = 0.0) -> HState:
    """Log-partition state whose increments equal ``state.u``."""
    u = state.u
    h = np.empty(u.shape[:-1] + (u.shape[-1] + 1,))
    h[..., 0] = h0
    np.cumsum(u, axis=-1, out=h[..., 1:])
    h[..., 1:] += h0
    return HState(state.s, h)


def init_stationary(params: ModelParams, rng: np.random.Generator, batch: Optional[int] = None) -> LatticeState:
    """i.i.d. stationary slots at s = 0."""
    shape = (params.J,) if batch is None else (batch, params.J)
    return LatticeState(0.0, sample_u(params, rng, shape))


Observer = Callable[[int, LatticeState, NoiseBlock, LatticeState], None]


def simulate(state: LatticeState, params: ModelParams, noise_blocks, n_steps: int,
             observer: Optional[Observer] = None) -> LatticeState:
    """Advance ``n_steps`` Euler steps, pulling one NoiseBlock per step.

    ``noise_blocks`` is any callable returning the next NoiseBlock (for
    example a ``NoiseStream``).  ``observer(k, before, noise, after)`` runs
    after every step.
    """
    for k in range(n_steps):
        noise = noise_blocks()
        d = drift(state, params)
        new = euler_step(state, noise, params, step=k, d=d)
        if observer is not None:
            observer(k, state, noise, new)
        state = new
    return state


class NoiseStream:
    """Per-replica Gaussian streams delivered one NoiseBlock at a time.

    Every replica draws from its own generator in order, so the noise seen
    by a replica does not depend on which other replicas share the batch.
    Draws are buffered ``chunk`` steps at a time.
    """

    def __init__(self, rngs, width: int, chunk: Optional[int] = None, squeeze: bool = False):
        self.rngs = list(rngs)
        self.width = width
        if chunk is None:
            # keep the buffer around 16 MB
            chunk = max(1, min(256, (2 * 1024 * 1024) // max(1, len(self.rngs) * width)))
        self.chunk = chunk
        self.squeeze = squeeze and len(self.rngs) == 1
        self._buf = np.empty((len(self.rngs), chunk, width))
        self._pos = chunk

    def _refill(self):
        for r, g in enumerate(self.rngs):
            g.standard_normal(out=self._buf[r])
        self._pos = 0

    def __call__(self) -> NoiseBlock:
        if self._pos == self.chunk:
            self._refill()
        xi = self._buf[:, self._pos, :]
        self._pos += 1
        if self.squeeze:
            xi = xi[0]
        return NoiseBlock(np.array(xi))


def log_partition_recursion(increments: np.ndarray, beta: float, dt: float) -> float:
    """Point-to-point log partition function by the log-domain recursion.

    ``increments[m-1, k]`` is the Brownian increment of B^(m) over step k.
    Variation of constants gives ``Z_j(s + dt) = e^{beta dB_j} (Z_j(s) +
    Z_{j-1}(s) dt)``; in logs this is a log-add-exp update started from
    ``h_1 = 0`` and ``h_j = -inf`` for ``j >= 2``.
    """
    inc = np.atleast_2d(np.asarray(increments, dtype=float))
    m, steps = inc.shape
    h = np.full(m, -np.inf)
    h[0] = 0.0
    logdt = math.log(dt)
    for k in range(steps):
        prev = h.copy()
        h[1:] = np.logaddexp(prev[1:], prev[:-1] + logdt)
        h += beta * inc[:, k]
    return float(h[-1])


def quadrature_partition(paths: np.ndarray, beta: float, dt: float) -> float:
    """Iterated simplex integral for the point-to-point partition function.

    ``paths[i]`` holds B^(i+1) on the uniform grid ``0, dt, ..., t`` (linear
    interpolation between nodes).  The innermost integrals are accumulated
    with the composite trapezoid rule.  Levels above 3 are not supported.
    """
    B = np.atleast_2d(np.asarray(paths, dtype=float))
    m = B.shape[0]
    if m > 3:
        raise ValueError(f"quadrature oracle supports levels m <= 3, got {m}")
    if m == 1:
        return math.exp(beta * (B[0, -1] - B[0, 0]))
    # inner(s) = integral over the sub-simplex ending at s of the weights
    # exp(beta * sum of level increments) with the last level left open.
    inner = np.ones(B.shape[1])
    base = B[0] - B[0, 0]
    for level in range(1, m):
        g = inner * np.exp(beta * (base - B[level]))
        cum = np.empty_like(g)
        cum[0] = 0.0
        np.cumsum(0.5 * dt * (g[1:] + g[:-1]), out=cum[1:])
        inner = cum
        base = B[level]
    return float(inner[-1] * math.exp(beta * B[-1, -1]))
