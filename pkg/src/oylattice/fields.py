"""Moving-frame test functions and the functionals measured along trajectories.

Microscopic time ``s`` drives the frame: slot ``j`` sits at
``x_j = (j - s - a_n sqrt(n)) / sqrt(n)``.  Time integrals of the drift
pieces (S, B, Btilde, the block statistics) are accumulated with the
macroscopic measure ``dt / n``, so that they are the integrals over
``[0, t]`` with ``t = s / n``.  The martingale, its bracket, the drift bucket
and the frame bucket are increments of the field itself and carry no time
normalization.

Slot arrays are 0-based internally: index ``i`` holds slot ``j = i + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .dynamics import LatticeState, NoiseBlock, centered_W
from . import _kernels as K
from .special import ModelParams


class FrameError(ValueError):
    """The test-function support leaves the simulated lattice."""


@dataclass(frozen=True)
class TestFunction:
    phi: Callable[[np.ndarray], np.ndarray]
    dphi: Callable[[np.ndarray], np.ndarray]
    d2phi: Callable[[np.ndarray], np.ndarray]
    support_radius: float
    label: str

    __test__ = False  # not a pytest class

    def energy_dphi(self) -> float:
        """``int (phi')^2 dx`` by adaptive quadrature."""
        from scipy.integrate import quad

        R = self.support_radius
        return quad(lambda x: float(self.dphi(np.array(x))) ** 2, -R, R, limit=200)[0]

    def energy(self) -> float:
        from scipy.integrate import quad

        R = self.support_radius
        return quad(lambda x: float(self.phi(np.array(x))) ** 2, -R, R, limit=200)[0]


def _gauss(x):
    return np.exp(-0.5 * x * x)


GAUSSIAN = TestFunction(
    phi=_gauss,
    dphi=lambda x: -x * _gauss(x),
    d2phi=lambda x: (x * x - 1.0) * _gauss(x),
    support_radius=8.0,
    label="gaussian",
)

HERMITE1 = TestFunction(
    phi=lambda x: x * _gauss(x),
    dphi=lambda x: (1.0 - x * x) * _gauss(x),
    d2phi=lambda x: (x**3 - 3.0 * x) * _gauss(x),
    support_radius=8.0,
    label="hermite1",
)

_BUMP_R = 3.0


def _bump_parts(x):
    y = np.asarray(x, dtype=float) / _BUMP_R
    inside = np.abs(y) < 1.0
    q = np.where(inside, 1.0 - y * y, 1.0)
    val = np.where(inside, np.exp(1.0 - 1.0 / q), 0.0)
    g1 = -2.0 * y / (q * q)
    g2 = -2.0 / (q * q) - 8.0 * y * y / (q * q * q)
    return val, g1, g2


def _bump(x):
    return _bump_parts(x)[0]


def _dbump(x):
    val, g1, _ = _bump_parts(x)
    return val * g1 / _BUMP_R


def _d2bump(x):
    val, g1, g2 = _bump_parts(x)
    return val * (g1 * g1 + g2) / _BUMP_R**2


BUMP = TestFunction(phi=_bump, dphi=_dbump, d2phi=_d2bump, support_radius=_BUMP_R, label="bump")

CATALOG = {tf.label: tf for tf in (GAUSSIAN, HERMITE1, BUMP)}


def shifted(tf: TestFunction, offset: float, label: Optional[str] = None) -> TestFunction:
    """``x -> tf(x - offset)`` with an enlarged support radius."""
    return TestFunction(
        phi=lambda x: tf.phi(x - offset),
        dphi=lambda x: tf.dphi(x - offset),
        d2phi=lambda x: tf.d2phi(x - offset),
        support_radius=tf.support_radius + abs(offset),
        label=label or f"{tf.label}@{offset:+g}",
    )


@dataclass(frozen=True)
class Frame:
    center: float
    scale: float

    @classmethod
    def at(cls, s: float, params: ModelParams) -> "Frame":
        return cls(s + params.frame_offset, params.sqrt_n)

    def coords(self, J: int) -> np.ndarray:
        return (np.arange(1, J + 1) - self.center) / self.scale


def check_frame(tf: TestFunction, frame: Frame, J: int, block: int = 0) -> None:
    reach = frame.center + tf.support_radius * frame.scale + block
    if reach >= J:
        raise FrameError(
            f"support of '{tf.label}' reaches slot {reach:.1f} but the lattice has J={J}"
        )


def _cutoff(values, x, R):
    return np.where(np.abs(x) <= R, values, 0.0)


def discretize(tf: TestFunction, frame: Frame, params: ModelParams, block: int = 0) -> np.ndarray:
    """``phi^n_j = phi((j - center) / sqrt(n))`` for ``j = 1..J``."""
    check_frame(tf, frame, params.J, block)
    x = frame.coords(params.J)
    return _cutoff(tf.phi(x), x, tf.support_radius)


def grad_n(phi: np.ndarray, params: ModelParams) -> np.ndarray:
    """``(sqrt(n)/2)(phi_{j+1} - phi_{j-1})`` with zero outside the lattice."""
    p = np.pad(phi, 1)
    return 0.5 * params.sqrt_n * (p[2:] - p[:-2])


def lap_n(phi: np.ndarray, params: ModelParams) -> np.ndarray:
    """``(n/2)(phi_{j+1} + phi_{j-1} - 2 phi_j)`` with zero outside the lattice."""
    p = np.pad(phi, 1)
    return 0.5 * params.n * (p[2:] + p[:-2] - 2.0 * phi)


def field_X(state: LatticeState, tf: TestFunction, params: ModelParams) -> np.ndarray:
    phi = discretize(tf, Frame.at(state.s, params), params)
    return ((state.u - params.rho) * phi).sum(axis=-1)


def field_Xtilde(state: LatticeState, tf: TestFunction, params: ModelParams) -> np.ndarray:
    phi = discretize(tf, Frame.at(state.s, params), params)
    return (centered_W(state.u, params) * grad_n(phi, params)).sum(axis=-1)


def block_averages(wbar: np.ndarray, l: int) -> np.ndarray:
    """All block means ``mean(Wbar_j .. Wbar_{j+l-1})`` for ``j = 1..J-l+1``."""
    if l < 1:
        raise ValueError(f"block length must be positive, got {l}")
    J = wbar.shape[-1]
    if l > J:
        raise ValueError(f"block of length {l} exceeds lattice of {J} slots")
    cs = np.zeros(wbar.shape[:-1] + (J + 1,))
    np.cumsum(wbar, axis=-1, out=cs[..., 1:])
    return (cs[..., l:] - cs[..., :-l]) / l


def _check_block(J: int, l: int, j: int) -> None:
    if l < 1 or j < 1 or j + l - 1 > J:
        raise IndexError(f"block [{j}, {j + l - 1}] is not inside slots 1..{J}")


def block_average(state: LatticeState, l: int, j: int, params: ModelParams) -> np.ndarray:
    _check_block(state.J, l, j)
    wbar = centered_W(state.u[..., j - 1:j - 1 + l], params)
    return wbar.mean(axis=-1)


def q_stat(state: LatticeState, l: int, j: int, params: ModelParams) -> np.ndarray:
    """Squared block mean recentred by its stationary value ``sigma_n^2 / l``."""
    return block_average(state, l, j, params) ** 2 - params.sigma2 / l


def cubic_q_stat(state: LatticeState, l: int, j: int, params: ModelParams) -> np.ndarray:
    return block_average(state, l, j, params) ** 3


def eps_to_block(eps: float, params: ModelParams) -> int:
    return max(2, int(round(eps * params.sqrt_n)))


@dataclass
class TrajectoryFunctionals:
    """Accumulators for a batch of replicas (leading axis = replica).

    All running sums live in one array ``acc`` of shape (batch, K); the named
    attributes are views into it.  Paths are sampled every ``cadence`` steps
    and ``times`` holds the microscopic sample times.  ``QV`` is
    deterministic and shared by all replicas.
    """

    params: ModelParams
    tf: TestFunction
    batch: int
    l_grid: Sequence[int] = ()
    eps_grid: Sequence[float] = ()
    cubic: bool = False
    diagnostics: bool = True
    track_residual: bool = False
    cadence: Optional[int] = None

    acc: np.ndarray = field(init=False, repr=False)
    QV: float = field(init=False, default=0.0)
    X0: Optional[np.ndarray] = field(init=False, default=None)
    max_residual: np.ndarray = field(init=False, repr=False)
    steps: int = field(init=False, default=0)
    times: list = field(init=False, default_factory=list)
    samples: Dict[str, list] = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        if self.cadence is None:
            self.cadence = max(1, math.ceil(1.0 / (10.0 * self.params.dt)))
        self.l_grid = sorted(set(int(l) for l in self.l_grid)
                             | {eps_to_block(e, self.params) for e in self.eps_grid})
        L = len(self.l_grid)
        self.acc = np.zeros((self.batch, K.N_FIXED + L * (2 if self.cubic else 1)))
        self.max_residual = np.zeros(self.batch)
        self._phi = None
        self._phi_s = None

    # views into acc
    M = property(lambda self: self.acc[:, K.M])
    QV_realized = property(lambda self: self.acc[:, K.QVR])
    drift_acc = property(lambda self: self.acc[:, K.DRIFT])
    frame_acc = property(lambda self: self.acc[:, K.FRAME])
    S_acc = property(lambda self: self.acc[:, K.S])
    B_acc = property(lambda self: self.acc[:, K.B])
    Btilde_acc = property(lambda self: self.acc[:, K.BTILDE])
    cubic_acc = property(lambda self: self.acc[:, K.CUBIC])

    @property
    def Q_integrals(self) -> Dict[int, np.ndarray]:
        return {l: self.acc[:, K.N_FIXED + a] for a, l in enumerate(self.l_grid)}

    @property
    def cubic_Q_integrals(self) -> Dict[int, np.ndarray]:
        if not self.cubic:
            return {}
        L = len(self.l_grid)
        return {l: self.acc[:, K.N_FIXED + L + a] for a, l in enumerate(self.l_grid)}

    @property
    def A_eps(self) -> Dict[float, np.ndarray]:
        return {e: self.Q_integrals[eps_to_block(e, self.params)] for e in self.eps_grid}

    @property
    def max_block(self) -> int:
        return (max(self.l_grid) if self.l_grid else 0) + 1

    def phi_at(self, s: float) -> np.ndarray:
        if self._phi_s != s:
            self._phi = discretize(self.tf, Frame.at(s, self.params), self.params, self.max_block)
            self._phi_s = s
        return self._phi

    def _scalars(self) -> Dict[str, np.ndarray]:
        out = {"M": self.M.copy(), "QV": np.full(self.batch, self.QV),
               "QV_realized": self.QV_realized.copy(), "drift": self.drift_acc.copy(),
               "frame": self.frame_acc.copy(), "Btilde": self.Btilde_acc.copy()}
        if self.diagnostics:
            out["S"] = self.S_acc.copy()
            out["B"] = self.B_acc.copy()
        for l, acc in self.Q_integrals.items():
            out[f"Q[{l}]"] = acc.copy()
        if self.cubic:
            out["cubic"] = self.cubic_acc.copy()
            for l, acc in self.cubic_Q_integrals.items():
                out[f"cubicQ[{l}]"] = acc.copy()
        return out

    def record(self, state: LatticeState) -> None:
        phi = self.phi_at(state.s)
        wbar = centered_W(state.u, self.params)
        row = self._scalars()
        row["X"] = np.broadcast_to(((state.u - self.params.rho) * phi).sum(axis=-1), (self.batch,)).copy()
        row["Xtilde"] = np.broadcast_to((wbar * grad_n(phi, self.params)).sum(axis=-1), (self.batch,)).copy()
        if self.X0 is None:
            self.X0 = row["X"].copy()
        self.times.append(state.s)
        for k, v in row.items():
            self.samples.setdefault(k, []).append(v)

    def path(self, name: str) -> np.ndarray:
        """Sampled path of a functional, shape (batch, n_samples)."""
        return np.stack(self.samples[name], axis=-1)

    def paths(self) -> Dict[str, np.ndarray]:
        return {k: np.stack(v, axis=-1) for k, v in self.samples.items()}

    def replica(self, i: int) -> Dict[str, np.ndarray]:
        return {k: np.stack(v, axis=-1)[i] for k, v in self.samples.items()}


def _noise_coefficients(phi: np.ndarray) -> np.ndarray:
    # sum_j phi_j (xi_j - xi_{j-1}) regrouped by xi_0..xi_J
    coef = np.empty(phi.size + 1)
    coef[0] = -phi[0]
    coef[1:-1] = phi[:-1] - phi[1:]
    coef[-1] = phi[-1]
    return coef


def accumulate(traj: TrajectoryFunctionals, before: LatticeState, noise: NoiseBlock,
               after: LatticeState, tf: Optional[TestFunction] = None,
               params: Optional[ModelParams] = None) -> TrajectoryFunctionals:
    """Add one Euler step's contribution to every accumulator (numpy reference)."""
    p = traj.params if params is None else params
    if tf is not None and tf is not traj.tf:
        raise ValueError("test function does not match the accumulator")
    if before.u.shape != after.u.shape or noise.xi.shape[-1] != before.J + 1:
        raise ValueError("mismatched step data")
    dt = after.s - before.s
    if not math.isclose(dt, p.dt, rel_tol=1e-9):
        raise ValueError(f"step size {dt} does not match params.dt={p.dt}")
    if traj.steps == 0 and not traj.times:
        traj.record(before)

    acc = traj.acc
    sqn = p.sqrt_n
    mdt = dt / p.n  # macroscopic time measure
    phi = traj.phi_at(before.s)
    phi_next = discretize(traj.tf, Frame.at(after.s, p), p, traj.max_block)
    u = before.u
    wbar = centered_W(u, p)
    d = np.empty_like(wbar)
    d[..., 0] = -wbar[..., 0]
    d[..., 1:] = wbar[..., :-1] - wbar[..., 1:]
    grad = grad_n(phi, p)

    coef = _noise_coefficients(phi)
    dM = (p.beta * math.sqrt(dt)) * (noise.xi * coef).sum(axis=-1)
    acc[:, K.M] += dM
    acc[:, K.QVR] += dM * dM
    traj.QV += p.beta**2 * dt * float((coef * coef).sum())
    acc[:, K.DRIFT] += dt * (phi * d).sum(axis=-1)
    acc[:, K.FRAME] += ((after.u - p.rho) * (phi_next - phi)).sum(axis=-1)
    if traj.diagnostics:
        x = Frame.at(before.s, p).coords(p.J)
        dphi_x = _cutoff(traj.tf.dphi(x), x, traj.tf.support_radius)
        acc[:, K.S] += mdt * 0.5 * (wbar * lap_n(phi, p)).sum(axis=-1)
        acc[:, K.B] += mdt * sqn * (wbar * grad - (u - p.rho) * dphi_x).sum(axis=-1)
    pair = wbar[..., :-1] * wbar[..., 1:]  # Wbar_{j-1} Wbar_j for j = 2..J
    acc[:, K.BTILDE] += mdt * sqn * (pair * grad[1:]).sum(axis=-1)
    if traj.cubic:
        triple = pair[..., :-1] * wbar[..., 2:]  # centred at j = 2..J-1
        acc[:, K.CUBIC] += mdt * sqn * (triple * grad[1:-1]).sum(axis=-1)
    L = len(traj.l_grid)
    if L:
        cs = np.zeros(wbar.shape[:-1] + (p.J + 1,))
        np.cumsum(wbar, axis=-1, out=cs[..., 1:])
        for a, l in enumerate(traj.l_grid):
            avg = (cs[..., l:] - cs[..., :-l]) * (1.0 / l)  # block starting at j = 1..J-l+1
            m = avg.shape[-1]
            q = avg * avg - p.sigma2 / l
            acc[:, K.N_FIXED + a] += mdt * sqn * (q * grad[:m]).sum(axis=-1)
            if traj.cubic:
                # (block starting at j+1)^3 against grad at j
                cube = avg[..., 1:] * avg[..., 1:] * avg[..., 1:]
                acc[:, K.N_FIXED + L + a] += mdt * sqn * (cube * grad[:m - 1]).sum(axis=-1)

    traj.steps += 1
    if traj.track_residual:
        X_after = ((after.u - p.rho) * phi_next).sum(axis=-1)
        lhs = X_after - traj.X0
        drift_, frame_, M_ = acc[:, K.DRIFT], acc[:, K.FRAME], acc[:, K.M]
        rhs = drift_ + frame_ + M_
        scale = np.abs(lhs) + np.abs(drift_) + np.abs(frame_) + np.abs(M_)
        resid = np.abs(lhs - rhs) / np.maximum(scale, np.finfo(float).tiny)
        np.maximum(traj.max_residual, resid, out=traj.max_residual)
    traj._phi, traj._phi_s = phi_next, after.s
    if traj.steps % traj.cadence == 0:
        traj.record(after)
    return traj


def _support_window(phi: np.ndarray, phi_next: np.ndarray):
    nz = np.flatnonzero((phi != 0.0) | (phi_next != 0.0))
    if nz.size == 0:
        return 0, 0
    return max(0, int(nz[0]) - 1), min(phi.size, int(nz[-1]) + 2)


def run_trajectory(state: LatticeState, params: ModelParams, noise, traj: TrajectoryFunctionals,
                   n_steps: Optional[int] = None, engine: str = "compiled") -> LatticeState:
    """Evolve ``state`` and accumulate ``traj`` along the way.

    ``engine="numpy"`` runs ``euler_step`` + ``accumulate``; ``"compiled"``
    runs the fused kernel, which performs the same arithmetic per replica.
    """
    from .dynamics import drift, euler_step, InstabilityError

    n_steps = params.n_steps if n_steps is None else n_steps
    if engine == "numpy":
        for k in range(n_steps):
            xi = noise()
            new = euler_step(state, xi, params, step=k, d=drift(state, params))
            accumulate(traj, state, xi, new)
            state = new
        return state
    if engine != "compiled":
        raise ValueError(f"unknown engine {engine!r}")

    from . import _kernels

    u = np.array(np.atleast_2d(state.u), dtype=float, order="C")
    s = state.s
    p = params
    ls = np.asarray(traj.l_grid, dtype=np.int64)
    if traj.steps == 0 and not traj.times:
        traj.record(LatticeState(s, u if state.u.ndim == 2 else u[0]))
    x0 = np.broadcast_to(traj.X0, (u.shape[0],)).astype(float)
    for k in range(n_steps):
        xi = np.atleast_2d(noise().xi)
        phi = traj.phi_at(s)
        s_next = s + p.dt
        phi_next = discretize(traj.tf, Frame.at(s_next, p), p, traj.max_block)
        grad = grad_n(phi, p)
        if traj.diagnostics:
            x = Frame.at(s, p).coords(p.J)
            dphi_x = _cutoff(traj.tf.dphi(x), x, traj.tf.support_radius)
            lap = lap_n(phi, p)
        else:
            dphi_x = lap = grad
        lo, hi = _support_window(phi, phi_next)
        coef = _noise_coefficients(phi)
        bad = _kernels.fused_step(u, xi, phi, phi_next, grad, lap, dphi_x, lo, hi,
                                  p.beta, p.dt, p.rho, p.sigma2, p.sqrt_n, float(p.n), ls,
                                  traj.cubic, traj.diagnostics, traj.acc, x0,
                                  traj.max_residual, traj.track_residual)
        if bad >= 0:
            r, j = divmod(int(bad), p.J)
            raise InstabilityError(f"scheme unstable at step {k}, slot {j + 1}, replica {r}",
                                   step=k, slot=j + 1, replica=(r,))
        traj.QV += p.beta**2 * p.dt * float((coef * coef).sum())
        traj.steps += 1
        traj._phi, traj._phi_s = phi_next, s_next
        s = s_next
        if traj.steps % traj.cadence == 0:
            traj.record(LatticeState(s, u if state.u.ndim == 2 else u[0]))
    return LatticeState(s, u if state.u.ndim == 2 else u[0].copy())


# --- generator on polynomial cylinder functions -------------------------------

MONOMIALS = {
    "u_j^2": {0: 2},
    "u_j^3": {0: 3},
    "u_{j-1}^2 u_j": {-1: 2, 0: 1},
    "u_{j-1}^2 u_{j+1}": {-1: 2, 1: 1},
    "u_{j-1} u_j u_{j+1}": {-1: 1, 0: 1, 1: 1},
}


def _d(mono, k):
    """Partial derivative of a monomial {offset: power} w.r.t. offset k."""
    p = mono.get(k, 0)
    if p == 0:
        return 0, {}
    out = dict(mono)
    if p == 1:
        del out[k]
    else:
        out[k] = p - 1
    return p, out


def _eval(coef, mono, u, j):
    if coef == 0:
        return 0.0
    val = coef
    for k, p in mono.items():
        val = val * u[..., j - 1 + k] ** p
    return val


def generator_monomial(state: LatticeState, name: str, j: int, params: ModelParams):
    """Apply the generator to a supported monomial and evaluate it on ``state``.

    ``L = (beta^2/2) sum_k (d_k - d_{k-1})^2 + sum_k (Wbar_{k-1} - Wbar_k) d_k``
    with ``Wbar_0 = 0``.  ``j`` is a 1-based slot with room for the offsets.
    """
    try:
        mono = MONOMIALS[name]
    except KeyError:
        raise ValueError(f"unsupported monomial {name!r}; choose from {sorted(MONOMIALS)}") from None
    offsets = sorted(mono)
    if j + offsets[0] - 1 < 1 or j + offsets[-1] + 1 > state.J:
        raise IndexError(f"slot {j} is not interior for {name!r}")
    u = state.u
    wbar = centered_W(u, params)

    def wb(k):  # Wbar at offset k from j (slot 0 is the zero boundary)
        idx = j - 1 + k
        return 0.0 if idx < 0 else wbar[..., idx]

    b2 = params.beta**2
    total = 0.0
    involved = set(offsets)
    for k in involved:
        c1, m1 = _d(mono, k)
        # drift
        total = total + (wb(k - 1) - wb(k)) * _eval(c1, m1, u, j)
        # diagonal second derivative: beta^2 d_k^2
        c2, m2 = _d(m1, k)
        total = total + b2 * _eval(c1 * c2, m2, u, j)
        # mixed: -beta^2 d_k d_{k-1} for each adjacent pair
        if k - 1 in involved:
            c3, m3 = _d(m1, k - 1)
            total = total - b2 * _eval(c1 * c3, m3, u, j)
    return total
