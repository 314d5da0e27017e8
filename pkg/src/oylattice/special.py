"""Special functions, scaled model constants and exact samplers of the stationary law.

The stationary increments satisfy ``e^{-u} ~ beta^2 * Gamma(nu)`` with
``beta = n^{-1/4}`` and ``nu = sqrt(n) + 1/2``.  Everything the dynamical
tests compare against (means, variances, the marginal CDF) lives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

SUPPORTED_N = (16, 64, 256, 1024, 4096)

# Recurrence threshold for the asymptotic series; at x >= 10 the first
# neglected term is below 1e-15.
_ASYMPTOTIC_FROM = 10.0

# Bernoulli-number coefficients B_{2k}/(2k) for digamma and B_{2k} for trigamma.
_DIGAMMA_COEFFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_TRIGAMMA_COEFFS = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


def _as_positive(x, name):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError(f"{name} requires x > 0, got {x!r}")
    return arr


def _scalar_or_array(out, x):
    return float(out) if np.ndim(x) == 0 else out


def digamma(x):
    """Psi_0(x) for x > 0 (scalar or array), absolute error below 1e-12.

    Shifts x upward with ``psi(x) = psi(x + 1) - 1/x`` until the asymptotic
    expansion ``log x - 1/(2x) - sum B_2k / (2k x^2k)`` is accurate.
    """
    arr = _as_positive(x, "digamma")
    z = np.array(arr, dtype=float, copy=True)
    shift = np.zeros_like(z)
    small = z < _ASYMPTOTIC_FROM
    while np.any(small):
        shift[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < _ASYMPTOTIC_FROM
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for c in reversed(_DIGAMMA_COEFFS):
        series = (series + c) * inv2
    out = np.log(z) - 0.5 / z - series + shift
    return _scalar_or_array(out, x)


def trigamma(x):
    """Psi_1(x) for x > 0 (scalar or array), absolute error below 1e-12."""
    arr = _as_positive(x, "trigamma")
    z = np.array(arr, dtype=float, copy=True)
    shift = np.zeros_like(z)
    small = z < _ASYMPTOTIC_FROM
    while np.any(small):
        shift[small] += 1.0 / (z[small] * z[small])
        z[small] += 1.0
        small = z < _ASYMPTOTIC_FROM
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for c in reversed(_TRIGAMMA_COEFFS):
        series = (series + c) * inv2
    out = 1.0 / z + 0.5 * inv2 + series / z + shift
    return _scalar_or_array(out, x)


@dataclass(frozen=True)
class ModelParams:
    """Scaled constants for a given ``n`` plus the lattice/time discretization.

    ``J`` is the number of simulated slots, ``dt`` the microscopic time step
    and ``T_macro`` the macroscopic horizon (microscopic time is ``n * t``).
    """

    n: int
    J: int = 256
    dt: float = 0.01
    T_macro: float = 0.0

    def __post_init__(self):
        if self.n not in SUPPORTED_N:
            raise ValueError(f"n must be one of {SUPPORTED_N}, got {self.n}")
        if self.J < 2:
            raise ValueError(f"J must be >= 2, got {self.J}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T_macro < 0:
            raise ValueError(f"T_macro must be nonnegative, got {self.T_macro}")

    @property
    def sqrt_n(self) -> float:
        return math.sqrt(self.n)

    @property
    def beta(self) -> float:
        return self.n ** -0.25

    @property
    def theta(self) -> float:
        return 1.0 + 0.5 / self.sqrt_n

    @property
    def nu(self) -> float:
        """Gamma shape ``beta^-2 theta = sqrt(n) + 1/2``."""
        return self.sqrt_n + 0.5

    @property
    def sigma2(self) -> float:
        """Stationary variance of ``W = 1 - e^{-u}``."""
        b2 = self.beta**2
        return b2 + 0.5 * b2 * b2

    @property
    def mean_W(self) -> float:
        return -0.5 * self.beta**2

    @property
    def rho(self) -> float:
        """Stationary mean of u, ``log(n)/2 - digamma(nu)``."""
        return 0.5 * math.log(self.n) - digamma(self.nu)

    @property
    def var_u(self) -> float:
        return trigamma(self.nu)

    @property
    def a_n(self) -> float:
        return self.n**0.25

    @property
    def frame_offset(self) -> float:
        """Initial frame centre ``a_n sqrt(n)`` in lattice units."""
        return self.a_n * self.sqrt_n

    @property
    def T_micro(self) -> float:
        return self.n * self.T_macro

    @property
    def n_steps(self) -> int:
        return int(round(self.T_micro / self.dt))

    def required_J(self, support_radius: float, block: int = 0) -> int:
        """Smallest lattice keeping the moving frame (plus a block) inside."""
        reach = self.T_micro + self.frame_offset + support_radius * self.sqrt_n
        return int(math.floor(reach)) + 2 + block

    def frame_violations(self, support_radius: float, block: int = 0) -> list[str]:
        need = self.required_J(support_radius, block)
        if self.J < need:
            return [
                f"J={self.J} too small: frame reaches slot {need - 1} "
                f"(n={self.n}, T_macro={self.T_macro}, R={support_radius}, block={block})"
            ]
        return []

    def with_lattice_for(self, support_radius: float, block: int = 0) -> "ModelParams":
        return ModelParams(self.n, self.required_J(support_radius, block), self.dt, self.T_macro)


def _marsaglia_tsang(shape: float, size: int, rng: np.random.Generator) -> np.ndarray:
    # Valid for shape >= 1.
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(size)
    todo = np.arange(size)
    while todo.size:
        m = todo.size
        x = rng.standard_normal(m)
        v = 1.0 + c * x
        ok = v > 0
        v = v * v * v
        logu = np.log(rng.random(m))
        with np.errstate(invalid="ignore", divide="ignore"):
            accept = ok & (logu < 0.5 * x * x + d - d * v + d * np.log(v))
        out[todo[accept]] = d * v[accept]
        todo = todo[~accept]
    return out


def sample_gamma(shape: float, rng: np.random.Generator, size=None):
    """Gamma(shape, 1) variates by Marsaglia-Tsang squeeze-free rejection.

    Shapes below one use the ``Gamma(a + 1) * U^{1/a}`` boost.
    """
    if not shape > 0:
        raise ValueError(f"Gamma shape must be positive, got {shape}")
    m = 1 if size is None else int(np.prod(size))
    if shape >= 1.0:
        out = _marsaglia_tsang(shape, m, rng)
    else:
        out = _marsaglia_tsang(shape + 1.0, m, rng) * rng.random(m) ** (1.0 / shape)
    if size is None:
        return float(out[0])
    return out.reshape(size)


def sample_u(params: ModelParams, rng: np.random.Generator, size=None):
    """Draw from the stationary marginal ``u = -log X + log(n)/2``, X ~ Gamma(nu)."""
    x = sample_gamma(params.nu, rng, size)
    return -np.log(x) + 0.5 * math.log(params.n)


def stationary_cdf(params: ModelParams, x):
    """P[u <= x] under the stationary marginal.

    ``u <= x`` iff ``X >= beta^-2 e^{-x}``, so this is the regularized upper
    incomplete gamma function at ``z = sqrt(n) e^{-x}``.
    """
    xa = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        z = params.sqrt_n * np.exp(-xa)
    out = _sp.gammaincc(params.nu, z)
    return float(out) if np.ndim(x) == 0 else out


def centered_abs_moment(params: ModelParams, k: int) -> float:
    """Closed form of E|u - Eu|^k for k = 2; other k raise."""
    if k == 2:
        return params.var_u
    raise NotImplementedError("only k=2 has a closed form here")
