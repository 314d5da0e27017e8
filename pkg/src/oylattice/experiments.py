"""Registry of named experiments, their default configurations and pass/fail checks.

Each experiment turns a configuration into an ``ExperimentResult``: raw
per-replica rows for the CSV, summary metrics, and a list of checks carrying
the measured value next to its threshold.  Kernels are module-level functions
so that batches can be shipped to worker processes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np

from .dynamics import (
    LatticeState,
    NoiseBlock,
    NoiseStream,
    check_initial_dt,
    euler_step,
    h_state_from,
    h_step,
    log_partition_recursion,
    quadrature_partition,
)
from .estimators import (
    ReplicaPlan,
    fit_power_law,
    fit_two_term,
    ks_statistic,
    replica_rng,
    run_replicas,
    summarize,
    sup_l2,
    variance_se,
)
from .fields import (
    CATALOG,
    MONOMIALS,
    TrajectoryFunctionals,
    eps_to_block,
    generator_monomial,
    run_trajectory,
)
from .special import SUPPORTED_N, ModelParams, sample_u, stationary_cdf

DEFAULT_SEED = 12345


@dataclass
class ExperimentConfig:
    experiment: str
    n_grid: List[int] = field(default_factory=list)
    J: Optional[int] = None
    dt: float = 0.01
    T_macro: Optional[float] = None
    T_micro: Optional[float] = None
    replicas: int = 1
    master_seed: int = DEFAULT_SEED
    l_grid: List[int] = field(default_factory=list)
    eps_grid: List[float] = field(default_factory=list)
    test_functions: List[str] = field(default_factory=lambda: ["gaussian"])
    samples: int = 0
    batch_size: int = 200
    workers: int = 1
    out: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def params(self, n: int, support_radius: float = 0.0, block: int = 0) -> ModelParams:
        """Model parameters for one ``n``; J is sized to the frame when not given."""
        T = self.horizon(n) / n
        if self.J is not None:
            return ModelParams(n, self.J, self.dt, T)
        return ModelParams(n, 2, self.dt, T).with_lattice_for(support_radius, block)

    def horizon(self, n: int) -> float:
        """Microscopic horizon for this ``n`` (0 when neither horizon is set)."""
        if self.T_micro is not None:
            return float(self.T_micro)
        return float(self.T_macro or 0.0) * n

    def max_block(self) -> int:
        blocks = list(self.l_grid)
        for n in self.n_grid:
            if n in SUPPORTED_N:
                p = ModelParams(n)
                blocks += [eps_to_block(e, p) for e in self.eps_grid]
                blocks += [eps_to_block(e / 2, p) for e in self.eps_grid]
        return (max(blocks) + 1) if blocks else 0

    def violations(self) -> List[str]:
        """Every violated invariant, empty when the configuration is runnable."""
        out = []
        exp = REGISTRY.get(self.experiment)
        if exp is None:
            out.append(f"unknown experiment {self.experiment!r}; choose from {sorted(REGISTRY)}")
        if not self.n_grid:
            out.append("n_grid is empty")
        bad_n = [n for n in self.n_grid if n not in SUPPORTED_N]
        if bad_n:
            out.append(f"unsupported n {bad_n}; supported: {list(SUPPORTED_N)}")
        if not isinstance(self.replicas, int) or self.replicas < 1:
            out.append(f"replicas must be a positive integer, got {self.replicas!r}")
        if not (isinstance(self.dt, (int, float)) and self.dt > 0):
            out.append(f"dt must be positive, got {self.dt!r}")
        elif self.dt > 0.01:
            out.append(f"dt={self.dt} exceeds the stability ceiling 0.01")
        if self.T_macro is not None and not self.T_macro >= 0:
            out.append(f"T_macro must be nonnegative, got {self.T_macro!r}")
        if self.T_micro is not None and not self.T_micro >= 0:
            out.append(f"T_micro must be nonnegative, got {self.T_micro!r}")
        if self.T_micro is not None and self.T_macro is not None:
            out.append("set at most one of T_macro and T_micro")
        if self.J is not None and self.J < 2:
            out.append(f"J must be >= 2, got {self.J}")
        if not 0 <= int(self.master_seed) < 2**64:
            out.append("master_seed must fit in 64 bits")
        if any(int(l) != l or l < 1 for l in self.l_grid):
            out.append(f"block lengths must be positive integers, got {self.l_grid}")
        if any(not e > 0 for e in self.eps_grid):
            out.append(f"eps values must be positive, got {self.eps_grid}")
        unknown_tf = [t for t in self.test_functions if t not in CATALOG]
        if unknown_tf:
            out.append(f"unknown test functions {unknown_tf}; choose from {sorted(CATALOG)}")
        if self.samples < 0:
            out.append(f"samples must be nonnegative, got {self.samples}")
        if self.batch_size < 1:
            out.append(f"batch_size must be positive, got {self.batch_size}")
        if self.workers < 1:
            out.append(f"workers must be positive, got {self.workers}")
        if exp is not None:
            out += exp.validate(self)
        # frame invariant for every (n, J, T) that will be simulated
        if exp is not None and exp.uses_frame and not out:
            block = self.max_block()
            for name in self.test_functions:
                R = CATALOG[name].support_radius
                for n in self.n_grid:
                    p = self.params(n, R, block)
                    out += p.frame_violations(R, block)
        return out


class Check(NamedTuple):
    name: str
    measured: float
    threshold: float
    relation: str  # "<=", ">=", "<", "in", ...
    passed: bool

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: measured {self.measured:.6g} {self.relation} {self.threshold!r}"


def check(name, measured, relation, threshold) -> Check:
    m = float(measured)
    if relation == "<=":
        ok = m <= threshold
    elif relation == "<":
        ok = m < threshold
    elif relation == ">=":
        ok = m >= threshold
    elif relation == "in":
        lo, hi = threshold
        ok = lo <= m <= hi
        threshold = [lo, hi]
    else:
        raise ValueError(f"unknown relation {relation!r}")
    return Check(name, m, threshold, relation, bool(ok and math.isfinite(m)))


@dataclass
class ExperimentResult:
    experiment: str
    rows: list = field(default_factory=list)  # (functional, replica, n, l_or_eps, t, value)
    metrics: Dict[str, object] = field(default_factory=dict)
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add_rows(self, functional, n, values, l_or_eps="", t=""):
        for i, v in enumerate(np.asarray(values, dtype=float).ravel()):
            self.rows.append((functional, i, n, l_or_eps, t, float(v)))


@dataclass(frozen=True)
class Experiment:
    name: str
    claim: str
    defaults: dict
    runner: Callable[[ExperimentConfig], ExperimentResult]
    uses_frame: bool = False
    validate: Callable[[ExperimentConfig], List[str]] = lambda cfg: []

    def config(self, **overrides) -> ExperimentConfig:
        data = {"experiment": self.name, **self.defaults}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.from_dict(data)


# --- kernels -------------------------------------------------------------------

def _stationary_batch(params, rngs):
    u = np.empty((len(rngs), params.J))
    for r, g in enumerate(rngs):
        u[r] = sample_u(params, g, params.J)
    state = LatticeState(0.0, u)
    for r in range(len(rngs)):
        check_initial_dt(LatticeState(0.0, u[r]), params)
    return state


def trajectory_kernel(params, rngs, tf="gaussian", l_grid=(), eps_grid=(), cubic=False,
                      diagnostics=False, track_residual=False, engine="compiled"):
    """Stationary start, then the moving-frame functionals along the path."""
    state = _stationary_batch(params, rngs)
    traj = TrajectoryFunctionals(params, CATALOG[tf], len(rngs), l_grid=l_grid, eps_grid=eps_grid,
                                 cubic=cubic, diagnostics=diagnostics, track_residual=track_residual)
    run_trajectory(state, params, NoiseStream(rngs, params.J + 1), traj, engine=engine)
    out = traj.paths()
    out["t"] = np.broadcast_to(np.asarray(traj.times) / params.n, out["X"].shape).copy()
    out["max_residual"] = traj.max_residual.copy()
    return out


def marginal_kernel(params, rngs, count=100_000):
    """``count`` stationary draws of u per generator, reduced to power sums."""
    out = {k: np.empty(len(rngs)) for k in ("sW", "sW2", "su", "su2", "cnt")}
    raw = []
    for r, g in enumerate(rngs):
        u = sample_u(params, g, count)
        w = 1.0 - np.exp(-u)
        out["sW"][r], out["sW2"][r] = math.fsum(w), math.fsum(w * w)
        out["su"][r], out["su2"][r] = math.fsum(u), math.fsum(u * u)
        out["cnt"][r] = count
        raw.append(u)
    out["u"] = np.stack(raw)
    return out


def coupled_stationarity_kernel(params, rngs, factor=1, horizon=4.0, burn=2.0, every=0.25):
    """u-snapshots on ``[burn, horizon]``; coarse steps sum ``factor`` unit-step blocks.

    The fine noise stream is the same for every ``factor``, so runs at
    ``dt`` and ``dt * factor`` are driven by the same Brownian path.
    """
    p = ModelParams(params.n, params.J, params.dt * factor)
    state = _stationary_batch(p, rngs)
    noise = NoiseStream(rngs, p.J + 1)
    n_steps = int(round(horizon / p.dt))
    snap = int(round(every / p.dt))
    first = int(round(burn / p.dt))
    shots = []
    scale = 1.0 / math.sqrt(factor)
    for k in range(1, n_steps + 1):
        xi = noise().xi
        for _ in range(factor - 1):
            xi = xi + noise().xi
        state = euler_step(state, NoiseBlock(xi * scale), p, step=k - 1)
        if k >= first and k % snap == 0:
            shots.append(state.u)
    return {"u": np.stack(shots, axis=1)}  # (batch, snapshots, J)


def oracle_kernel(params, rngs, n_steps=10_000):
    """Shared-noise run of the u-scheme and the log-partition scheme."""
    state = _stationary_batch(params, rngs)
    h = h_state_from(state)
    noise = NoiseStream(rngs, params.J + 1)
    worst = np.zeros(len(rngs))
    for k in range(n_steps):
        xi = noise()
        state = euler_step(state, xi, params, step=k)
        h = h_step(h, xi, params, step=k)
        err = np.max(np.abs(state.u - h.increments()), axis=-1)
        np.maximum(worst, err, out=worst)
    return {"max_abs_diff": worst}


def quadrature_kernel(params, rngs, levels=2, t=1.0, fine_dt=5e-4, factors=(2, 1), beta=None):
    """Both partition-function routes on the same Brownian paths at several dt."""
    beta = params.beta if beta is None else beta
    steps = int(round(t / fine_dt))
    out = {f"quad[{f}]": np.empty(len(rngs)) for f in factors}
    out.update({f"rec[{f}]": np.empty(len(rngs)) for f in factors})
    for r, g in enumerate(rngs):
        inc = g.standard_normal((levels, steps)) * math.sqrt(fine_dt)
        for f in factors:
            coarse = inc.reshape(levels, steps // f, f).sum(axis=-1)
            paths = np.zeros((levels, coarse.shape[1] + 1))
            np.cumsum(coarse, axis=-1, out=paths[:, 1:])
            dt = fine_dt * f
            out[f"quad[{f}]"][r] = math.log(quadrature_partition(paths, beta, dt))
            out[f"rec[{f}]"][r] = log_partition_recursion(coarse, beta, dt)
    return out


def generator_kernel(params, rngs, slot=3, window=10, offset=0.4, monomials=tuple(MONOMIALS)):
    """Finite-difference Dynkin check from a shifted (non-stationary) start.

    Slots get a deterministic alternating shift ``+-offset`` on top of a
    stationary draw, so that the expectations actually move.  Returned per
    replica: ``f(u_0)``, ``f(u_delta)`` and the left-point time average of
    ``L f`` over the ``window`` steps.
    """
    state = _stationary_batch(params, rngs)
    shift = offset * np.where(np.arange(params.J) % 2 == 0, 1.0, -1.0)
    state = LatticeState(0.0, state.u + shift)
    noise = NoiseStream(rngs, params.J + 1)
    j = slot

    def value(st, name):
        u = st.u
        return np.prod([u[:, j - 1 + k] ** p for k, p in MONOMIALS[name].items()], axis=0)

    out = {}
    for name in monomials:
        out[f"f0[{name}]"] = value(state, name)
        out[f"Lf0[{name}]"] = generator_monomial(state, name, j, params)
        out[f"Lavg[{name}]"] = np.zeros(len(rngs))
    for k in range(window):
        for name in monomials:
            out[f"Lavg[{name}]"] += generator_monomial(state, name, j, params) / window
        state = euler_step(state, noise(), params, step=k)
    for name in monomials:
        out[f"f1[{name}]"] = value(state, name)
    return out


def _plan(cfg: ExperimentConfig, params, kernel, **options) -> ReplicaPlan:
    return ReplicaPlan(cfg.replicas, cfg.master_seed, params, kernel, options, cfg.batch_size)


# --- runners -------------------------------------------------------------------

def _static_moments(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    per_n = {}
    for n in cfg.n_grid:
        p = ModelParams(n)
        chunks = max(1, math.ceil(cfg.samples / 100_000))
        count = cfg.samples // chunks
        plan = ReplicaPlan(chunks, cfg.master_seed, p, marginal_kernel, {"count": count}, cfg.batch_size)
        u = run_replicas(plan, cfg.workers)["u"].ravel()
        w = 1.0 - np.exp(-u)
        sw, su = summarize(w), summarize(u)
        vw, vw_se = variance_se(w)
        vu, vu_se = variance_se(u)
        exact = {"E_W": p.mean_W, "Var_W": p.sigma2, "E_u": p.rho, "Var_u": p.var_u}
        measured = {"E_W": (sw.mean, sw.se), "Var_W": (vw, vw_se), "E_u": (su.mean, su.se), "Var_u": (vu, vu_se)}
        per_n[n] = {"samples": int(u.size), **{f"exact_{k}": v for k, v in exact.items()},
                    **{k: m for k, (m, _) in measured.items()}, **{f"{k}_se": s for k, (_, s) in measured.items()}}
        for k, (m, se) in measured.items():
            res.checks.append(check(f"n={n} {k} |z|", abs(m - exact[k]) / se, "<=", 3.0))
            res.add_rows(k, n, [m])
    res.metrics["per_n"] = per_n
    if 16 in per_n:
        res.metrics["exact_E_W"] = per_n[16]["exact_E_W"]
        res.metrics["exact_Var_W"] = per_n[16]["exact_Var_W"]
    return res


def _moment_scaling(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    ns, m2, m4 = [], [], []
    for n in cfg.n_grid:
        p = ModelParams(n)
        chunks = max(1, math.ceil(cfg.samples / 100_000))
        plan = ReplicaPlan(chunks, cfg.master_seed, p, marginal_kernel,
                           {"count": cfg.samples // chunks}, cfg.batch_size)
        u = run_replicas(plan, cfg.workers)["u"].ravel()
        c = u - summarize(u).mean
        ns.append(n)
        m2.append(p.var_u)
        m4.append(summarize(c**4).mean)
        res.add_rows("E|u-Eu|^4", n, [m4[-1]])
        res.add_rows("Var_u_exact", n, [m2[-1]])
    f2, f4 = fit_power_law(ns, m2), fit_power_law(ns, m4)
    res.metrics.update(k2_slope=f2.slope, k2_stderr=f2.stderr, k4_slope=f4.slope,
                       k4_stderr=f4.stderr, k2_values=m2, k4_values=m4, n_grid=ns)
    res.checks.append(check("k=2 slope", f2.slope, "in", (-0.55, -0.45)))
    res.checks.append(check("k=4 slope", f4.slope, "in", (-1.05, -0.95)))
    return res


def _stationarity(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    n = cfg.n_grid[0]
    horizon = cfg.horizon(n) or 4.0
    ks = {}
    for factor in (2, 1):
        p = ModelParams(n, cfg.J or 64, cfg.dt)
        plan = _plan(cfg, p, coupled_stationarity_kernel, factor=factor, horizon=horizon,
                     burn=horizon / 2, every=horizon / 16)
        u = run_replicas(plan, cfg.workers)["u"]
        dt = cfg.dt * factor
        ks[dt] = ks_statistic(u, lambda x: stationary_cdf(p, x))
        res.metrics[f"pooled_samples[dt={dt:g}]"] = int(u.size)
        res.add_rows("ks", n, [ks[dt]], l_or_eps=dt)
    fine, coarse = cfg.dt, 2 * cfg.dt
    res.metrics.update(ks_fine=ks[fine], ks_coarse=ks[coarse], dt_fine=fine, dt_coarse=coarse)
    res.checks.append(check("pooled samples", res.metrics[f"pooled_samples[dt={fine:g}]"], ">=", 100_000))
    res.checks.append(check(f"KS at dt={fine:g}", ks[fine], "<=", 0.01))
    res.checks.append(check("KS(fine) - KS(coarse)", ks[fine] - ks[coarse], "<", 0.0))
    return res


def _oracle_equivalence(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    n = cfg.n_grid[0]
    p = ModelParams(n, cfg.J or 64, cfg.dt)
    steps = int(round(cfg.horizon(n) / cfg.dt)) if cfg.horizon(n) else 10_000
    out = run_replicas(_plan(cfg, p, oracle_kernel, n_steps=steps), cfg.workers)
    worst = float(np.max(out["max_abs_diff"]))
    res.add_rows("max_abs_diff", n, out["max_abs_diff"])
    res.metrics.update(max_abs_diff=worst, steps=steps)
    res.checks.append(check("max |u - (h_j - h_{j-1})|", worst, "<=", 1e-10))
    return res


def _quadrature_check(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    n = cfg.n_grid[0]
    p = ModelParams(n)
    fine = cfg.dt
    out = run_replicas(_plan(cfg, p, quadrature_kernel, fine_dt=fine, factors=(2, 1)), cfg.workers)
    err = {f: np.abs(out[f"quad[{f}]"] - out[f"rec[{f}]"]) for f in (2, 1)}
    for f in (2, 1):
        res.add_rows("log_quadrature", n, out[f"quad[{f}]"], l_or_eps=fine * f)
        res.add_rows("log_recursion", n, out[f"rec[{f}]"], l_or_eps=fine * f)
    res.metrics.update(max_err_fine=float(err[1].max()), max_err_coarse=float(err[2].max()),
                       mean_err_fine=float(err[1].mean()), mean_err_coarse=float(err[2].mean()))
    # beta = 0: both routes give the simplex volume t exactly
    zero = quadrature_kernel(p, [replica_rng(cfg.master_seed, 0)], fine_dt=fine, factors=(1,), beta=0.0)
    vol_q, vol_r = math.exp(zero["quad[1]"][0]), math.exp(zero["rec[1]"][0])
    res.metrics.update(beta0_quadrature=vol_q, beta0_recursion=vol_r)
    res.checks.append(check(f"max |dlog Z| at dt={fine:g}", err[1].max(), "<=", 0.01))
    res.checks.append(check("mean |dlog Z| fine - coarse", err[1].mean() - err[2].mean(), "<", 0.0))
    res.checks.append(check("beta=0 quadrature - t", abs(vol_q - 1.0), "<=", 1e-12))
    res.checks.append(check("beta=0 recursion - t", abs(vol_r - 1.0), "<=", 1e-12))
    return res


def _run_trajectories(cfg, n, **options):
    tf = CATALOG[cfg.test_functions[0]]
    p = cfg.params(n, tf.support_radius, cfg.max_block())
    return p, run_replicas(_plan(cfg, p, trajectory_kernel, tf=tf.label, **options), cfg.workers)


def _field_variance(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    n = cfg.n_grid[0]
    tf = CATALOG[cfg.test_functions[0]]
    p, out = _run_trajectories(cfg, n)
    x_t = out["X"][:, -1]
    var, se = variance_se(x_t)
    energy = tf.energy()
    res.add_rows("X", n, x_t, t=cfg.horizon(n) / n)
    res.metrics.update(var_X=var, var_X_se=se, integral_phi2=energy, ratio=var / energy, J=p.J)
    res.checks.append(check("Var X_t / int phi^2", var / energy, "in", (0.90, 1.10)))
    return res


def _qv_limit(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    n = cfg.n_grid[0]
    tf = CATALOG[cfg.test_functions[0]]
    p, out = _run_trajectories(cfg, n)
    realized = out["QV_realized"][:, -1]
    exact = float(out["QV"][0, -1])
    ratio = summarize(realized).mean / exact
    rate = exact / p.T_macro
    target = tf.energy_dphi()
    res.add_rows("QV_realized", n, realized, t=cfg.horizon(n) / n)
    res.metrics.update(qv_exact=exact, qv_realized_mean=summarize(realized).mean, ratio=ratio,
                       macro_rate=rate, integral_dphi2=target, J=p.J)
    res.checks.append(check("realized / exact QV", ratio, "in", (0.95, 1.05)))
    res.checks.append(check("QV rate / int phi'^2", rate / target, "in", (0.85, 1.15)))
    return res


def _decomposition(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    worst = 0.0
    for n in cfg.n_grid:
        _, out = _run_trajectories(cfg, n, track_residual=True)
        worst = max(worst, float(out["max_residual"].max()))
        res.add_rows("max_residual", n, out["max_residual"])
    res.metrics["max_residual"] = worst
    res.checks.append(check("max relative residual", worst, "<=", 1e-10))
    return res


def _sup_gaps(out, ls, name, target):
    d, per_rep = [], {}
    for l in ls:
        gap = out[target] - out[f"{name}[{l}]"]
        d.append(sup_l2(gap))
        per_rep[l] = np.max(np.abs(gap), axis=-1) ** 2
    return d, per_rep


def _bg2_scaling(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    ls = sorted(cfg.l_grid)
    for n in cfg.n_grid:
        _, out = _run_trajectories(cfg, n, l_grid=ls)
        d, per_rep = _sup_gaps(out, ls, "Q", "Btilde")
        for l in ls:
            res.add_rows("sup2[Btilde-Q]", n, per_rep[l], l_or_eps=l, t=cfg.horizon(n) / n)
        k = int(np.argmin(d))
        fit = fit_two_term(ls, d, n)
        res.metrics[f"n={n}"] = {"l": ls, "D": d, "argmin_l": ls[k], "fit_a": fit.a, "fit_b": fit.b,
                                 "fit_r2": fit.r2, "min_over_D2": d[k] / d[0]}
        res.checks.append(check(f"n={n} interior argmin position", k, "in", (1, len(ls) - 2)))
        res.checks.append(check(f"n={n} two-term fit R^2", fit.r2, ">=", 0.8))
        res.checks.append(check(f"n={n} D(l*) / D(2)", d[k] / d[0], "<=", 0.5))
    return res


def _bg3_scaling(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    ls = sorted(cfg.l_grid)
    for n in cfg.n_grid:
        _, out = _run_trajectories(cfg, n, l_grid=ls, cubic=True)
        d2, rep2 = _sup_gaps(out, ls, "Q", "Btilde")
        d3, rep3 = _sup_gaps(out, ls, "cubicQ", "cubic")
        for l in ls:
            res.add_rows("sup2[Btilde-Q]", n, rep2[l], l_or_eps=l, t=cfg.horizon(n) / n)
            res.add_rows("sup2[cubic-cubicQ]", n, rep3[l], l_or_eps=l, t=cfg.horizon(n) / n)
        ratio = min(d3) / min(d2)
        res.metrics[f"n={n}"] = {"l": ls, "D2": d2, "D3": d3, "ratio": ratio}
        res.checks.append(check(f"n={n} min D3 / min D2", ratio, "<=", 0.25))
    return res


def _ec2_cauchy(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    eps = sorted(cfg.eps_grid)
    for n in cfg.n_grid:
        p0 = ModelParams(n)
        blocks = sorted({eps_to_block(e, p0) for e in eps} | {eps_to_block(e / 2, p0) for e in eps})
        _, out = _run_trajectories(cfg, n, l_grid=blocks)
        var = []
        for e in eps:
            a = out[f"Q[{eps_to_block(e, p0)}]"][:, -1]
            b = out[f"Q[{eps_to_block(e / 2, p0)}]"][:, -1]
            var.append(variance_se(a - b)[0])
            res.add_rows("A_eps-A_delta", n, a - b, l_or_eps=e, t=cfg.horizon(n) / n)
        fit = fit_power_law(eps, var)
        res.metrics[f"n={n}"] = {"eps": eps, "blocks": [eps_to_block(e, p0) for e in eps],
                                 "var": var, "slope": fit.slope, "stderr": fit.stderr, "r2": fit.r2}
        res.checks.append(check(f"n={n} slope of Var[A^eps - A^delta]", fit.slope, "in", (0.6, 1.4)))
    return res


def _generator_identities(cfg: ExperimentConfig) -> ExperimentResult:
    res = ExperimentResult(cfg.experiment)
    n = cfg.n_grid[0]
    p = ModelParams(n, cfg.J or 6, cfg.dt)
    window = 10
    delta = window * cfg.dt
    names = ("u_j^2", "u_j^3")
    out = run_replicas(_plan(cfg, p, generator_kernel, window=window, monomials=names), cfg.workers)
    for name in names:
        fd = (out[f"f1[{name}]"] - out[f"f0[{name}]"]) / delta
        diff = summarize(fd - out[f"Lavg[{name}]"])
        res.add_rows(f"fd[{name}]", n, fd, l_or_eps=delta)
        res.add_rows(f"Lavg[{name}]", n, out[f"Lavg[{name}]"], l_or_eps=delta)
        res.metrics[name] = {"fd_derivative": summarize(fd).mean, "generator_mean": summarize(out[f"Lavg[{name}]"]).mean,
                             "generator_at_0": summarize(out[f"Lf0[{name}]"]).mean,
                             "difference": diff.mean, "difference_se": diff.se}
        res.checks.append(check(f"{name} |FD - E[Lf]| / SE", abs(diff.z(0.0)), "<=", 3.0))
    return res


# --- validation hooks ----------------------------------------------------------

def _needs_horizon(cfg):
    if (cfg.T_macro or 0) > 0 or (cfg.T_micro or 0) > 0:
        return []
    return ["a positive T_macro or T_micro is needed for a trajectory experiment"]


def _needs_points(k):
    def inner(cfg):
        return [] if len(cfg.n_grid) >= k else [f"at least {k} values of n are needed for a slope fit"]
    return inner


def _needs_l(k):
    def inner(cfg):
        return [] if len(cfg.l_grid) >= k else [f"at least {k} block lengths are needed"]
    return inner


def _all(*hooks):
    return lambda cfg: [msg for h in hooks for msg in h(cfg)]


REGISTRY: Dict[str, Experiment] = {}


def _register(exp: Experiment):
    REGISTRY[exp.name] = exp


_register(Experiment(
    "static-moments", "stationary marginal: e^{-u} ~ beta^2 Gamma(nu); moments of W and u",
    dict(n_grid=[16, 64, 256], samples=1_000_000, replicas=1), _static_moments,
    validate=lambda cfg: [] if cfg.samples >= 1000 else ["samples must be >= 1000"]))
_register(Experiment(
    "moment-scaling", "centred moments E|u - Eu|^k scale as n^{-k/4}",
    dict(n_grid=[16, 64, 256, 1024], samples=1_000_000, replicas=1), _moment_scaling,
    validate=_all(_needs_points(3), lambda cfg: [] if cfg.samples >= 1000 else ["samples must be >= 1000"])))
_register(Experiment(
    "stationarity", "the product Gamma law is invariant under the lattice dynamics",
    dict(n_grid=[16], J=64, dt=1e-3, T_micro=4.0, replicas=200), _stationarity))
_register(Experiment(
    "oracle-equivalence", "u-scheme equals increments of the log-partition scheme on shared noise",
    dict(n_grid=[16], J=64, dt=0.01, T_micro=100.0, replicas=1), _oracle_equivalence))
_register(Experiment(
    "quadrature-check", "log-partition recursion agrees with the iterated simplex integral",
    dict(n_grid=[16], dt=5e-4, replicas=20), _quadrature_check))
_register(Experiment(
    "field-variance", "the fluctuation field has white-noise marginals",
    dict(n_grid=[256], T_macro=0.05, replicas=500), _field_variance, uses_frame=True,
    validate=_needs_horizon))
_register(Experiment(
    "qv-limit", "martingale bracket of the field grows like t * int (phi')^2",
    dict(n_grid=[256], T_macro=0.05, replicas=200), _qv_limit, uses_frame=True,
    validate=_needs_horizon))
_register(Experiment(
    "decomposition-residual", "field increment = drift + frame transport + martingale, exactly",
    dict(n_grid=[64], T_macro=0.1, replicas=20, test_functions=["hermite1"]), _decomposition,
    uses_frame=True, validate=_needs_horizon))
_register(Experiment(
    "bg2-scaling", "second-order replacement error ~ l/sqrt(n) + T/l^2",
    dict(n_grid=[256, 1024], T_micro=8.0, replicas=200, l_grid=[2, 4, 8, 16, 32, 64]),
    _bg2_scaling, uses_frame=True, validate=_all(_needs_horizon, _needs_l(3))))
_register(Experiment(
    "bg3-scaling", "third-order replacement error is smaller by a factor n^{-1/2}",
    dict(n_grid=[1024], T_micro=8.0, replicas=200, l_grid=[2, 4, 8, 16, 32, 64]),
    _bg3_scaling, uses_frame=True, validate=_all(_needs_horizon, _needs_l(1))))
_register(Experiment(
    "ec2-cauchy", "Var[A^eps - A^{eps/2}] is O(eps)",
    dict(n_grid=[1024], T_macro=1 / 16, replicas=200, eps_grid=[0.1, 0.2, 0.4, 0.8]),
    _ec2_cauchy, uses_frame=True,
    validate=_all(_needs_horizon, lambda cfg: [] if len(cfg.eps_grid) >= 3 else ["at least 3 eps values are needed"])))
_register(Experiment(
    "generator-identities", "d/dt E f(u) = E[L f(u)] on low-degree monomials",
    dict(n_grid=[16], J=6, dt=1e-3, replicas=100_000, batch_size=10_000), _generator_identities))


def default_config(name: str, **overrides) -> ExperimentConfig:
    """Registry defaults with keyword overrides (``None`` leaves a default alone)."""
    if name not in REGISTRY:
        raise KeyError(f"unknown experiment {name!r}; choose from {sorted(REGISTRY)}")
    return REGISTRY[name].config(**overrides)


def run(cfg: ExperimentConfig) -> ExperimentResult:
    problems = cfg.violations()
    if problems:
        raise ConfigError(problems)
    return REGISTRY[cfg.experiment].runner(cfg)


class ConfigError(ValueError):
    def __init__(self, problems):
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))
        self.problems = list(problems)
