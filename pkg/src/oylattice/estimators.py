"""Replica Monte Carlo engine and the statistics built on top of it."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats

from .dynamics import InstabilityError
from .special import ModelParams


class ReplicaAbort(RuntimeError):
    """A replica left the stability region; ``partial`` holds finished batches."""

    def __init__(self, replica, step, message, partial=None):
        super().__init__(f"replica {replica} aborted at step {step}: {message}")
        self.replica = replica
        self.step = step
        self.partial = partial


def replica_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-style stream: keyed by (master_seed, replica index) only."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ReplicaPlan:
    """What to run and how many times.

    ``kernel(params, rngs, **options)`` simulates one batch of replicas (one
    generator per replica, in replica order) and returns a dict of arrays
    whose leading axis is the batch.
    """

    replicas: int
    master_seed: int
    params: ModelParams
    kernel: Callable[..., Dict[str, np.ndarray]]
    options: dict = field(default_factory=dict)
    batch_size: int = 200

    def __post_init__(self):
        if self.replicas < 1:
            raise ValueError(f"replicas must be >= 1, got {self.replicas}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must fit in 64 bits")

    def batches(self):
        b = max(1, int(self.batch_size))
        return [range(i, min(i + b, self.replicas)) for i in range(0, self.replicas, b)]


def _run_batch(plan: ReplicaPlan, ids: range):
    rngs = [replica_rng(plan.master_seed, i) for i in ids]
    try:
        return plan.kernel(plan.params, rngs, **plan.options)
    except InstabilityError as exc:
        replica = ids.start + (exc.replica[0] if exc.replica else 0)
        raise ReplicaAbort(replica, exc.step, str(exc)) from exc


def run_replicas(plan: ReplicaPlan, workers: int = 1) -> Dict[str, np.ndarray]:
    """Run every replica and stack the kernel outputs in replica order.

    Results depend only on ``master_seed`` and the replica indices, never
    on ``workers`` or ``batch_size``.
    """
    batches = plan.batches()
    parts = []
    try:
        if workers > 1 and len(batches) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for part in pool.map(_run_batch, [plan] * len(batches), batches):
                    parts.append(part)
        else:
            for ids in batches:
                parts.append(_run_batch(plan, ids))
    except ReplicaAbort as exc:
        exc.partial = _stack(parts) if parts else None
        raise
    return _stack(parts)


def _stack(parts):
    return {k: np.concatenate([np.asarray(p[k]) for p in parts], axis=0) for k in parts[0]}


# --- aggregation ---------------------------------------------------------------

def exact_sum(values) -> float:
    """Correctly rounded sum, hence independent of replica order."""
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())


class Summary(NamedTuple):
    mean: float
    var: float
    se: float
    ci_low: float
    ci_high: float
    count: int

    def covers(self, value: float, k: float = 3.0) -> bool:
        return abs(self.mean - value) <= k * self.se

    def z(self, value: float) -> float:
        return (self.mean - value) / self.se if self.se > 0 else math.inf


def summarize(values) -> Summary:
    x = np.asarray(values, dtype=float).ravel()
    m = x.size
    if m == 0:
        raise ValueError("no values to summarize")
    mean = exact_sum(x) / m
    var = exact_sum((x - mean) ** 2) / (m - 1) if m > 1 else 0.0
    se = math.sqrt(var / m)
    return Summary(mean, var, se, mean - 1.96 * se, mean + 1.96 * se, m)


def variance_se(values) -> tuple[float, float]:
    """Sample variance and its standard error (fourth-moment formula)."""
    x = np.asarray(values, dtype=float).ravel()
    m = x.size
    mean = exact_sum(x) / m
    c = x - mean
    var = exact_sum(c * c) / (m - 1)
    m4 = exact_sum(c**4) / m
    se = math.sqrt(max(m4 - var * var * (m - 3) / (m - 1), 0.0) / m)
    return var, se


def sup_l2(paths) -> float:
    """Mean over replicas of ``(max_t |path|)^2`` for paths of shape (replicas, times)."""
    p = np.asarray(paths, dtype=float)
    if p.ndim == 1:
        p = p[None, :]
    if p.shape[-1] == 0:
        raise ValueError("empty time grid")
    peak = np.max(np.abs(p), axis=-1)
    return exact_sum(peak * peak) / peak.size


def ks_statistic(samples, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF and ``cdf``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    m = x.size
    if m < 100:
        raise ValueError(f"KS statistic needs at least 100 samples, got {m}")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - F), np.max(F - (i - 1) / m)))


KS_CRITICAL_1PCT = 1.63


class PowerLawFit(NamedTuple):
    slope: float
    intercept: float
    stderr: float
    r2: float


def fit_power_law(xs, ys) -> PowerLawFit:
    """Least squares line through ``(log x, log y)``."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size < 3 or x.size != y.size:
        raise ValueError("need at least 3 paired points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs positive data")
    res = stats.linregress(np.log(x), np.log(y))
    return PowerLawFit(float(res.slope), float(res.intercept), float(res.stderr), float(res.rvalue**2))


class TwoTermFit(NamedTuple):
    a: float
    b: float
    r2: float


def fit_two_term(ls: Sequence[float], values: Sequence[float], n: int) -> TwoTermFit:
    """Fit ``values ~ a l / sqrt(n) + b / l^2`` (no intercept)."""
    l = np.asarray(ls, dtype=float)
    y = np.asarray(values, dtype=float)
    A = np.column_stack([l / math.sqrt(n), 1.0 / l**2])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return TwoTermFit(float(coef[0]), float(coef[1]), r2)
