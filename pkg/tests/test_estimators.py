import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oylattice.dynamics import InstabilityError
from oylattice.estimators import (
    KS_CRITICAL_1PCT,
    ReplicaAbort,
    ReplicaPlan,
    exact_sum,
    fit_power_law,
    fit_two_term,
    ks_statistic,
    replica_rng,
    run_replicas,
    summarize,
    sup_l2,
    variance_se,
)
from oylattice.special import ModelParams, sample_u


def gauss_kernel(params, rngs, size=5):
    return {"x": np.stack([g.standard_normal(size) for g in rngs]),
            "w": np.array([np.mean(1 - np.exp(-sample_u(params, g, 50))) for g in rngs])}


def exploding_kernel(params, rngs, bad=7):
    # replica index is recovered from the generator's spawn key
    for r, g in enumerate(rngs):
        if g.bit_generator.seed_seq.spawn_key[0] == bad:
            raise InstabilityError("boom", step=3, replica=(r,))
    return {"x": np.zeros(len(rngs))}


P = ModelParams(16)


def test_streams_depend_only_on_seed_and_index():
    a = replica_rng(42, 3).standard_normal(10)
    b = replica_rng(42, 3).standard_normal(10)
    c = replica_rng(42, 4).standard_normal(10)
    d = replica_rng(43, 3).standard_normal(10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_streams_are_uncorrelated():
    x = np.stack([replica_rng(1, i).standard_normal(2000) for i in range(20)])
    c = np.corrcoef(x)
    off = c[~np.eye(20, dtype=bool)]
    assert np.max(np.abs(off)) < 5 / math.sqrt(2000)


def test_same_plan_twice_bitwise():
    plan = ReplicaPlan(30, 7, P, gauss_kernel, batch_size=8)
    a, b = run_replicas(plan), run_replicas(plan)
    assert np.array_equal(a["x"], b["x"])
    assert summarize(a["w"]) == summarize(b["w"])


def test_first_replica_independent_of_count_and_batching():
    one = run_replicas(ReplicaPlan(1, 7, P, gauss_kernel))
    many = run_replicas(ReplicaPlan(13, 7, P, gauss_kernel, batch_size=4))
    assert np.array_equal(one["x"][0], many["x"][0])
    whole = run_replicas(ReplicaPlan(13, 7, P, gauss_kernel, batch_size=13))
    assert np.array_equal(whole["x"], many["x"])


def test_workers_do_not_change_results():
    plan = ReplicaPlan(12, 9, P, gauss_kernel, batch_size=4)
    assert np.array_equal(run_replicas(plan, workers=1)["x"], run_replicas(plan, workers=2)["x"])


def test_se_shrinks_with_replicas():
    a = summarize(run_replicas(ReplicaPlan(2000, 1, P, gauss_kernel, {"size": 1}))["x"])
    b = summarize(run_replicas(ReplicaPlan(4000, 2, P, gauss_kernel, {"size": 1}))["x"])
    assert b.se / a.se == pytest.approx(1 / math.sqrt(2), rel=0.2)


def test_plan_validation_and_abort():
    with pytest.raises(ValueError):
        ReplicaPlan(0, 1, P, gauss_kernel)
    with pytest.raises(ValueError):
        ReplicaPlan(3, -1, P, gauss_kernel)
    plan = ReplicaPlan(20, 1, P, exploding_kernel, batch_size=5)
    with pytest.raises(ReplicaAbort) as info:
        run_replicas(plan)
    assert info.value.replica == 7
    assert info.value.step == 3
    assert info.value.partial["x"].shape == (5,)  # the first batch finished


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=2, max_size=200),
       st.randoms(use_true_random=False))
def test_aggregation_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert exact_sum(values) == exact_sum(shuffled)
    assert summarize(values) == summarize(shuffled)


def test_summary_fields():
    s = summarize([1.0, 2.0, 3.0, 4.0])
    assert s.mean == 2.5
    assert s.var == pytest.approx(5 / 3)
    assert s.se == pytest.approx(math.sqrt(5 / 12))
    assert s.ci_low == pytest.approx(2.5 - 1.96 * s.se)
    assert s.ci_high == pytest.approx(2.5 + 1.96 * s.se)
    assert s.count == 4
    assert s.covers(2.5)
    with pytest.raises(ValueError):
        summarize([])


def test_ci_coverage_of_known_mean():
    # mean of W under the stationary law is -beta^2/2 exactly
    hits = 0
    for seed in range(100):
        w = 1 - np.exp(-sample_u(P, replica_rng(seed, 0), 2000))
        s = summarize(w)
        hits += s.ci_low <= P.mean_W <= s.ci_high
    assert hits >= 90


def test_variance_se_against_normal_theory():
    x = np.random.default_rng(0).standard_normal(20000)
    v, se = variance_se(x)
    assert se == pytest.approx(math.sqrt(2 / x.size), rel=0.05)
    assert abs(v - 1) <= 3 * se


def test_sup_l2_trivial():
    assert sup_l2(np.full((3, 10), 2.0)) == 4.0
    assert sup_l2(np.linspace(0, 1, 11)) == 1.0
    with pytest.raises(ValueError):
        sup_l2(np.zeros((2, 0)))


def test_sup_l2_grid_refinement_stable():
    rng = np.random.default_rng(1)
    steps = 1600
    paths = np.cumsum(rng.standard_normal((4000, steps)) / math.sqrt(steps), axis=1)
    fine, coarse = sup_l2(paths), sup_l2(paths[:, 1::2])
    assert abs(fine - coarse) / fine <= 0.05


def test_ks_null_and_trivial_cases():
    m = 10_000
    rejections = 0
    for seed in range(100):
        x = np.random.default_rng(seed).standard_normal(m)
        rejections += ks_statistic(x, stats.norm.cdf) > KS_CRITICAL_1PCT / math.sqrt(m)
    assert rejections <= 2
    assert ks_statistic(np.zeros(101), stats.norm.cdf) == pytest.approx(0.5)
    shifted = np.random.default_rng(0).standard_normal(1000) + 10
    assert ks_statistic(shifted, stats.norm.cdf) >= 1 - 1 / 1000
    with pytest.raises(ValueError):
        ks_statistic(np.zeros(99), stats.norm.cdf)


def test_ks_matches_scipy():
    x = np.random.default_rng(3).standard_normal(500)
    assert ks_statistic(x, stats.norm.cdf) == pytest.approx(stats.kstest(x, "norm").statistic, abs=1e-15)


def test_power_law_fits():
    xs = np.array([1.0, 2.0, 4.0, 8.0])
    f = fit_power_law(xs, xs**2)
    assert f.slope == pytest.approx(2.0, abs=1e-12)
    assert f.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit_power_law(xs, 3.0 / xs).slope == pytest.approx(-1.0, abs=1e-12)
    rng = np.random.default_rng(4)
    xs = np.geomspace(1, 100, 20)
    noisy = xs**1.5 * (1 + 0.01 * rng.standard_normal(xs.size))
    assert fit_power_law(xs, noisy).slope == pytest.approx(1.5, abs=0.05)
    with pytest.raises(ValueError):
        fit_power_law([1, 2, 3], [1, 0, 2])
    with pytest.raises(ValueError):
        fit_power_law([1, 2], [1, 2])


def test_two_term_fit_recovers_coefficients():
    ls = np.array([2, 4, 8, 16, 32, 64], dtype=float)
    y = 0.3 * ls / 16 + 2.0 / ls**2
    f = fit_two_term(ls, y, 256)
    assert f.a == pytest.approx(0.3, rel=1e-10)
    assert f.b == pytest.approx(2.0, rel=1e-10)
    assert f.r2 == pytest.approx(1.0)
