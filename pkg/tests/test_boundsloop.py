import numpy as np
import pytest

from oracles import projected_gradient
from pathbounds.assembly import FunctionalSpec, build_theta, build_xi
from pathbounds.boundsloop import (CONVERGED, INFEASIBLE_FILTER, MAX_ITERATIONS, TRACE_COLUMNS,
                                   BoundsRunner, BoundsTrace, SolveConfig, moving_sd,
                                   nested_restriction_check, run)
from pathbounds.condcdf import cdf_field
from pathbounds.errors import ConfigError, DataError
from pathbounds.pathkit import BasisSpec, sample_paths
from pathbounds.qpsolve import LOWER, QpProblem, solve
from pathbounds.simgen import simulate
from pathbounds.unitgrid import dyadic_grid


@pytest.fixture(scope="module")
def small():
    grid = dyadic_grid(2)
    data = simulate(n_paths=200, n_obs=600, seed=1, grid=dyadic_grid(3))
    return grid, cdf_field(data, grid, 0.08)


def cfg(**kw):
    base = dict(lam=5.0, l_init=6, l_add=5, n_delta=5, max_iterations=8, rng_seed=3)
    base.update(kw)
    return SolveConfig(**base)


def test_single_iteration(small):
    grid, cdf = small
    tr = run(cfg(max_iterations=1), cdf, grid)
    assert len(tr.records) == 1 and tr.status == MAX_ITERATIONS
    assert tr.records[0]["iter"] == 1


def test_deterministic(small):
    grid, cdf = small
    a = run(cfg(), cdf, grid)
    b = run(cfg(), cdf, grid)
    assert a.to_jsonl() == b.to_jsonl()
    c = run(cfg(rng_seed=4), cdf, grid)
    assert c.to_jsonl() != a.to_jsonl()


def test_trace_invariants(small):
    grid, cdf = small
    c = cfg(max_iterations=12)
    tr = run(c, cdf, grid)
    assert len(tr.records) <= c.max_iterations
    for k, r in enumerate(tr.records, start=1):
        assert r["v_min"] <= r["v_max"] + 1e-6
        assert r["pool_min"] <= c.l_init + k * c.l_add
        assert r["pool_max"] <= c.l_init + k * c.l_add


def test_converges_with_loose_delta(small):
    grid, cdf = small
    tr = run(cfg(delta=10.0, n_delta=3, max_iterations=50), cdf, grid)
    assert tr.status == CONVERGED and len(tr.records) == 3


def test_discard_safety(small):
    grid, cdf = small
    r = BoundsRunner(cfg(), cdf, grid)
    for _ in range(4):
        r.step()
    pool = r.pools[0]
    before = r.trace.records[-1]["v_min"]
    prob = QpProblem(pool.theta.tocsc(), cdf.flat(), pool.xi.values, r.config.lam, LOWER)
    again = solve(prob, warm_start=pool.weights)
    assert abs(again.functional_value - before) <= 1e-6


def test_checkpoint_resume_bit_identical(small, tmp_path):
    grid, cdf = small
    c = cfg(max_iterations=10, y_direction=1, filter_mix=0.4)
    straight = run(c, cdf, grid)
    r = BoundsRunner(c, cdf, grid)
    for _ in range(4):
        r.step()
    ck = tmp_path / "ck.json"
    r.save_checkpoint(ck)
    resumed = BoundsRunner.from_checkpoint(ck, cdf).run()
    assert resumed.to_jsonl() == straight.to_jsonl()


def test_bad_checkpoint(small, tmp_path):
    _, cdf = small
    p = tmp_path / "ck.json"
    p.write_text("{not json")
    with pytest.raises(DataError):
        BoundsRunner.from_checkpoint(p, cdf)


def test_infeasible_filter_status(small):
    grid, cdf = small
    c = cfg(y_direction=1, filter_mix=1.0, attempt_cap=50, min_acceptance=0.5)
    r = BoundsRunner(c, cdf, grid)
    r.shape_filter = lambda pair: False  # no draw passes
    tr = r.run()
    assert tr.status == INFEASIBLE_FILTER
    assert "accepted 0 of 50" in tr.message and tr.records == []


def test_grid_mismatch(small):
    _, cdf = small
    with pytest.raises(DataError):
        BoundsRunner(cfg(), cdf, dyadic_grid(3))


@pytest.mark.parametrize("kw", [
    {"lam": 0.0}, {"l_add": 0}, {"n_delta": 1}, {"delta": 0.0}, {"max_iterations": 0},
    {"discard_threshold": -1.0}, {"filter_mix": 1.5}, {"filter_mix": 0.5}, {"y_direction": 2},
    {"pairing": "zip"},
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        cfg(**kw)


def test_config_roundtrip():
    c = cfg(functional=FunctionalSpec("ate", 0.25, 0.75), basis=BasisSpec(kappa_levels=(2, 3)),
            x_direction=1, filter_mix=0.25)
    assert SolveConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        SolveConfig.from_dict({"lambda_": 3})


def test_trace_serialization(small):
    grid, cdf = small
    tr = run(cfg(max_iterations=3), cdf, grid)
    lines = tr.to_csv().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS) and len(lines) == 4
    back = BoundsTrace.from_jsonl(tr.to_jsonl())
    assert back.records == tr.records and back.status == tr.status
    with pytest.raises(DataError, match="line 2"):
        BoundsTrace.from_jsonl('{"iter": 1}\n{oops\n')


def test_moving_sd():
    assert moving_sd([5, 1, 2, 3], 3) == pytest.approx(1.0)


def test_cross_pairing_runs(small):
    grid, cdf = small
    tr = run(cfg(pairing="cross", l_init=3, l_add=2, max_iterations=2), cdf, grid)
    assert tr.records[0]["pool_min"] <= 9 + 4


def test_nesting_all_keep(small):
    grid, cdf = small
    rep = nested_restriction_check(cfg(), cdf, grid, filter=lambda p: True, pool_size=12)
    assert rep["subset_size"] == rep["pool_size"] == 12
    for key in ("min", "max", "min_functional", "max_functional"):
        assert rep[f"subset_{key}"] == rep[f"pool_{key}"]


def test_nesting_singleton(small):
    grid, cdf = small
    lam = 5.0
    pairs = sample_paths(BasisSpec(), grid, 10, seed=2)
    keep = pairs[3]
    rep = nested_restriction_check(cfg(tol_primal=1e-10, tol_dual=1e-10), cdf, grid, pairs=pairs,
                                   filter=lambda p: p.id == keep.id)
    assert rep["subset_size"] == 1
    # one column: both programs move along the same direction, so the weights
    # are the clamped one-dimensional optima and differ only through the cap
    c = build_theta([keep], grid).toarray()[:, 0]
    xi = build_xi([keep], FunctionalSpec()).values[0]
    f = cdf.flat()
    w_lo = np.clip((lam * c @ f - xi) / (lam * c @ c), 0, 1)
    w_hi = np.clip((lam * c @ f + xi) / (lam * c @ c), 0, 1)
    assert rep["subset_min_functional"] == pytest.approx(xi * w_lo, abs=1e-6)
    assert rep["subset_max_functional"] == pytest.approx(xi * w_hi, abs=1e-6)


def test_nesting_singleton_zero_objective(small):
    grid, cdf = small
    pairs = sample_paths(BasisSpec(), grid, 10, seed=2)
    # ate(0.5, 0.5) makes Xi vanish, so both programs are the same fit problem
    rep = nested_restriction_check(cfg(functional=FunctionalSpec("ate", 0.5, 0.5)), cdf, grid,
                                   pairs=pairs, filter=lambda p: p.id == pairs[0].id)
    assert rep["subset_min_functional"] == rep["subset_max_functional"] == 0.0
    assert rep["subset_max"] == -rep["subset_min"]


def test_nesting_empty_subset_reported(small):
    grid, cdf = small
    rep = nested_restriction_check(cfg(), cdf, grid, filter=lambda p: False, pool_size=5)
    assert rep["subset_empty"] and rep["subset_min"] is None and rep["subset_max_functional"] is None


@pytest.mark.parametrize("seed", range(5))
def test_nesting_random_pools_against_oracle(small, seed):
    grid, cdf = small
    c = cfg(y_direction=1, x_direction=1, filter_mix=0.4, rng_seed=seed, tol_primal=1e-9, tol_dual=1e-9)
    runner = BoundsRunner(c, cdf, grid)
    runner.pools = []
    pairs = runner._sample_batch(15)
    rep = nested_restriction_check(c, cdf, grid, pairs=pairs)
    assert rep["subset_size"] >= 1
    assert rep["subset_min"] >= rep["pool_min"] - 1e-6
    assert rep["subset_max"] <= rep["pool_max"] + 1e-6
    # the same ordering from an independent solver
    subset = [p for p in pairs if p.y_path.is_monotone(1) and p.x_path.is_monotone(1)]
    assert len(subset) == rep["subset_size"]
    f = cdf.flat()
    vals = {}
    for tag, group in (("pool", pairs), ("subset", subset)):
        th = build_theta(group, grid).toarray()
        xi = build_xi(group, c.functional).values
        lo = projected_gradient(th, f, xi, c.lam, 1.0)
        hi = projected_gradient(th, f, xi, c.lam, -1.0)
        vals[tag] = (xi @ lo + 0.5 * c.lam * np.sum((th @ lo - f) ** 2),
                     xi @ hi - 0.5 * c.lam * np.sum((th @ hi - f) ** 2))
        assert rep[f"{tag}_min"] == pytest.approx(vals[tag][0], abs=1e-4)
        assert rep[f"{tag}_max"] == pytest.approx(vals[tag][1], abs=1e-4)
    assert vals["subset"][0] >= vals["pool"][0] - 1e-6
    assert vals["subset"][1] <= vals["pool"][1] + 1e-6


def test_bare_functional_need_not_nest(small):
    # restricting columns can lower the functional at the optimum while the fit
    # worsens; only the penalized optima are ordered
    grid, cdf = small
    c = cfg(y_direction=1, x_direction=1, filter_mix=0.4, rng_seed=4, tol_primal=1e-9, tol_dual=1e-9)
    rep = nested_restriction_check(c, cdf, grid, pool_size=15)
    assert rep["subset_min_functional"] < rep["pool_min_functional"]
    assert rep["subset_min"] >= rep["pool_min"]


def test_fixed_pool_values_match_oracle(small):
    grid, cdf = small
    pairs = sample_paths(BasisSpec(), grid, 8, seed=5)
    theta = build_theta(pairs, grid).toarray()
    xi = build_xi(pairs, FunctionalSpec()).values
    rep = nested_restriction_check(cfg(tol_primal=1e-9, tol_dual=1e-9), cdf, grid, pairs=pairs,
                                   filter=lambda p: True)
    lo = projected_gradient(theta, cdf.flat(), xi, 5.0, 1.0)
    hi = projected_gradient(theta, cdf.flat(), xi, 5.0, -1.0)
    assert rep["pool_min_functional"] == pytest.approx(xi @ lo, abs=1e-4)
    assert rep["pool_max_functional"] == pytest.approx(xi @ hi, abs=1e-4)
