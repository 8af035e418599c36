import math

import numpy as np
import pytest

from pathbounds.condcdf import (CdfField, cdf_field, cond_cdf, cv_bandwidth, default_candidates,
                                loo_score)
from pathbounds.errors import BandwidthSelectionError, DataError
from pathbounds.unitgrid import Dataset, dyadic_grid

TOY = Dataset(np.array([[0.2, 0.3, 0.1], [0.6, 0.1, 0.5], [0.9, 0.8, 0.9]]))


def direct_sum(records, y, x, z, h):
    num = den = 0.0
    for yi, xi, zi in records:
        k = math.exp(-0.5 * ((z - zi) / h) ** 2)
        den += k
        if yi <= y and xi <= x:
            num += k
    return num / den


def ecdf(records, y, x):
    return sum(1 for yi, xi, _ in records if yi <= y and xi <= x) / len(records)


@pytest.mark.parametrize("y,x,z", [(0.5, 0.5, 0.3), (0.7, 0.2, 0.0), (1.0, 0.5, 0.9), (0.2, 0.3, 0.1)])
def test_toy_matches_direct_sum(y, x, z):
    assert abs(cond_cdf(TOY, y, x, z, 0.1) - direct_sum(TOY.records, y, x, z, 0.1)) <= 1e-9


def test_toy_field_matches_direct_sum():
    g = dyadic_grid(2)
    f = cdf_field(TOY, g, 0.1)
    p = g.points
    for iz in range(g.size):
        for ix in range(g.size):
            for iy in range(g.size):
                want = direct_sum(TOY.records, p[iy], p[ix], p[iz], 0.1)
                assert abs(f.values[iz, ix, iy] - want) <= 1e-9


def test_huge_bandwidth_is_ecdf():
    rng = np.random.default_rng(5)
    d = Dataset(rng.random((200, 3)))
    g = dyadic_grid(3)
    f = cdf_field(d, g, 1e6)
    p = g.points
    for iz in (0, 4, 8):
        for ix in range(g.size):
            for iy in range(g.size):
                assert abs(f.values[iz, ix, iy] - ecdf(d.records, p[iy], p[ix])) <= 1e-9
    assert abs(cond_cdf(d, 0.37, 0.61, 0.2, 1e6) - ecdf(d.records, 0.37, 0.61)) <= 1e-9


def test_top_corner_is_one():
    rng = np.random.default_rng(1)
    d = Dataset(rng.random((50, 3)))
    for z in (0.0, 0.5, 1.0):
        assert cond_cdf(d, 1.0, 1.0, z, 0.05) == 1.0
    f = cdf_field(d, dyadic_grid(3), 0.05)
    np.testing.assert_array_equal(f.values[:, -1, -1], 1.0)


def test_monotone_in_y_and_x():
    rng = np.random.default_rng(2)
    d = Dataset(rng.random((300, 3)))
    for _ in range(200):
        y, x, z = rng.random(3)
        dy, dx = rng.random(2) * 0.3
        base = cond_cdf(d, y, x, z, 0.07)
        assert cond_cdf(d, y + dy, x, z, 0.07) >= base
        assert cond_cdf(d, y, x + dx, z, 0.07) >= base
    f = cdf_field(d, dyadic_grid(4), 0.07)
    assert np.all(np.diff(f.values, axis=2) >= 0)
    assert np.all(np.diff(f.values, axis=1) >= 0)
    assert f.values.min() >= 0 and f.values.max() <= 1


def test_order0_grid_has_eight_values():
    f = cdf_field(TOY, dyadic_grid(0), 0.2)
    assert f.values.size == 8
    assert f.flat().shape == (8,)


def test_zero_mass_falls_back_to_ecdf():
    d = Dataset(np.array([[0.2, 0.3, 0.0], [0.6, 0.1, 0.0], [0.9, 0.8, 0.0]]))
    val, flag = cond_cdf(d, 0.7, 0.5, 1.0, 1e-4, return_flag=True)
    assert flag
    assert val == pytest.approx(ecdf(d.records, 0.7, 0.5))
    f = cdf_field(d, dyadic_grid(1), 1e-4)
    assert f.fallback_z == (0.5, 1.0)


@pytest.mark.parametrize("h", [0.0, -1.0, float("nan"), float("inf")])
def test_bad_bandwidth(h):
    with pytest.raises(DataError):
        cond_cdf(TOY, 0.5, 0.5, 0.5, h)


def test_threads_do_not_change_field():
    rng = np.random.default_rng(8)
    d = Dataset(rng.random((400, 3)))
    g = dyadic_grid(3)
    np.testing.assert_array_equal(cdf_field(d, g, 0.05).values, cdf_field(d, g, 0.05, threads=4).values)


def test_json_roundtrip():
    f = cdf_field(TOY, dyadic_grid(2), 0.1)
    back = CdfField.from_json(f.to_json())
    np.testing.assert_array_equal(back.values, f.values)
    assert back.bandwidth == f.bandwidth and back.grid.same_as(f.grid)


def test_json_missing_cells():
    import json

    d = json.loads(cdf_field(TOY, dyadic_grid(1), 0.1).to_json())
    d["table"].pop()
    with pytest.raises(DataError, match="missing"):
        CdfField.from_json(json.dumps(d))


def test_single_candidate_returned():
    assert cv_bandwidth(TOY, [0.2]) == 0.2


def test_cv_needs_ten_records():
    with pytest.raises(DataError):
        cv_bandwidth(TOY, [0.1, 0.2])


def test_cv_all_degenerate():
    rng = np.random.default_rng(0)
    recs = rng.random((20, 3))
    recs[:10, 2] = 0.0
    recs[10:, 2] = 1.0
    recs[0, 2] = 0.5  # isolated: no mass once held out at tiny h
    with pytest.raises(BandwidthSelectionError):
        cv_bandwidth(Dataset(recs), [1e-4, 2e-4])


def test_loo_score_matches_naive():
    rng = np.random.default_rng(4)
    d = Dataset(rng.random((30, 3)))
    g = dyadic_grid(1)
    p = g.points
    h = 0.2
    total = 0.0
    cnt = 0
    for i in range(len(d)):
        rest = np.delete(d.records, i, axis=0)
        for yv in p:
            for xv in p:
                pred = direct_sum(rest, yv, xv, d.z[i], h)
                t = float(d.y[i] <= yv and d.x[i] <= xv)
                total += (pred - t) ** 2
                cnt += 1
    assert loo_score(d, g, h, chunk=7) == pytest.approx(total / cnt, rel=1e-12)


def _zdata(seed, strong, n=300):
    rng = np.random.default_rng(seed)
    z = rng.random(n)
    if strong:
        x = np.clip(0.5 + 0.45 * np.sin(4 * np.pi * z) + 0.05 * rng.standard_normal(n), 0, 1)
        y = np.clip(0.5 + 0.45 * np.cos(4 * np.pi * z) + 0.05 * rng.standard_normal(n), 0, 1)
    else:
        x = rng.random(n)
        y = rng.random(n)
    return Dataset(np.column_stack([y, x, z]))


def test_strong_z_dependence_selects_smaller_bandwidth():
    cands = [0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64]
    wins = 0
    for seed in range(20):
        hs = cv_bandwidth(_zdata(seed, True), cands)
        hi = cv_bandwidth(_zdata(seed, False), cands)
        wins += hs < hi
    assert wins > 10


def test_cv_golden_value():
    rng = np.random.default_rng(2024)
    z = rng.random(400)
    x = np.clip(z + 0.2 * rng.standard_normal(400), 0, 1)
    y = np.clip(x ** 2 + 0.1 * rng.standard_normal(400), 0, 1)
    d = Dataset(np.column_stack([y, x, z]))
    assert cv_bandwidth(d, [0.05, 0.1, 0.2]) == 0.1
    # frozen after the first run
    assert loo_score(d, dyadic_grid(3), 0.1) == pytest.approx(0.10682973444410322, rel=1e-10)


def test_default_candidates_shrink_with_n():
    a = default_candidates(100)
    b = default_candidates(10000)
    assert len(a) == 8 and all(x > y for x, y in zip(a, b))
