import json

import numpy as np
import pytest

from crowdode.dynamics import Trajectory
from crowdode.errors import CrowdError
from crowdode.metrics import (EvalReport, compare_models, constant_velocity_simulator,
                              count_modes, default_ice_grid, displacement_errors,
                              evacuation_time, ice_curve, ice_rate, monte_carlo_eval,
                              shared_histogram, short_horizon_ade, wasserstein1, write_report)


def exits_only(exit_times):
    et = np.asarray(exit_times, dtype=float)
    n = et.size
    z = np.zeros((1, n, 2))
    return Trajectory(np.zeros(1, int), np.zeros(1), z, z.copy(), np.zeros((1, n), bool), et,
                      0.01)


def report(curve, t_ev, grid=None, name="m"):
    grid = np.arange(len(curve)) * 0.5 if grid is None else grid
    curve = np.asarray(curve, float)
    return EvalReport(name, grid, curve, curve[None], list(t_ev), 1, 5, 0)


def test_ice_rate_counts():
    et = [1.0] * 7 + [np.nan] * 13
    assert ice_rate(exits_only(et), 10.0) == pytest.approx(0.35)
    assert ice_rate(exits_only(et), 0.5) == 0.0
    assert ice_rate(exits_only([2.0, 3.0]), 2.0) == 0.5


def test_ice_curve_monotone_and_matches_rate(rng):
    traj = exits_only(np.where(rng.random(15) < 0.2, np.nan, rng.uniform(0, 30, 15)))
    grid = default_ice_grid(40.0)
    c = ice_curve(traj, grid)
    assert np.all(np.diff(c) >= 0) and 0 <= c.min() and c.max() <= 1
    assert np.allclose(c, [ice_rate(traj, t) for t in grid])
    assert grid[0] == 0.0 and grid[-1] == 40.0 and len(grid) == 81


def test_evacuation_time_is_max_exit():
    assert evacuation_time(exits_only([3.0, 9.5, 1.0])) == 9.5
    assert evacuation_time(exits_only([3.0, np.nan])) is None


def test_wasserstein_examples(rng):
    assert wasserstein1([1, 2, 3], [2, 3, 4]) == pytest.approx(1.0)
    a, b = rng.normal(size=40), rng.normal(1, 2, size=40)
    assert wasserstein1(a, b) == pytest.approx(np.mean(np.abs(np.sort(a) - np.sort(b))))
    # unequal sizes against the integral of |F_a - F_b| over the line
    a, b = rng.normal(size=7), rng.normal(0.5, size=11)
    xs = np.sort(np.concatenate([a, b]))
    Fa = np.searchsorted(np.sort(a), xs[:-1], side="right") / a.size
    Fb = np.searchsorted(np.sort(b), xs[:-1], side="right") / b.size
    assert wasserstein1(a, b) == pytest.approx(np.sum(np.abs(Fa - Fb) * np.diff(xs)))
    assert np.isnan(wasserstein1([], [1.0]))


def test_compare_models_constant_offset():
    a = report([0.1, 0.3, 0.6, 0.9], [5, 6, 7])
    b = report([0.0, 0.2, 0.5, 0.8], [5, 6, 7])
    c = compare_models(a, b)
    assert c["ice_max_abs_diff"] == pytest.approx(0.1)
    assert c["ice_mean_abs_diff"] == pytest.approx(0.1)
    same = compare_models(a, a)
    assert same["ice_max_abs_diff"] == 0 and same["t_ev_wasserstein1"] == 0


def test_compare_models_rejects_mismatch():
    with pytest.raises(ValueError):
        compare_models(report([0, 1], [1]), report([0, 1, 1], [1]))


def test_shared_histogram_edges():
    edges, ca, cb = shared_histogram([1.0, 2.0], [3.0, 5.0], bins=4)
    assert edges[0] == 1.0 and edges[-1] == 5.0 and len(edges) == 5
    assert ca.sum() == 2 and cb.sum() == 2


@pytest.mark.parametrize("counts, modes", [
    ([0, 0, 0], 0),
    ([1, 3, 5, 3, 1], 1),
    ([4, 6, 1, 0, 5, 7, 2], 2),
    ([5, 0, 5, 0, 5], 3),
    ([6, 5, 4, 5, 6], 1),
])
def test_count_modes(counts, modes):
    assert count_modes(counts) == modes


def test_displacement_errors():
    a = exits_only([1.0, 2.0])
    b = Trajectory(a.step_indices, a.times, a.positions + [3.0, 4.0], a.velocities, a.exited,
                   a.exit_times, a.dt)
    ade, fde = displacement_errors(a, b)
    assert np.allclose(ade, 5.0) and np.allclose(fde, 5.0)


def test_monte_carlo_reproducible_and_mean(scene, tmp_path):
    sim = constant_velocity_simulator(scene, 0.05)
    kw = dict(n_agents=4, n_runs=3, seed=7, t_max=4.0, spawn_mode="uniform")
    r1 = monte_carlo_eval(sim, scene, **kw)
    r2 = monte_carlo_eval(sim, scene, **kw)
    assert np.allclose(r1.ice_curve, r1.ice_runs.mean(axis=0))
    write_report(tmp_path / "a.json", [r1])
    write_report(tmp_path / "b.json", [r2])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    # agents at rest never leave
    assert r1.not_evacuated == 3 and r1.t_ev_samples == []
    single = monte_carlo_eval(sim, scene, 4, 1, 7, 4.0)
    assert single.ice_runs.shape == (1, 9)


def test_monte_carlo_records_failures(scene):
    calls = []

    def flaky(z0, t_max):
        calls.append(1)
        if len(calls) == 2:
            raise CrowdError("boom")
        return constant_velocity_simulator(scene, 0.1)(z0, t_max)

    r = monte_carlo_eval(flaky, scene, 2, 3, 0, 1.0)
    assert [f["run"] for f in r.failed_runs] == [1] and r.ice_runs.shape[0] == 2

    def broken(z0, t_max):
        raise CrowdError("always")

    with pytest.raises(CrowdError):
        monte_carlo_eval(broken, scene, 2, 2, 0, 1.0)
    with pytest.raises(ValueError):
        monte_carlo_eval(broken, scene, 2, 0, 0, 1.0)


def test_short_horizon_self_comparison(scene):
    cv = constant_velocity_simulator(scene, 0.01)
    out = short_horizon_ade(cv, cv, scene, 3, 2, 0, horizon=0.5)
    assert out["model_ade"] == 0.0 and out["baseline_ade"] == 0.0


def test_report_is_strict_json(tmp_path):
    r = report([0.0, 1.0], [])
    write_report(tmp_path / "r.json", [r], compare_models(r, r))
    doc = json.loads((tmp_path / "r.json").read_text(), parse_constant=lambda c: 1 / 0)
    assert doc["comparison"]["t_ev_wasserstein1"] is None
