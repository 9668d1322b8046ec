import csv

import numpy as np
import pytest

from dhmpc.closed_loop import (ControllerConfig, Scenario, StepInfeasible, compare_schemes,
                               run_closed_loop, step_plant)
from dhmpc.hvac import HvacConfig, generate_instance
from dhmpc.lp import solve
from dhmpc.model import StageSpec, to_compact

from helpers import one_state_stage

N, N_SIM = 24, 12


@pytest.fixture(scope="module")
def scenario():
    return generate_instance(HvacConfig(N=N, N_sim=N_SIM, seed=2))[1]


def _stage(A, B):
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    nx, nu = B.shape
    return StageSpec(A=A, B=B, E=np.zeros((0, nx)), F=np.zeros((0, nu)), q=np.zeros(nx), r=np.zeros(nu),
                     v=np.zeros(nx), w=[], x_lo=-np.ones(nx), x_hi=np.ones(nx),
                     u_lo=-np.ones(nu), u_hi=np.ones(nu))


def test_step_plant_examples(scenario):
    x = np.array([0.3, -0.2])
    np.testing.assert_array_equal(step_plant(x, np.zeros(2), _stage(np.eye(2), np.zeros((2, 2))), np.zeros(2)), x)
    u0 = np.array([0.5, 0.25])
    np.testing.assert_array_equal(step_plant(x, u0, _stage(np.zeros((2, 2)), np.eye(2)), np.zeros(2)), u0)
    u = np.zeros(14)
    u[4] = 1200.0
    nxt = step_plant(np.array([4000.0, 100.0]), u, scenario.base, np.zeros(2))
    assert nxt[0] == pytest.approx(4000.0 + (5.0 / 60.0) * 1200.0)
    assert nxt[1] == 100.0


def test_compact_fast_path_matches_reference(scenario):
    x = np.array([1234.0, 567.0])
    a = scenario.compact(3, N, x)
    b = to_compact(scenario.problem(3, N, x))
    np.testing.assert_array_equal(a.d, b.d)
    np.testing.assert_array_equal(a.p, b.p)
    np.testing.assert_array_equal(a.dense_G(), b.dense_G())


def test_single_step_full_cost(scenario):
    tr = run_closed_loop(scenario, ControllerConfig("full", N=N), 1)
    z = solve(to_compact(scenario.problem(0, N))).z
    n = 16
    expected = scenario.q[0] @ z[:2] + scenario.r[0] @ z[2:n]
    assert tr.cumulative_cost == pytest.approx(expected, rel=1e-9)


@pytest.fixture(scope="module")
def traces(scenario):
    out = {}
    for cfg in (ControllerConfig("full", N=N), ControllerConfig("diffusing", N=N, K=6),
                ControllerConfig("equal", N=N, K=6), ControllerConfig("fts", N=N, K=6)):
        out[cfg.label] = run_closed_loop(scenario, cfg, N_SIM)
    return out


def test_identity_grid_reproduces_full(scenario, traces):
    tr = run_closed_loop(scenario, ControllerConfig("diffusing", N=N, K=N, guard=False), N_SIM)
    assert np.abs(tr.u - traces["full"].u).max() <= 1e-7


def test_determinism(scenario, traces):
    again = run_closed_loop(scenario, ControllerConfig("diffusing", N=N, K=6), N_SIM)
    ref = traces["diffusing-K6-guard"]
    np.testing.assert_array_equal(again.u, ref.u)
    np.testing.assert_array_equal(again.x, ref.x)


def test_trace_invariants(scenario, traces):
    base = scenario.base
    for tr in traces.values():
        for t in range(tr.N_sim):
            nxt = base.A @ tr.x[t] + base.B @ tr.u[t] + scenario.v[t + 1]
            assert np.abs(nxt - tr.x[t + 1]).max() <= 1e-10
        recomputed = sum(scenario.q[t] @ tr.x[t] + scenario.r[t] @ tr.u[t] for t in range(tr.N_sim))
        assert tr.cumulative_cost == pytest.approx(recomputed, rel=1e-12)
        assert tr.stage1_violation.max() <= 1e-8
        assert np.all(tr.solve_s > 0)


def test_trace_csv(tmp_path, traces):
    tr = traces["full"]
    path = tmp_path / "t.csv"
    tr.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0][:4] == ["step", "cost_step", "cost_cum", "solve_ms"]
    assert len(rows) == N_SIM + 1 and len(rows[0]) == 4 + 2 + 14
    assert float(rows[-1][2]) == pytest.approx(tr.cumulative_cost, rel=1e-11)


def test_compare_schemes(scenario):
    cmp1 = compare_schemes([scenario], [ControllerConfig("full", N=N)], 4)
    assert cmp1.rows[0]["increase_vs_full"] == 0.0 and cmp1.win_rate is None
    cfg = ControllerConfig("equal", N=N, K=5)
    cmp2 = compare_schemes([scenario], [cfg, cfg], 4)
    a, b = cmp2.rows
    assert a["cost"] == b["cost"] and a["config"] == b["config"]
    cmp3 = compare_schemes([scenario], [ControllerConfig("full", N=N), ControllerConfig("diffusing", N=N, K=5),
                                        ControllerConfig("equal", N=N, K=5)], 4)
    assert cmp3.win_rate in (0.0, 1.0)
    assert set(cmp3.summary()) == {"full", "diffusing-K5-guard", "equal-K5-guard"}
    with pytest.raises(ValueError):
        compare_schemes([], [cfg], 4)


def test_shifted_prior_and_forecast_hook(scenario):
    tr = run_closed_loop(scenario, ControllerConfig("diffusing", N=N, K=6, prior="shifted"), 4)
    assert tr.stage1_violation.max() <= 1e-8
    noisy = ControllerConfig("full", N=N, forecast_sigma=0.2, forecast_seed=1)
    a, b = run_closed_loop(scenario, noisy, 3), run_closed_loop(scenario, noisy, 3)
    np.testing.assert_array_equal(a.u, b.u)
    clean = run_closed_loop(scenario, ControllerConfig("full", N=N), 3)
    # forecast errors reach the plan; the first control may be pinned regardless
    assert not np.array_equal(a.objective, clean.objective)


def test_infeasible_step_reports_index():
    T = 6
    v = np.zeros((T, 1))
    v[3] = 5.0                       # pushes the state outside its bounds at step 3
    scen = Scenario(base=one_state_stage(0.0), q=np.ones((T, 1)), r=np.zeros((T, 0)),
                    v=v, w=np.zeros((T, 0)), x0=np.array([0.5]))
    with pytest.raises(StepInfeasible) as exc:
        run_closed_loop(scen, ControllerConfig("full", N=2), 4)
    assert exc.value.step == 2


def test_config_validation(scenario):
    with pytest.raises(ValueError):
        ControllerConfig("nope")
    with pytest.raises(ValueError):
        ControllerConfig("equal", K=None)
    with pytest.raises(ValueError):
        ControllerConfig(prior="warm")
    with pytest.raises(ValueError):
        run_closed_loop(scenario, ControllerConfig("full", N=N), N_SIM + 100)
    assert ControllerConfig("full", K=7).label == "full"
