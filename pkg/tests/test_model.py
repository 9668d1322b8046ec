import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhmpc.lp import solve
from dhmpc.model import (CompactLp, MpcProblem, StageSpec, check_admissible, load_instance,
                         problem_from_dict, problem_to_dict, random_problem, save_instance,
                         stage_dims, to_compact)

from helpers import one_state_stage


@pytest.mark.parametrize("dims, expected", [((2, 14, 6), (16, 48)), ((1, 0, 0), (1, 4)),
                                            ((3, 2, 1), (5, 18))])
def test_stage_dims_examples(dims, expected):
    assert stage_dims(*dims) == expected


@given(st.integers(1, 20), st.integers(0, 20), st.integers(0, 20))
def test_stage_dims_formula(nx, nu, nw):
    assert stage_dims(nx, nu, nw) == (nx + nu, 4 * nx + 2 * nu + 2 * nw)


def test_stage_dims_rejects_zero_states():
    with pytest.raises(ValueError):
        stage_dims(0, 1, 1)


def test_row_order_of_single_stage():
    s = StageSpec(A=[[1.0]], B=[[1.0]], E=[[2.0]], F=[[3.0]], q=[1.0], r=[1.0], v=[0.1], w=[0.2],
                  x_lo=[-1.0], x_hi=[1.5], u_lo=[-2.0], u_hi=[2.5])
    lp = to_compact(MpcProblem((s,)))
    assert lp.m == 8 and lp.n == 2
    np.testing.assert_array_equal(lp.d, [0.1, -0.1, 0.2, -0.2, -1.0, -1.5, -2.0, -2.5])
    np.testing.assert_array_equal(lp.G_diag[0, 0], [1.0, 0.0])
    np.testing.assert_array_equal(lp.G_diag[0, 2], [2.0, 3.0])


def test_block_layout_and_bandedness():
    lp = to_compact(random_problem(np.random.default_rng(1), 5, nx=2, nu=1, nw=1))
    G = lp.dense_G()
    for i in range(lp.N):
        np.testing.assert_array_equal(G[lp.stage_rows(i), lp.stage_cols(i)][:2],
                                      np.hstack([np.eye(2), np.zeros((2, 1))]))
        for j in range(lp.N):
            if i - j not in (0, 1):
                assert not G[lp.stage_rows(i), lp.stage_cols(j)].any()
    np.testing.assert_array_equal(lp.sparse_G().toarray(), G)


def test_sparse_and_matvec_agree():
    rng = np.random.default_rng(2)
    lp = to_compact(random_problem(rng, 6, nx=2, nu=2, nw=1))
    G = lp.dense_G()
    z, lam = rng.normal(size=lp.shape[1]), rng.normal(size=lp.shape[0])
    np.testing.assert_allclose(lp.matvec(z), G @ z, atol=1e-13)
    np.testing.assert_allclose(lp.rmatvec(lam), G.T @ lam, atol=1e-13)


def test_compact_feasibility_matches_direct_evaluation():
    rng = np.random.default_rng(3)
    problem = random_problem(rng, 3, nx=1, nu=1, nw=1)
    lp = to_compact(problem)
    x_ref = np.array([s.v for s in problem.stages])
    agree = 0
    for k in range(100):
        if k % 2 == 0:
            # trajectories that satisfy the dynamics, so both verdicts occur
            u = rng.uniform(-1.2, 1.2, (3, 1))
            x = np.zeros((3, 1))
            x[0] = problem.stages[0].v
            for i in range(1, 3):
                prev = problem.stages[i - 1]
                x[i] = prev.A @ x[i - 1] + prev.B @ u[i - 1] + problem.stages[i].v
        else:
            x = x_ref + rng.normal(scale=0.3, size=x_ref.shape)
            u = rng.uniform(-1.2, 1.2, (3, 1))
        z = np.hstack([x, u]).reshape(-1)
        direct = problem.constraint_violation(x, u) <= 1e-12
        compact = np.min(lp.residual(z)) >= -1e-12
        agree += direct == compact
    assert agree == 100


def test_objective_round_trip():
    problem = random_problem(np.random.default_rng(4), 8, nx=2, nu=2, nw=1)
    lp = to_compact(problem)
    sol = solve(lp)
    x, u = problem.split(sol.z)
    assert problem.objective(x, u) == pytest.approx(sol.objective, rel=1e-10, abs=1e-12)
    assert problem.constraint_violation(x, u) <= 1e-8


def test_mismatched_stage_dims_rejected():
    a = one_state_stage(0.5)
    b = StageSpec(A=np.eye(2), B=np.zeros((2, 0)), E=np.zeros((0, 2)), F=np.zeros((0, 0)),
                  q=[0, 0], r=[], v=[0, 0], w=[], x_lo=[0, 0], x_hi=[1, 1], u_lo=[], u_hi=[])
    with pytest.raises(ValueError, match="stage 2"):
        MpcProblem((a, b))


@pytest.mark.parametrize("bad", [dict(x_hi=[np.inf]), dict(x_lo=[2.0])])
def test_bad_bounds_rejected(bad):
    with pytest.raises(ValueError):
        one_state_stage(0.5).replace(**bad)


def test_admissibility_examples():
    assert check_admissible(to_compact(MpcProblem((one_state_stage(0.5),)))).feasible
    flag = check_admissible(to_compact(MpcProblem((one_state_stage(2.0),))))
    assert not flag.feasible and flag.certificate is None


def test_admissible_certificate_is_feasible():
    lp = to_compact(random_problem(np.random.default_rng(5), 6, nx=2, nu=1, nw=1))
    flag = check_admissible(lp)
    assert flag.feasible
    assert np.min(lp.residual(flag.certificate)) >= -1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_admissible_data_is_convex(seed, theta):
    rng = np.random.default_rng(seed)
    problem = random_problem(rng, 3, nx=1, nu=1, nw=1)
    other = random_problem(np.random.default_rng(seed + 1), 3, nx=1, nu=1, nw=1)
    # same G, second data vector taken from an independently generated feasible instance
    lp = to_compact(problem)
    lp2 = to_compact(MpcProblem(tuple(s.replace(v=o.v, w=o.w) for s, o in zip(problem.stages, other.stages))))
    if not check_admissible(lp2).feasible:
        return
    mix = lp.with_data(d=theta * lp.d + (1 - theta) * lp2.d)
    assert check_admissible(mix).feasible


def test_instance_round_trip(tmp_path):
    problem = random_problem(np.random.default_rng(6), 4, nx=2, nu=1, nw=1)
    path = tmp_path / "i.json"
    save_instance(problem, path)
    back = load_instance(path)
    a, b = to_compact(problem), to_compact(back)
    np.testing.assert_array_equal(a.d, b.d)
    np.testing.assert_array_equal(a.p, b.p)
    np.testing.assert_array_equal(a.dense_G(), b.dense_G())


def test_instance_missing_key():
    doc = problem_to_dict(random_problem(np.random.default_rng(7), 2))
    del doc["time_invariant"]
    with pytest.raises(ValueError, match="time_invariant"):
        problem_from_dict(doc)


def test_instance_wrong_series_length():
    doc = problem_to_dict(random_problem(np.random.default_rng(8), 3))
    doc["series"]["w"] = doc["series"]["w"][:2]
    with pytest.raises(ValueError, match="series.w"):
        problem_from_dict(json.loads(json.dumps(doc)))


def test_with_data_shares_structure():
    lp = to_compact(random_problem(np.random.default_rng(9), 4))
    G = lp.sparse_G()
    other = lp.with_data(d=lp.d + 1.0)
    assert other.sparse_G() is G
    assert isinstance(other, CompactLp)
    np.testing.assert_array_equal(other.d, lp.d + 1.0)
