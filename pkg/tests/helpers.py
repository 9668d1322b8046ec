"""Instance and grid generators shared by the test modules."""

from __future__ import annotations

import numpy as np

from dhmpc.coarsening import CoarseGrid
from dhmpc.model import CompactLp, MpcProblem, StageSpec, random_problem, to_compact


def scalar_lp(cost: float, lo: float = 3.0, hi: float = 5.0) -> CompactLp:
    """``min cost*x  s.t.  x >= lo, -x >= -hi`` as a one-stage compact LP."""
    return CompactLp(p=np.array([cost]), d=np.array([lo, -hi]),
                     G_diag=np.array([[[1.0], [-1.0]]]), G_sub=np.zeros((0, 2, 1)))


def one_state_stage(v: float, lo: float = 0.0, hi: float = 1.0) -> StageSpec:
    return StageSpec(A=[[1.0]], B=np.zeros((1, 0)), E=np.zeros((0, 1)), F=np.zeros((0, 0)),
                     q=[1.0], r=[], v=[v], w=[], x_lo=[lo], x_hi=[hi], u_lo=[], u_hi=[])


def sweep_problem(seed: int, max_N: int = 20) -> MpcProblem:
    rng = np.random.default_rng(seed)
    N = int(rng.integers(2, max_N + 1))
    nx = int(rng.integers(1, 3))
    nu = int(rng.integers(1, 3))
    nw = int(rng.integers(0, 2))
    return random_problem(rng, N, nx=nx, nu=nu, nw=nw)


def tiny_lp(seed: int, N: int = 3) -> CompactLp:
    """``nx = nu = 1`` instance within the brute-force cap (mN = 6N)."""
    return to_compact(random_problem(np.random.default_rng(seed), N))


def random_grid(rng: np.random.Generator, N: int) -> CoarseGrid:
    K = int(rng.integers(1, N + 1))
    inner = rng.choice(np.arange(2, N + 1), size=K - 1, replace=False) if K > 1 else []
    return CoarseGrid(tuple([1] + sorted(int(m) for m in inner)), N)
