"""Time-grid aggregation of block-bidiagonal LPs.

A coarse grid ``1 = M_1 < ... < M_K <= N`` (1-based time indices) splits the
horizon into blocks ``M_k .. M_{k+1}-1``.  Primal variables of a block are
replaced by one scaled copy (``T``), constraint rows of a block are summed with
the same scaling (``U``).  Both operators are kept implicit: a block index
per stage and the factors ``L_k^{-1/2}``.

Stage and block indices returned by functions in this module are 0-based,
except for :attr:`CoarseGrid.points`, which keeps the 1-based ``M_k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .lp import OPT_TOL, NumericalFailure, PrimalDualSolution, enumerate_bases, solve
from .model import CompactLp

FREE_TOL = 1e-9


@dataclass(frozen=True)
class CoarseGrid:
    points: tuple[int, ...]
    N: int

    def __post_init__(self):
        pts = tuple(int(p) for p in self.points)
        if not pts or pts[0] != 1:
            raise ValueError("a coarse grid must start at M_1 = 1")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError(f"grid points must be strictly increasing: {pts}")
        if pts[-1] > self.N:
            raise ValueError(f"last grid point {pts[-1]} exceeds N={self.N}")
        object.__setattr__(self, "points", pts)

    @property
    def K(self) -> int:
        return len(self.points)

    @property
    def starts(self) -> np.ndarray:
        """0-based first stage of each block."""
        return np.asarray(self.points, dtype=int) - 1

    @property
    def lengths(self) -> np.ndarray:
        ends = np.append(self.starts[1:], self.N)
        return ends - self.starts

    def blocks(self) -> list[range]:
        return [range(s, s + L) for s, L in zip(self.starts, self.lengths)]

    def block_of_stage(self) -> np.ndarray:
        return np.repeat(np.arange(self.K), self.lengths)

    def to_list(self) -> list[int]:
        return list(self.points)


def _check_K(N: int, K: int) -> None:
    if N < 1 or K < 1:
        raise ValueError(f"need N >= 1 and K >= 1, got N={N}, K={K}")
    if K > N:
        raise ValueError(f"K={K} exceeds N={N}")


def _make(points: list[int], N: int) -> CoarseGrid:
    if len(set(points)) != len(points):
        raise ValueError(f"grid formula produced duplicate points {points}")
    return CoarseGrid(tuple(points), N)


def grid_equal_spacing(N: int, K: int) -> CoarseGrid:
    _check_K(N, K)
    return _make([N * (k - 1) // K + 1 for k in range(1, K + 1)], N)


def grid_full_then_sparse(N: int, K: int) -> CoarseGrid:
    _check_K(N, K)
    return _make(list(range(1, K + 1)), N)


def _floor_root_power(base: int, num: int, den: int) -> int:
    """Exact ``floor(base ** (num / den))`` for positive integers."""
    target = base ** num
    f = int(round(base ** (num / den)))
    while f ** den > target:
        f -= 1
    while (f + 1) ** den <= target:
        f += 1
    return f


def grid_diffusing(N: int, K: int) -> CoarseGrid:
    """Spacing that grows geometrically: ``M_k = max(k, floor((N+1)^((k-1)/K)))``."""
    _check_K(N, K)
    return _make([max(k, _floor_root_power(N + 1, k - 1, K)) for k in range(1, K + 1)], N)


def grid_identity(N: int) -> CoarseGrid:
    return CoarseGrid(tuple(range(1, N + 1)), N)


STRATEGIES: dict[str, Callable[[int, int], CoarseGrid]] = {
    "equal": grid_equal_spacing,
    "fts": grid_full_then_sparse,
    "diffusing": grid_diffusing,
}


def _strategy(strategy) -> Callable[[int, int], CoarseGrid]:
    if callable(strategy):
        return strategy
    try:
        return STRATEGIES[strategy]
    except KeyError:
        raise ValueError(f"unknown grid strategy {strategy!r}; choose from {sorted(STRATEGIES)}") from None


def grid_feasibility_guard(strategy, N: int, K: int) -> CoarseGrid:
    """Keep stage 1 as its own block and apply ``strategy`` to stages 2..N."""
    if K < 2:
        raise ValueError("the feasibility guard needs K >= 2")
    if K > N:
        raise ValueError(f"K={K} exceeds N={N}")
    inner = _strategy(strategy)(N - 1, K - 1)
    return _make([1] + [m + 1 for m in inner.points], N)


def make_grid(scheme: str, N: int, K: int | None = None, guard: bool = False) -> CoarseGrid:
    """Grid for a named scheme; ``"full"`` is the identity grid and ignores ``K``."""
    if scheme == "full":
        return grid_identity(N)
    if K is None:
        raise ValueError(f"scheme {scheme!r} needs K")
    if guard:
        return grid_feasibility_guard(scheme, N, K)
    return _strategy(scheme)(N, K)


@dataclass(frozen=True)
class CoarseningOperators:
    grid: CoarseGrid
    n: int
    m: int

    @property
    def scale(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.grid.lengths)

    def _restrict(self, v: np.ndarray, width: int) -> np.ndarray:
        vv = np.asarray(v, dtype=float).reshape(self.grid.N, width)
        return (np.add.reduceat(vv, self.grid.starts, axis=0) * self.scale[:, None]).reshape(-1)

    def _prolong(self, v: np.ndarray, width: int) -> np.ndarray:
        vv = np.asarray(v, dtype=float).reshape(self.grid.K, width) * self.scale[:, None]
        return vv[self.grid.block_of_stage()].reshape(-1)

    def T(self, zt: np.ndarray) -> np.ndarray:
        return self._prolong(zt, self.n)

    def Tt(self, z: np.ndarray) -> np.ndarray:
        return self._restrict(z, self.n)

    def U(self, lt: np.ndarray) -> np.ndarray:
        return self._prolong(lt, self.m)

    def Ut(self, lam: np.ndarray) -> np.ndarray:
        return self._restrict(lam, self.m)

    def _dense(self, width: int) -> np.ndarray:
        out = np.zeros((self.grid.N * width, self.grid.K * width))
        eye = np.eye(width)
        for k, (blk, s) in enumerate(zip(self.grid.blocks(), self.scale)):
            for i in blk:
                out[i * width:(i + 1) * width, k * width:(k + 1) * width] = s * eye
        return out

    def dense_T(self) -> np.ndarray:
        return self._dense(self.n)

    def dense_U(self) -> np.ndarray:
        return self._dense(self.m)


@dataclass(frozen=True)
class Prior:
    z_o: np.ndarray
    lambda_o: np.ndarray

    @classmethod
    def zero(cls, lp: CompactLp) -> "Prior":
        mN, nN = lp.shape
        return cls(np.zeros(nN), np.zeros(mN))

    @classmethod
    def from_solution(cls, sol: PrimalDualSolution) -> "Prior":
        return cls(np.asarray(sol.z, dtype=float), np.asarray(sol.lam, dtype=float))

    def is_feasible(self, lp: CompactLp, tol: float = 1e-9) -> bool:
        return bool(np.min(lp.residual(self.z_o)) >= -tol)


@dataclass(frozen=True)
class CoarseLp:
    lp: CompactLp
    grid: CoarseGrid
    prior: Prior
    source: CompactLp

    @property
    def ops(self) -> CoarseningOperators:
        return CoarseningOperators(self.grid, self.source.n, self.source.m)


def coarsen(lp: CompactLp, grid: CoarseGrid, prior: Prior | None = None) -> CoarseLp:
    """Aggregate ``lp`` over ``grid`` around a primal-dual prior.

    Cost ``T'(p - G'lam_o)``, data ``U'(d - G z_o)``, matrix ``U'GT``; the
    coarse matrix is again block lower-bidiagonal with K stages.
    """
    if grid.N != lp.N:
        raise ValueError(f"grid has N={grid.N}, LP has N={lp.N}")
    if prior is None:
        prior = Prior.zero(lp)
    mN, nN = lp.shape
    if prior.z_o.shape != (nN,) or prior.lambda_o.shape != (mN,):
        raise ValueError("prior dimensions do not match the LP")
    ops = CoarseningOperators(grid, lp.n, lp.m)
    starts, L = grid.starts, grid.lengths
    sub_full = np.zeros_like(lp.G_diag)
    sub_full[1:] = lp.G_sub
    inner = sub_full.copy()
    inner[starts] = 0.0
    Gt_diag = (np.add.reduceat(lp.G_diag, starts, axis=0)
               + np.add.reduceat(inner, starts, axis=0)) / L[:, None, None]
    Gt_sub = sub_full[starts[1:]] / np.sqrt(L[1:] * L[:-1])[:, None, None]
    p_t = ops.Tt(lp.p - lp.rmatvec(prior.lambda_o))
    d_t = ops.Ut(lp.d - lp.matvec(prior.z_o))
    coarse = CompactLp(p=p_t, d=d_t, G_diag=Gt_diag, G_sub=Gt_sub)
    return CoarseLp(lp=coarse, grid=grid, prior=prior, source=lp)


def solve_coarse(coarse: CoarseLp, *, select: str = "vertex", method: str = "auto"
                 ) -> PrimalDualSolution:
    """Solve a coarse problem.

    ``select="prior"`` breaks ties among coarse optima by taking the one
    closest to the prior (minimal ``||zt||_1``).  With an exact prior every
    feasible coarse point is optimal, and this picks ``zt = 0``.
    """
    if select not in ("vertex", "prior"):
        raise ValueError(f"unknown selection rule {select!r}")
    sol = solve(coarse.lp, method=method, with_basis=False)
    if select == "vertex" or not np.any(sol.z):
        return sol
    lp = coarse.lp
    mK, nK = lp.shape
    G = lp.sparse_G()
    eye = sparse.identity(nK, format="csr")
    # variables (zt, s): min 1's  s.t.  G zt >= d,  p'zt <= opt,  |zt| <= s
    A_ub = sparse.vstack([
        sparse.hstack([-G, sparse.csr_matrix((mK, nK))]),
        sparse.hstack([sparse.csr_matrix(lp.p[None, :]), sparse.csr_matrix((1, nK))]),
        sparse.hstack([eye, -eye]),
        sparse.hstack([-eye, -eye]),
    ], format="csr")
    slack = OPT_TOL * (1.0 + abs(sol.objective))
    b_ub = np.concatenate([-lp.d, [sol.objective + slack], np.zeros(2 * nK)])
    c = np.concatenate([np.zeros(nK), np.ones(nK)])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=(None, None), method="highs")
    if res.status != 0:
        raise NumericalFailure(f"prior-proximal selection failed: {res.message}")
    zt = res.x[:nK]
    return PrimalDualSolution(z=zt, lam=sol.lam, basis=None, objective=float(lp.p @ zt),
                              status="optimal", iterations=sol.iterations)


def project(coarse_sol: PrimalDualSolution, prior: Prior, ops: CoarseningOperators
            ) -> tuple[np.ndarray, np.ndarray]:
    """Lift a coarse solution back: ``(z_o + T zt, lambda_o + U lt)``."""
    zt = np.asarray(coarse_sol.z, dtype=float)
    lt = np.asarray(coarse_sol.lam, dtype=float)
    if zt.size != ops.grid.K * ops.n or lt.size != ops.grid.K * ops.m:
        raise ValueError("coarse solution does not match the coarsening operators")
    return prior.z_o + ops.T(zt), prior.lambda_o + ops.U(lt)


def free_variables(grid: CoarseGrid, prior: Prior, tol: float = FREE_TOL
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Blocks (and their stages) that are singletons with a zero prior dual."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    lam = np.asarray(prior.lambda_o, dtype=float).reshape(grid.N, -1)
    zero_dual = np.all(np.abs(lam) <= tol, axis=1)
    blocks = [k for k, (s, L) in enumerate(zip(grid.starts, grid.lengths))
              if L == 1 and zero_dual[s]]
    S_t = np.array(blocks, dtype=int)
    S = grid.starts[S_t] if S_t.size else np.array([], dtype=int)
    return S_t, np.asarray(S, dtype=int)


def induced_perturbation(lp: CompactLp, z_proj: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Data for which the projected coarse point solves the full problem:
    ``d_i`` on free stages, ``G_{i,i-1} z'_{i-1} + G_{i,i} z'_i`` elsewhere."""
    Gz = lp.matvec(z_proj).reshape(lp.N, lp.m)
    out = Gz.copy()
    S = np.asarray(S, dtype=int)
    out[S] = lp.d.reshape(lp.N, lp.m)[S]
    return out.reshape(-1)


def stage_residual_norms(lp: CompactLp, z: np.ndarray) -> np.ndarray:
    """``||d_j - G_{j,j-1} z_{j-1} - G_{j,j} z_j||`` for every stage."""
    return np.linalg.norm((lp.d - lp.matvec(z)).reshape(lp.N, lp.m), axis=1)


def delta_estimate(lp: CompactLp, grid: CoarseGrid, prior: Prior, z_proj: np.ndarray,
                   tol: float = FREE_TOL) -> float:
    """Coarsening error evaluated at the computed projected point.

    Largest stage residual norm over the non-free stages (0 if all stages are
    free).  The worst case over all projected coarse points can only be larger.
    """
    _, S = free_variables(grid, prior, tol)
    mask = np.ones(lp.N, dtype=bool)
    mask[S] = False
    norms = stage_residual_norms(lp, z_proj)[mask]
    return float(norms.max()) if norms.size else 0.0


def delta_exact(coarse: CoarseLp, tol: float = FREE_TOL) -> float:
    """Worst-case coarsening error over all feasible coarse points.

    The stage residual norm is convex in the coarse variables, so its maximum
    over the coarse polytope is attained at a vertex; vertices are enumerated
    (only for coarse problems within the enumeration cap).
    """
    lp, src = coarse.lp, coarse.source
    ops = coarse.ops
    _, S = free_variables(coarse.grid, coarse.prior, tol)
    mask = np.ones(src.N, dtype=bool)
    mask[S] = False
    if not mask.any():
        return 0.0
    G, d = lp.dense_G(), lp.d
    feas_tol = 1e-9 * (1.0 + np.max(np.abs(d), initial=0.0))
    best = -np.inf
    for _, zt in enumerate_bases(lp):
        if np.min(G @ zt - d) < -feas_tol:
            continue
        z = coarse.prior.z_o + ops.T(zt)
        best = max(best, float(stage_residual_norms(src, z)[mask].max()))
    if best == -np.inf:
        raise ValueError("coarse problem has no feasible vertex")
    return best


def coarsening_error_bound(N: int, S: np.ndarray, gamma: float, rho: float, delta: float) -> np.ndarray:
    """Per-stage bound ``sum_{j not in S} gamma * delta * rho^((|i-j|-1)_+)``."""
    j = np.setdiff1d(np.arange(N), np.asarray(S, dtype=int))
    i = np.arange(N)[:, None]
    expo = np.maximum(np.abs(i - j[None, :]) - 1, 0)
    return gamma * delta * np.sum(rho ** expo, axis=1)
