"""Solvers for ``min p'z s.t. G z >= d`` that report a row basis.

A *basis* is a set ``B`` of ``nN`` rows of ``G`` with ``G[B, :]`` nonsingular;
its basic solution solves ``G[B, :] z = d[B]``.  Row indices are 0-based.

Two solve paths are available:

* ``method="simplex"``: a dense primal simplex that walks the vertices of
  ``{z : G z >= d}`` directly.  The working set is a row basis, so the optimal
  basis comes out of the iteration itself.  Dantzig pricing with a switch to
  Bland's rule after a run of degenerate pivots.
* ``method="highs"``: HiGHS dual simplex on the sparse ``G``.  Rows that are
  nonbasic in the HiGHS basis form the row basis; :func:`extract_basis` is the
  fallback when HiGHS leaves a free column nonbasic.

``method="auto"`` uses the dense simplex for small problems only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import highspy
import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu

from .model import CompactLp

FEAS_TOL = 1e-8
OPT_TOL = 1e-8
PIVOT_TOL = 1e-10
BASIS_RCOND = 1e-10
BRUTE_FORCE_CAP = 24
AUTO_DENSE_LIMIT = 240


class SolverError(RuntimeError):
    pass


class Infeasible(SolverError):
    pass


class Unbounded(SolverError):
    pass


class NumericalFailure(SolverError):
    pass


class DegenerateSelectionFailure(SolverError):
    pass


class SingularBasis(SolverError):
    pass


class TooLarge(SolverError):
    pass


@dataclass(frozen=True)
class Basis:
    rows: np.ndarray

    def __post_init__(self):
        rows = np.unique(np.asarray(self.rows, dtype=int))
        if rows.size != np.asarray(self.rows).size:
            raise ValueError("basis rows must be distinct")
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Basis) and np.array_equal(self.rows, other.rows)

    def __hash__(self) -> int:
        return hash(self.rows.tobytes())


@dataclass(frozen=True)
class PrimalDualSolution:
    z: np.ndarray
    lam: np.ndarray
    basis: Basis | None
    objective: float
    status: str = "optimal"
    iterations: int = 0


def _tolerances(lp_d: np.ndarray, lp_p: np.ndarray) -> tuple[float, float]:
    feas = FEAS_TOL * (1.0 + np.max(np.abs(lp_d), initial=0.0))
    opt = OPT_TOL * (1.0 + np.max(np.abs(lp_p), initial=0.0))
    return feas, opt


def basis_matrix(lp: CompactLp, basis: Basis) -> np.ndarray:
    """Dense ``G[B, :]``."""
    rows = basis.rows
    N, m, n = lp.G_diag.shape
    out = np.zeros((rows.size, n * N))
    stage = rows // m
    local = rows % m
    for k, (i, r) in enumerate(zip(stage, local)):
        out[k, i * n:(i + 1) * n] = lp.G_diag[i, r]
        if i > 0:
            out[k, (i - 1) * n:i * n] = lp.G_sub[i - 1, r]
    return out


def _check_conditioning(GB: np.ndarray) -> None:
    if GB.shape[0] != GB.shape[1]:
        raise SingularBasis(f"basis has {GB.shape[0]} rows for {GB.shape[1]} unknowns")
    s = linalg.svdvals(GB)
    if s.size and (s[-1] <= BASIS_RCOND * s[0] or s[0] == 0.0):
        raise SingularBasis(f"G[B,:] is singular (sigma_min={s[-1]:.3e}, sigma_max={s[0]:.3e})")


def basic_solution(lp: CompactLp, basis: Basis, data: np.ndarray | None = None) -> np.ndarray:
    """The unique ``z`` with ``G[B, :] z = data[B]`` (``data`` defaults to ``lp.d``).

    Not necessarily feasible, let alone optimal.  Large bases are factored
    with a sparse LU instead of being checked by SVD.
    """
    d = lp.d if data is None else np.asarray(data, dtype=float)
    nN = lp.n * lp.N
    if nN <= AUTO_DENSE_LIMIT:
        GB = basis_matrix(lp, basis)
        _check_conditioning(GB)
        return linalg.solve(GB, d[basis.rows])
    if len(basis) != nN:
        raise SingularBasis(f"basis has {len(basis)} rows for {nN} unknowns")
    GB = lp.sparse_G()[basis.rows].tocsc()
    try:
        lu = splu(GB)
    except RuntimeError as exc:
        raise SingularBasis(f"G[B,:] is singular: {exc}") from None
    diag = np.abs(lu.U.diagonal())
    if diag.min() <= BASIS_RCOND * diag.max():
        raise SingularBasis(f"G[B,:] is numerically singular (pivot ratio {diag.min() / diag.max():.3e})")
    return lu.solve(d[basis.rows])


# -- dense row-basis simplex -----------------------------------------------

class _RowSimplex:
    """Vertex-walking simplex on ``min c'y s.t. M y >= b`` (dense ``M``)."""

    def __init__(self, M, b, c, feas_tol, opt_tol, max_iter, stall_limit=50, refactor_every=60):
        self.M, self.b, self.c = M, b, c
        self.feas_tol, self.opt_tol = feas_tol, opt_tol
        self.max_iter = max_iter
        self.stall_limit = stall_limit
        self.refactor_every = refactor_every
        self.iterations = 0

    def _refactor(self, B):
        try:
            Binv = linalg.inv(self.M[B])
        except linalg.LinAlgError as exc:
            raise NumericalFailure("basis became singular") from exc
        return Binv, Binv @ self.b[B]

    def run(self, B: np.ndarray):
        M, b, c = self.M, self.b, self.c
        B = np.array(B, dtype=int)
        Binv, y = self._refactor(B)
        in_basis = np.zeros(M.shape[0], dtype=bool)
        in_basis[B] = True
        bland = False
        stall = 0
        since_refactor = 0
        while True:
            if self.iterations >= self.max_iter:
                raise NumericalFailure(f"simplex did not converge in {self.max_iter} iterations")
            mult = c @ Binv
            neg = np.flatnonzero(mult < -self.opt_tol)
            if neg.size == 0:
                return B, Binv, y, mult
            if bland:
                r = neg[np.argmin(B[neg])]
            else:
                r = neg[np.argmin(mult[neg])]
            dy = Binv[:, r]
            a = M @ dy
            slack = M @ y - b
            piv = PIVOT_TOL * max(1.0, np.max(np.abs(dy)))
            cand = np.flatnonzero((a < -piv) & ~in_basis)
            if cand.size == 0:
                raise Unbounded("objective is unbounded below")
            ratios = np.maximum(slack[cand], 0.0) / -a[cand]
            tmin = ratios.min()
            ties = cand[ratios <= tmin + 1e-12 * (1.0 + tmin)]
            q = ties.min() if bland else ties[np.argmax(-a[ties])]
            y = y + tmin * dy
            w = M[q] - M[B[r]]
            Binv = Binv - np.outer(dy, w @ Binv) / a[q]
            in_basis[B[r]] = False
            in_basis[q] = True
            B[r] = q
            self.iterations += 1
            since_refactor += 1
            if since_refactor >= self.refactor_every:
                Binv, y = self._refactor(B)
                since_refactor = 0
            stall = stall + 1 if tmin * -mult[r] <= 1e-14 * (1.0 + abs(c @ y)) else 0
            if stall >= self.stall_limit:
                bland = True


def _initial_rows(G: np.ndarray, prefer: np.ndarray | None = None) -> np.ndarray:
    """Pick ``ncols`` well-conditioned independent rows of ``G``."""
    ncols = G.shape[1]
    if prefer is not None:
        try:
            _check_conditioning(G[prefer])
            return np.array(prefer, dtype=int)
        except SingularBasis:
            pass
    _, R, piv = linalg.qr(G.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size < ncols or diag[ncols - 1] <= BASIS_RCOND * diag[0]:
        raise NumericalFailure("G does not have full column rank; the LP has no vertex")
    return np.sort(piv[:ncols])


def _dense_simplex(lp: CompactLp, warm: Basis | None, max_iter: int | None):
    G = lp.dense_G()
    d, p = lp.d, lp.p
    mrows, ncols = G.shape
    feas_tol, opt_tol = _tolerances(d, p)
    max_iter = max_iter or 50 * (mrows + ncols)
    B0 = _initial_rows(G, None if warm is None else warm.rows)
    z0 = linalg.solve(G[B0], d[B0])
    viol = d - G @ z0
    iters = 0
    if np.max(viol) > feas_tol:
        # phase 1: min t s.t. G_B0 z >= d_B0, G_i z + t >= d_i otherwise, t >= 0
        coef = np.ones(mrows)
        coef[B0] = 0.0
        M = np.zeros((mrows + 1, ncols + 1))
        M[:mrows, :ncols] = G
        M[:mrows, ncols] = coef
        M[mrows, ncols] = 1.0
        b = np.append(d, 0.0)
        c = np.zeros(ncols + 1)
        c[-1] = 1.0
        start = np.append(B0, np.argmax(np.where(coef > 0, viol, -np.inf)))
        ph1 = _RowSimplex(M, b, c, feas_tol, 1e-12, max_iter)
        B1, Binv1, y1, _ = ph1.run(start)
        iters += ph1.iterations
        if y1[-1] > feas_tol:
            raise Infeasible(f"no point satisfies G z >= d (phase-1 residual {y1[-1]:.3e})")
        tpos = np.flatnonzero(B1 == mrows)
        if tpos.size == 0:
            # degenerate: swap the row t >= 0 into the basis at the same vertex
            row = Binv1[-1]
            r = int(np.argmax(np.abs(row)))
            B1 = B1.copy()
            B1[r] = mrows
            tpos = np.array([r])
        B0 = np.sort(np.delete(B1, tpos[0]))
    ph2 = _RowSimplex(G, d, p, feas_tol, opt_tol, max_iter)
    B, Binv, z, mult = ph2.run(B0)
    iters += ph2.iterations
    order = np.argsort(B)
    B = B[order]
    mult = mult[order]
    z = linalg.solve(G[B], d[B])
    lam = np.zeros(mrows)
    lam[B] = np.where(mult < 0.0, 0.0, mult)
    return z, lam, Basis(B), iters


# -- HiGHS path --------------------------------------------------------------

_STATUS = highspy.HighsModelStatus
_NONBASIC_ROW = (highspy.HighsBasisStatus.kLower, highspy.HighsBasisStatus.kUpper,
                 highspy.HighsBasisStatus.kZero, highspy.HighsBasisStatus.kNonbasic)


def _highs(lp: CompactLp, warm: Basis | None = None):
    """Solve with HiGHS; returns ``(z, lam, basis rows or None, iterations)``.

    A warm row basis is handed to HiGHS as its starting simplex basis.
    """
    mN, nN = lp.shape
    G = lp.sparse_G().tocsc()
    model = highspy.HighsLp()
    model.num_col_ = nN
    model.num_row_ = mN
    model.col_cost_ = lp.p
    model.col_lower_ = np.full(nN, -highspy.kHighsInf)
    model.col_upper_ = np.full(nN, highspy.kHighsInf)
    model.row_lower_ = lp.d
    model.row_upper_ = np.full(mN, highspy.kHighsInf)
    model.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    model.a_matrix_.start_ = G.indptr
    model.a_matrix_.index_ = G.indices
    model.a_matrix_.value_ = G.data
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("solver", "simplex")
    h.setOptionValue("simplex_strategy", 1)
    h.setOptionValue("primal_feasibility_tolerance", 1e-9)
    h.setOptionValue("dual_feasibility_tolerance", 1e-9)
    h.passModel(model)
    if warm is not None and len(warm) == nN:
        hb = highspy.HighsBasis()
        status = np.full(mN, highspy.HighsBasisStatus.kBasic)
        status[warm.rows] = highspy.HighsBasisStatus.kLower
        hb.col_status = [highspy.HighsBasisStatus.kBasic] * nN
        hb.row_status = list(status)
        hb.valid = True
        h.setBasis(hb)
    h.run()
    status = h.getModelStatus()
    if status in (_STATUS.kInfeasible, _STATUS.kUnboundedOrInfeasible):
        raise Infeasible(h.modelStatusToString(status))
    if status == _STATUS.kUnbounded:
        raise Unbounded(h.modelStatusToString(status))
    if status != _STATUS.kOptimal:
        raise NumericalFailure(h.modelStatusToString(status))
    sol = h.getSolution()
    z = np.asarray(sol.col_value, dtype=float)
    lam = np.maximum(np.asarray(sol.row_dual, dtype=float), 0.0)
    hb = h.getBasis()
    rows = None
    if hb.valid:
        nonbasic = np.array([st in _NONBASIC_ROW for st in hb.row_status])
        if nonbasic.sum() == nN:
            rows = np.flatnonzero(nonbasic)
    return z, lam, rows, int(h.getInfo().simplex_iteration_count)


def _basis_multipliers(lp: CompactLp, basis: Basis) -> np.ndarray:
    """``lam`` supported on ``B`` with ``G[B, :]' lam_B = p``, clipped at zero."""
    if lp.n * lp.N <= AUTO_DENSE_LIMIT:
        mult = linalg.solve(basis_matrix(lp, basis).T, lp.p)
    else:
        mult = splu(lp.sparse_G()[basis.rows].T.tocsc()).solve(lp.p)
    lam = np.zeros(lp.shape[0])
    lam[basis.rows] = np.maximum(mult, 0.0)
    return lam


def solve(lp: CompactLp, *, method: str = "auto", with_basis: bool = True,
          warm_basis: Basis | None = None, max_iter: int | None = None) -> PrimalDualSolution:
    """Optimal primal-dual pair of ``min p'z s.t. G z >= d``.

    ``warm_basis`` is only a starting point; the result does not depend on it
    beyond the choice among alternative optima.  Raises
    :class:`Infeasible`, :class:`Unbounded` or :class:`NumericalFailure`.
    """
    nN = lp.n * lp.N
    if method == "auto":
        method = "simplex" if nN <= AUTO_DENSE_LIMIT else "highs"
    if method == "simplex":
        z, lam, basis, iters = _dense_simplex(lp, warm_basis, max_iter)
    elif method == "highs":
        z, lam, rows, iters = _highs(lp, warm_basis)
        basis = None
        if with_basis:
            if rows is not None:
                basis = Basis(rows)
            else:
                feas_tol, _ = _tolerances(lp.d, lp.p)
                basis = extract_basis(lp, z, lam, tol=max(feas_tol, 1e-7))
            z = basic_solution(lp, basis)
            lam = _basis_multipliers(lp, basis)
    else:
        raise ValueError(f"unknown method {method!r}")
    return PrimalDualSolution(z=z, lam=lam, basis=basis, objective=float(lp.p @ z),
                              iterations=iters)


def extract_basis(lp: CompactLp, z: np.ndarray, lam: np.ndarray, tol: float = 1e-8) -> Basis:
    """Choose ``nN`` independent active rows at ``z`` containing ``support(lam)``.

    Rows with positive multipliers come first, then the remaining active rows
    by increasing index; a row is kept if it is independent of those already
    taken.
    """
    resid = lp.residual(z)
    nN = lp.n * lp.N
    active = np.flatnonzero(np.abs(resid) <= tol)
    support = np.flatnonzero(np.asarray(lam) > tol)
    if not np.all(np.isin(support, active)):
        bad = support[~np.isin(support, active)]
        raise DegenerateSelectionFailure(f"rows {bad.tolist()} have positive multipliers but are inactive")
    rest = np.setdiff1d(active, support)
    order = np.concatenate([support, rest])
    rows = basis_matrix(lp, Basis(order))
    # rows of basis_matrix come back sorted; map the desired order onto them
    rows = rows[np.searchsorted(np.sort(order), order)]
    is_support = np.zeros(order.size, dtype=bool)
    is_support[:support.size] = True
    Q = np.zeros((nN, nN))
    chosen: list[int] = []
    chunk = 256
    for start in range(0, order.size, chunk):
        k0 = len(chosen)
        block = rows[start:start + chunk]
        norms = np.linalg.norm(block, axis=1)
        # project the whole chunk off the rows chosen so far (twice, for stability)
        R = block - (block @ Q[:k0].T) @ Q[:k0]
        R -= (R @ Q[:k0].T) @ Q[:k0]
        for t in range(R.shape[0]):
            if norms[t] == 0.0:
                continue
            k = len(chosen)
            r = R[t] - Q[k0:k].T @ (Q[k0:k] @ R[t])
            r -= Q[k0:k].T @ (Q[k0:k] @ r)
            rn = np.linalg.norm(r)
            if rn > 1e-9 * norms[t]:
                Q[k] = r / rn
                chosen.append(int(order[start + t]))
            elif is_support[start + t]:
                raise DegenerateSelectionFailure(
                    f"row {order[start + t]} with positive multiplier is dependent on the others")
            if len(chosen) == nN:
                break
        if len(chosen) == nN:
            break
    if len(chosen) < nN:
        raise DegenerateSelectionFailure(
            f"only {len(chosen)} independent active rows, need {nN}; tol may be too tight"
        )
    basis = Basis(chosen)
    _check_conditioning(basis_matrix(lp, basis))
    return basis


# -- brute force oracle ------------------------------------------------------

def enumerate_bases(lp: CompactLp, chunk: int = 4096):
    """Yield ``(basis_rows, z)`` for every nonsingular ``nN``-row subset."""
    mN, nN = lp.shape
    if mN > BRUTE_FORCE_CAP:
        raise TooLarge(f"mN={mN} exceeds the enumeration cap {BRUTE_FORCE_CAP}")
    G, d = lp.dense_G(), lp.d
    combos = itertools.combinations(range(mN), nN)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=int)
        if block.size == 0:
            return
        mats = G[block]
        s = np.linalg.svd(mats, compute_uv=False)
        ok = s[:, -1] > BASIS_RCOND * s[:, 0]
        if not ok.any():
            continue
        zs = np.linalg.solve(mats[ok], d[block[ok]][..., None])[..., 0]
        for rows, z in zip(block[ok], zs):
            yield rows, z


def brute_force_solve(lp: CompactLp) -> PrimalDualSolution:
    """Best feasible basic solution by exhaustive enumeration (``mN <= 24``).

    Among optimal bases, one with nonnegative multipliers is preferred so that
    a dual certificate can be returned.
    """
    feas_tol, opt_tol = _tolerances(lp.d, lp.p)
    G, p = lp.dense_G(), lp.p
    best_val = np.inf
    cands = []
    for rows, z in enumerate_bases(lp):
        if np.min(G @ z - lp.d) < -feas_tol:
            continue
        val = float(p @ z)
        if val < best_val - 1e-9 * (1.0 + abs(val)):
            best_val = val
            cands = [(rows, z)]
        elif val <= best_val + 1e-9 * (1.0 + abs(best_val)):
            cands.append((rows, z))
    if not cands:
        raise Infeasible("no feasible basic solution")
    chosen = None
    for rows, z in cands:
        mult = linalg.solve(G[rows].T, p)
        if np.min(mult) >= -opt_tol:
            chosen = (rows, z, mult)
            break
    if chosen is None:
        rows, z = cands[0]
        chosen = (rows, z, linalg.solve(G[rows].T, p))
    rows, z, mult = chosen
    lam = np.zeros(lp.shape[0])
    lam[rows] = np.maximum(mult, 0.0)
    return PrimalDualSolution(z=z, lam=lam, basis=Basis(rows), objective=float(p @ z))


def kkt_residuals(lp: CompactLp, sol: PrimalDualSolution) -> dict[str, float]:
    """Primal/dual feasibility, complementarity and stationarity residuals."""
    resid = lp.residual(sol.z)
    out = {
        "primal": float(max(0.0, -np.min(resid, initial=0.0))),
        "dual": float(max(0.0, -np.min(sol.lam, initial=0.0))),
        "complementarity": float(abs(sol.lam @ resid)),
        "stationarity": float(np.max(np.abs(lp.p - lp.rmatvec(sol.lam)), initial=0.0)),
    }
    if sol.basis is not None:
        out["basis"] = float(np.max(np.abs(lp.residual(sol.z)[sol.basis.rows]), initial=0.0))
    return out
