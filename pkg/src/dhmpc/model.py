"""Stage-wise linear MPC problems and their block-bidiagonal LP form.

An :class:`MpcProblem` is a list of :class:`StageSpec` objects, one per time
stage.  :func:`to_compact` turns it into a :class:`CompactLp`,

    min p'z  s.t.  G z >= d,

where ``z = (z_1, ..., z_N)`` with ``z_i = (x_i, u_i)`` and ``G`` only has
nonzero blocks on its diagonal and first sub-diagonal.  Equalities are kept as
pairs of opposite ``>=`` rows so that every row of ``G`` can take part in a
basis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse


def stage_dims(nx: int, nu: int, nw: int) -> tuple[int, int]:
    """Return ``(n, m)``: primal and constraint-row counts of one stage."""
    if nx < 1 or nu < 0 or nw < 0:
        raise ValueError(f"invalid stage dimensions nx={nx}, nu={nu}, nw={nw}")
    return nx + nu, 4 * nx + 2 * nu + 2 * nw


def _vec(a, size: int, name: str) -> np.ndarray:
    a = np.atleast_1d(np.asarray(a, dtype=float)).reshape(-1)
    if a.shape != (size,):
        raise ValueError(f"{name}: expected length {size}, got {a.shape[0]}")
    return a


def _mat(a, shape: tuple[int, int], name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.size == 0 and 0 in shape:
        return np.zeros(shape)
    a = a.reshape(shape) if a.size == shape[0] * shape[1] and a.ndim <= 1 else a
    if a.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class StageSpec:
    """Data of one MPC stage.

    ``A`` and ``B`` of stage ``i`` drive the transition into stage ``i + 1``;
    ``v`` of stage 1 is the initial state.
    """

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    F: np.ndarray
    q: np.ndarray
    r: np.ndarray
    v: np.ndarray
    w: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        r = np.atleast_1d(np.asarray(self.r, dtype=float))
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        nx, nu, nw = q.size, r.size, w.size
        set_ = object.__setattr__
        set_(self, "A", _mat(self.A, (nx, nx), "A"))
        set_(self, "B", _mat(self.B, (nx, nu), "B"))
        set_(self, "E", _mat(self.E, (nw, nx), "E"))
        set_(self, "F", _mat(self.F, (nw, nu), "F"))
        for name, size in (("q", nx), ("r", nu), ("v", nx), ("w", nw),
                           ("x_lo", nx), ("x_hi", nx), ("u_lo", nu), ("u_hi", nu)):
            set_(self, name, _vec(getattr(self, name), size, name))
        for lo, hi in (("x_lo", "x_hi"), ("u_lo", "u_hi")):
            a, b = getattr(self, lo), getattr(self, hi)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ValueError(f"{lo}/{hi}: bounds must be finite")
            if np.any(a > b):
                raise ValueError(f"{lo} > {hi} in some component")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.q.size, self.r.size, self.w.size

    def replace(self, **changes) -> "StageSpec":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return StageSpec(**kw)


@dataclass(frozen=True, eq=False)
class MpcProblem:
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("an MPC problem needs at least one stage")
        dims = stages[0].dims
        for i, s in enumerate(stages):
            if s.dims != dims:
                raise ValueError(f"stage {i + 1} has dims {s.dims}, expected {dims}")
        object.__setattr__(self, "stages", stages)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        nx, nu, nw = self.stages[0].dims
        return nx, nu, nw, len(self.stages)

    @property
    def N(self) -> int:
        return len(self.stages)

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a stacked ``z`` into ``(x, u)`` arrays of shape (N, nx), (N, nu)."""
        nx, nu, _, N = self.dims
        zz = np.asarray(z, dtype=float).reshape(N, nx + nu)
        return zz[:, :nx], zz[:, nx:]

    def objective(self, x: np.ndarray, u: np.ndarray) -> float:
        q = np.array([s.q for s in self.stages])
        r = np.array([s.r for s in self.stages])
        return float(np.sum(q * x) + np.sum(r * u))

    def constraint_violation(self, x: np.ndarray, u: np.ndarray) -> float:
        """Largest violation of the stage-wise constraints by a trajectory."""
        worst = 0.0
        prev = None
        for i, s in enumerate(self.stages):
            if i == 0:
                dyn = x[0] - s.v
            else:
                dyn = x[i] - prev.A @ x[i - 1] - prev.B @ u[i - 1] - s.v
            alg = s.E @ x[i] + s.F @ u[i] - s.w
            worst = max(
                worst,
                np.max(np.abs(dyn), initial=0.0),
                np.max(np.abs(alg), initial=0.0),
                np.max(s.x_lo - x[i], initial=0.0),
                np.max(x[i] - s.x_hi, initial=0.0),
                np.max(s.u_lo - u[i], initial=0.0),
                np.max(u[i] - s.u_hi, initial=0.0),
            )
            prev = s
        return float(worst)


@dataclass(frozen=True, eq=False)
class CompactLp:
    """``min p'z s.t. G z >= d`` with ``G`` block lower-bidiagonal.

    ``G_diag[i]`` is the block ``G_{i,i}`` and ``G_sub[i - 1]`` the block
    ``G_{i,i-1}`` (0-based stages, so ``G_sub`` has ``N - 1`` entries).
    """

    p: np.ndarray
    d: np.ndarray
    G_diag: np.ndarray
    G_sub: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        G_diag = np.asarray(self.G_diag, dtype=float)
        if G_diag.ndim != 3:
            raise ValueError("G_diag must have shape (N, m, n)")
        N, m, n = G_diag.shape
        G_sub = np.asarray(self.G_sub, dtype=float).reshape(max(N - 1, 0), m, n)
        set_ = object.__setattr__
        set_(self, "G_diag", G_diag)
        set_(self, "G_sub", G_sub)
        set_(self, "p", _vec(self.p, n * N, "p"))
        set_(self, "d", _vec(self.d, m * N, "d"))

    @property
    def N(self) -> int:
        return self.G_diag.shape[0]

    @property
    def m(self) -> int:
        return self.G_diag.shape[1]

    @property
    def n(self) -> int:
        return self.G_diag.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.m * self.N, self.n * self.N

    def with_data(self, d: np.ndarray | None = None, p: np.ndarray | None = None) -> "CompactLp":
        """Same constraint matrix, new right-hand side and/or cost."""
        return CompactLp(
            p=self.p if p is None else p,
            d=self.d if d is None else d,
            G_diag=self.G_diag,
            G_sub=self.G_sub,
            _cache=self._cache,
        )

    def matvec(self, z: np.ndarray) -> np.ndarray:
        """``G z`` using the block structure."""
        zz = np.asarray(z, dtype=float).reshape(self.N, self.n)
        out = np.einsum("imn,in->im", self.G_diag, zz)
        if self.N > 1:
            out[1:] += np.einsum("imn,in->im", self.G_sub, zz[:-1])
        return out.reshape(-1)

    def rmatvec(self, lam: np.ndarray) -> np.ndarray:
        """``G' lam`` using the block structure."""
        ll = np.asarray(lam, dtype=float).reshape(self.N, self.m)
        out = np.einsum("imn,im->in", self.G_diag, ll)
        if self.N > 1:
            out[:-1] += np.einsum("imn,im->in", self.G_sub, ll[1:])
        return out.reshape(-1)

    def residual(self, z: np.ndarray) -> np.ndarray:
        """``G z - d``; nonnegative everywhere iff ``z`` is feasible."""
        return self.matvec(z) - self.d

    def objective(self, z: np.ndarray) -> float:
        return float(self.p @ z)

    def sparse_G(self) -> sparse.csr_matrix:
        """``G`` as CSR; cached and shared by LPs made with :meth:`with_data`."""
        if "sparse" not in self._cache:
            N, m, n = self.G_diag.shape
            ii, kk, jj = np.nonzero(self.G_diag)
            rows = [ii * m + kk]
            cols = [ii * n + jj]
            vals = [self.G_diag[ii, kk, jj]]
            if N > 1:
                ii, kk, jj = np.nonzero(self.G_sub)
                rows.append((ii + 1) * m + kk)
                cols.append(ii * n + jj)
                vals.append(self.G_sub[ii, kk, jj])
            self._cache["sparse"] = sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(m * N, n * N))
        return self._cache["sparse"]

    def dense_G(self) -> np.ndarray:
        N, m, n = self.G_diag.shape
        G = np.zeros((m * N, n * N))
        for i in range(N):
            G[i * m:(i + 1) * m, i * n:(i + 1) * n] = self.G_diag[i]
            if i > 0:
                G[i * m:(i + 1) * m, (i - 1) * n:i * n] = self.G_sub[i - 1]
        return G

    def stage_rows(self, i: int) -> slice:
        return slice(i * self.m, (i + 1) * self.m)

    def stage_cols(self, i: int) -> slice:
        return slice(i * self.n, (i + 1) * self.n)


def to_compact(problem: MpcProblem) -> CompactLp:
    """Build the compact LP of an MPC problem (rows per stage in the order
    dynamics +, dynamics -, algebraic +, algebraic -, x_lo, -x_hi, u_lo, -u_hi)."""
    nx, nu, nw, N = problem.dims
    n, m = stage_dims(nx, nu, nw)
    Ix, Iu = np.eye(nx), np.eye(nu)
    G_diag = np.zeros((N, m, n))
    G_sub = np.zeros((max(N - 1, 0), m, n))
    p = np.zeros((N, n))
    d = np.zeros((N, m))
    r0, r1, r2, r3, r4, r5, r6, r7 = np.cumsum([0, nx, nx, nw, nw, nx, nx, nu])
    for i, s in enumerate(problem.stages):
        g = G_diag[i]
        g[r0:r1, :nx] = Ix
        g[r1:r2, :nx] = -Ix
        g[r2:r3, :nx], g[r2:r3, nx:] = s.E, s.F
        g[r3:r4, :nx], g[r3:r4, nx:] = -s.E, -s.F
        g[r4:r5, :nx] = Ix
        g[r5:r6, :nx] = -Ix
        g[r6:r7, nx:] = Iu
        g[r7:, nx:] = -Iu
        if i > 0:
            prev = problem.stages[i - 1]
            h = G_sub[i - 1]
            h[r0:r1, :nx], h[r0:r1, nx:] = -prev.A, -prev.B
            h[r1:r2, :nx], h[r1:r2, nx:] = prev.A, prev.B
        p[i] = np.concatenate([s.q, s.r])
        d[i] = np.concatenate([s.v, -s.v, s.w, -s.w, s.x_lo, -s.x_hi, s.u_lo, -s.u_hi])
    return CompactLp(p=p.reshape(-1), d=d.reshape(-1), G_diag=G_diag, G_sub=G_sub)


@dataclass(frozen=True)
class AdmissibleDataFlag:
    feasible: bool
    certificate: np.ndarray | None


def check_admissible(lp: CompactLp, tol: float = 1e-8) -> AdmissibleDataFlag:
    """Decide whether ``G z >= d`` has a solution (membership of ``d`` in the
    admissible data set).  Infeasibility is reported, not raised."""
    from .lp import Infeasible, solve

    if tol <= 0:
        raise ValueError("tol must be positive")
    try:
        sol = solve(lp.with_data(p=np.zeros_like(lp.p)), with_basis=False)
    except Infeasible:
        return AdmissibleDataFlag(False, None)
    scale = 1.0 + np.max(np.abs(lp.d), initial=0.0)
    if np.min(lp.residual(sol.z), initial=0.0) < -tol * scale:
        return AdmissibleDataFlag(False, None)
    return AdmissibleDataFlag(True, sol.z)


# -- instance files ---------------------------------------------------------

_TI_KEYS = ("A", "B", "E", "F", "q", "r", "x_lo", "x_hi", "u_lo", "u_hi")


def problem_from_dict(doc: dict) -> MpcProblem:
    """Parse the JSON instance layout ``{dims, time_invariant, series}``."""
    try:
        dims = doc["dims"]
        nx, nu, nw, N = (int(dims[k]) for k in ("nx", "nu", "nw", "N"))
        ti = doc["time_invariant"]
    except KeyError as exc:
        raise ValueError(f"instance is missing key {exc}") from None
    series = doc.get("series", {})
    base = {
        "A": _mat(ti["A"], (nx, nx), "A"),
        "B": _mat(ti["B"], (nx, nu), "B"),
        "E": _mat(ti.get("E", []), (nw, nx), "E"),
        "F": _mat(ti.get("F", []), (nw, nu), "F"),
        "q": _vec(ti.get("q", np.zeros(nx)), nx, "q"),
        "r": _vec(ti.get("r", np.zeros(nu)), nu, "r"),
        "x_lo": _vec(ti["x_lo"], nx, "x_lo"),
        "x_hi": _vec(ti["x_hi"], nx, "x_hi"),
        "u_lo": _vec(ti["u_lo"], nu, "u_lo"),
        "u_hi": _vec(ti["u_hi"], nu, "u_hi"),
    }
    sizes = {"v": nx, "w": nw, "q": nx, "r": nu}
    per_stage = {}
    for key, size in sizes.items():
        if key in series:
            rows = series[key]
            if len(rows) != N:
                raise ValueError(f"series.{key}: expected {N} entries, got {len(rows)}")
            per_stage[key] = [_vec(row, size, f"series.{key}[{i}]") for i, row in enumerate(rows)]
    stages = []
    for i in range(N):
        kw = dict(base)
        kw["v"] = per_stage["v"][i] if "v" in per_stage else np.zeros(nx)
        kw["w"] = per_stage["w"][i] if "w" in per_stage else np.zeros(nw)
        for key in ("q", "r"):
            if key in per_stage:
                kw[key] = per_stage[key][i]
        stages.append(StageSpec(**kw))
    return MpcProblem(tuple(stages))


def problem_to_dict(problem: MpcProblem) -> dict:
    """Inverse of :func:`problem_from_dict`; stage 1 supplies the
    time-invariant fields, per-stage ``v, w, q, r`` go to ``series``."""
    nx, nu, nw, N = problem.dims
    s0 = problem.stages[0]
    for i, s in enumerate(problem.stages):
        for key in _TI_KEYS:
            if key in ("q", "r"):
                continue
            if not np.array_equal(getattr(s, key), getattr(s0, key)):
                raise ValueError(f"stage {i + 1}: {key} differs; only q, r, v, w may vary")
    return {
        "dims": {"nx": nx, "nu": nu, "nw": nw, "N": N},
        "time_invariant": {k: getattr(s0, k).tolist() for k in _TI_KEYS},
        "series": {k: [getattr(s, k).tolist() for s in problem.stages] for k in ("v", "w", "q", "r")},
    }


def load_instance(path: str | Path) -> MpcProblem:
    with open(path) as fh:
        return problem_from_dict(json.load(fh))


def save_instance(problem: MpcProblem, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(problem_to_dict(problem), fh)


def random_problem(rng: np.random.Generator, N: int, nx: int = 1, nu: int = 1, nw: int = 0,
                   box: float = 1.0) -> MpcProblem:
    """Small random instance that is feasible by construction.

    A reference trajectory is drawn inside the box and the data ``v, w`` are
    chosen to make it satisfy the equalities exactly.
    """
    A = rng.uniform(-1.0, 1.0, (nx, nx))
    B = rng.uniform(-1.0, 1.0, (nx, nu))
    E = rng.uniform(-1.0, 1.0, (nw, nx))
    F = rng.uniform(-1.0, 1.0, (nw, nu))
    x_ref = rng.uniform(-0.5 * box, 0.5 * box, (N, nx))
    u_ref = rng.uniform(-0.5 * box, 0.5 * box, (N, nu))
    stages = []
    for i in range(N):
        v = x_ref[0] if i == 0 else x_ref[i] - A @ x_ref[i - 1] - B @ u_ref[i - 1]
        stages.append(StageSpec(
            A=A, B=B, E=E, F=F,
            q=rng.normal(size=nx), r=rng.normal(size=nu),
            v=v, w=E @ x_ref[i] + F @ u_ref[i],
            x_lo=-box * np.ones(nx), x_hi=box * np.ones(nx),
            u_lo=-box * np.ones(nu), u_hi=box * np.ones(nu),
        ))
    return MpcProblem(tuple(stages))

