"""Sensitivity of LP solutions to stage-wise data perturbations.

Per-basis conditioning constants, the stage-wise decay bound on basic
solutions, the banded structure of ``(G_B G_B')^k`` and Monte-Carlo
perturbation studies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .lp import (BASIS_RCOND, Basis, Infeasible, SingularBasis, _tolerances, basic_solution,
                 basis_matrix, enumerate_bases, solve)
from .model import CompactLp


@dataclass(frozen=True)
class BasisConditioning:
    sigma_min: float
    sigma_max: float
    gamma: float
    rho: float

    @classmethod
    def from_singular_values(cls, sigma_min: float, sigma_max: float) -> "BasisConditioning":
        if not 0.0 < sigma_min <= sigma_max:
            raise ValueError(f"need 0 < sigma_min <= sigma_max, got {sigma_min}, {sigma_max}")
        s2, S2 = sigma_min ** 2, sigma_max ** 2
        return cls(sigma_min, sigma_max, sigma_max / s2, (S2 - s2) / (S2 + s2))


def basis_conditioning(lp: CompactLp, basis: Basis) -> BasisConditioning:
    GB = basis_matrix(lp, basis)
    if GB.shape[0] != GB.shape[1]:
        raise SingularBasis(f"basis has {GB.shape[0]} rows for {GB.shape[1]} unknowns")
    s = linalg.svdvals(GB)
    if s[-1] <= BASIS_RCOND * s[0]:
        raise SingularBasis(f"G[B,:] is singular (sigma_min={s[-1]:.3e})")
    return BasisConditioning.from_singular_values(float(s[-1]), float(s[0]))


def decay_coefficients(N: int, gamma: float, rho: float) -> np.ndarray:
    """``c[i, j] = gamma * rho ** max(|i - j| - 1, 0)``."""
    idx = np.arange(N)
    return gamma * rho ** np.maximum(np.abs(idx[:, None] - idx[None, :]) - 1, 0)


@dataclass(frozen=True)
class SensitivityBound:
    coefficients: np.ndarray     # (N, N)
    perturbation: np.ndarray     # (N,) stage norms ||d_j - d'_j||

    @property
    def rhs(self) -> np.ndarray:
        return self.coefficients @ self.perturbation


def stage_norms(vec: np.ndarray, N: int) -> np.ndarray:
    return np.linalg.norm(np.asarray(vec, dtype=float).reshape(N, -1), axis=1)


@dataclass(frozen=True)
class BoundReport:
    lhs: np.ndarray
    rhs: np.ndarray
    tol: float

    @property
    def ok(self) -> np.ndarray:
        return self.lhs <= self.rhs + self.tol

    @property
    def holds(self) -> bool:
        return bool(np.all(self.ok))


def basis_sensitivity_check(lp: CompactLp, basis: Basis, d: np.ndarray, d_prime: np.ndarray,
                            tol: float = 1e-9) -> BoundReport:
    """Compare stage deviations of the basic solution for two data vectors
    with the decay bound built from the basis' own conditioning."""
    cond = basis_conditioning(lp, basis)
    z = basic_solution(lp, basis, d)
    z2 = basic_solution(lp, basis, d_prime)
    bound = SensitivityBound(decay_coefficients(lp.N, cond.gamma, cond.rho),
                             stage_norms(np.asarray(d) - np.asarray(d_prime), lp.N))
    return BoundReport(lhs=stage_norms(z - z2, lp.N), rhs=bound.rhs, tol=tol)


def _row_groups(lp: CompactLp, basis: Basis) -> list[np.ndarray]:
    stage = basis.rows // lp.m
    return [np.flatnonzero(stage == i) for i in range(lp.N)]


def banded_power_violation(lp: CompactLp, basis: Basis, k_max: int) -> float:
    """Largest entry of a block ``(i, j)`` of ``H^k`` with ``|i - j| > k``,
    over ``k = 1..k_max``, where ``H = G_B G_B'`` is blocked by stage."""
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    GB = basis_matrix(lp, basis)
    H = GB @ GB.T
    groups = _row_groups(lp, basis)
    worst = 0.0
    Hk = np.eye(H.shape[0])
    for k in range(1, k_max + 1):
        Hk = Hk @ H
        for i, gi in enumerate(groups):
            for j, gj in enumerate(groups):
                if abs(i - j) > k and gi.size and gj.size:
                    worst = max(worst, float(np.max(np.abs(Hk[np.ix_(gi, gj)]))))
    return worst


def banded_power_check(lp: CompactLp, basis: Basis, k_max: int, tol: float = 1e-12) -> bool:
    return banded_power_violation(lp, basis, k_max) <= tol


@dataclass(frozen=True)
class GlobalConditioning:
    sigma_lo: float
    sigma_hi: float
    bases: frozenset = field(default_factory=frozenset)

    @property
    def gamma(self) -> float:
        return self.sigma_hi / self.sigma_lo ** 2

    @property
    def rho(self) -> float:
        s2, S2 = self.sigma_lo ** 2, self.sigma_hi ** 2
        return (S2 - s2) / (S2 + s2)


def optimal_bases(lp: CompactLp) -> list[tuple[int, ...]]:
    """Every basis whose basic solution is feasible and optimal (enumeration)."""
    feas_tol, _ = _tolerances(lp.d, lp.p)
    G = lp.dense_G()
    found = []
    best = np.inf
    for rows, z in enumerate_bases(lp):
        if np.min(G @ z - lp.d) < -feas_tol:
            continue
        val = float(lp.p @ z)
        found.append((tuple(int(r) for r in rows), val))
        best = min(best, val)
    if not found:
        raise Infeasible("no feasible basic solution")
    cut = best + 1e-9 * (1.0 + abs(best))
    return [rows for rows, val in found if val <= cut]


def global_conditioning_bruteforce(lp: CompactLp, data_samples: Sequence[np.ndarray]) -> GlobalConditioning:
    """Extreme singular values over all bases optimal for at least one sample."""
    bases = set()
    for d in data_samples:
        bases.update(optimal_bases(lp.with_data(d=np.asarray(d, dtype=float))))
    if not bases:
        raise ValueError("no data samples given")
    lo, hi = np.inf, 0.0
    for rows in bases:
        c = basis_conditioning(lp, Basis(np.array(rows)))
        lo, hi = min(lo, c.sigma_min), max(hi, c.sigma_max)
    return GlobalConditioning(float(lo), float(hi), frozenset(bases))


# -- Monte-Carlo perturbation experiments -------------------------------------

@dataclass(frozen=True)
class Channel:
    """A data channel: local row offsets (within one stage) of an equality
    pair, perturbed together so the equality stays an equality."""

    name: str
    plus_row: int
    minus_row: int | None
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"channel {self.name}: sigma must be nonnegative")


def w_channel(name: str, nx: int, nw: int, k: int, sigma: float) -> Channel:
    """Channel for the algebraic right-hand side ``w[k]`` (0-based ``k``)."""
    if not 0 <= k < nw:
        raise ValueError(f"w index {k} out of range for nw={nw}")
    return Channel(name, 2 * nx + k, 2 * nx + nw + k, sigma)


@dataclass(frozen=True)
class PerturbationExperimentSpec:
    window: tuple[int, int]          # 1-based inclusive stage range
    channels: tuple[Channel, ...]
    samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.window
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid window {self.window}")
        if self.samples < 1:
            raise ValueError("samples must be positive")
        object.__setattr__(self, "channels", tuple(self.channels))


def perturb_data(lp: CompactLp, spec: PerturbationExperimentSpec, sample: int) -> np.ndarray:
    """Data vector of one sample; its random stream depends only on (seed, sample)."""
    lo, hi = spec.window
    if hi > lp.N:
        raise ValueError(f"window {spec.window} exceeds N={lp.N}")
    rng = np.random.default_rng([spec.seed, sample])
    d = lp.d.reshape(lp.N, lp.m).copy()
    stages = slice(lo - 1, hi)
    for ch in spec.channels:
        delta = ch.sigma * rng.standard_normal(hi - lo + 1)
        d[stages, ch.plus_row] += delta
        if ch.minus_row is not None:
            d[stages, ch.minus_row] -= delta
    return d.reshape(-1)


@dataclass(frozen=True)
class PerturbationResult:
    spec: PerturbationExperimentSpec
    reference: np.ndarray            # (nN,)
    samples: np.ndarray              # (kept, nN)
    sample_ids: np.ndarray           # (kept,)
    discarded: int
    N: int

    def stage_deviation(self, stage: int) -> np.ndarray:
        """``||z_i(sample) - z_i(ref)||`` per kept sample, 0-based ``stage``."""
        n = self.reference.size // self.N
        sl = slice(stage * n, (stage + 1) * n)
        return np.linalg.norm(self.samples[:, sl] - self.reference[sl], axis=1)

    def dispersion(self) -> np.ndarray:
        """Mean stage deviation for every stage."""
        return np.array([self.stage_deviation(i).mean() if len(self.samples) else 0.0
                         for i in range(self.N)])

    def to_csv(self, path: str | Path, stages: Sequence[int] = (0,), append: bool = False) -> None:
        n = self.reference.size // self.N
        window = f"{self.spec.window[0]}-{self.spec.window[1]}"
        with open(path, "a" if append else "w", newline="") as fh:
            wr = csv.writer(fh)
            if not append:
                wr.writerow(["sample_id", "window", "stage", "component", "value"])
            for sid, z in zip(self.sample_ids, self.samples):
                for i in stages:
                    for c in range(n):
                        wr.writerow([int(sid), window, i + 1, c + 1, f"{z[i * n + c]:.12g}"])


def perturbation_experiment(lp: CompactLp, spec: PerturbationExperimentSpec,
                            method: str = "auto") -> PerturbationResult:
    """Solve ``P(d + delta)`` for every sample; infeasible samples are counted
    and dropped."""
    ref_sol = solve(lp, method=method)
    ref = ref_sol.z
    kept, ids, discarded = [], [], 0
    for s in range(spec.samples):
        d = perturb_data(lp, spec, s)
        try:
            kept.append(solve(lp.with_data(d=d), method=method, with_basis=False,
                              warm_basis=ref_sol.basis).z)
            ids.append(s)
        except Infeasible:
            discarded += 1
    samples = np.array(kept) if kept else np.zeros((0, ref.size))
    return PerturbationResult(spec, ref, samples, np.array(ids, dtype=int), discarded, lp.N)


def window_decay(lp: CompactLp, windows: Sequence[tuple[int, int]], channels: Sequence[Channel],
                 samples: int, seed: int, stage: int = 0, method: str = "auto") -> np.ndarray:
    """Mean deviation of one stage's solution for perturbations confined to
    each window in turn."""
    out = []
    for win in windows:
        spec = PerturbationExperimentSpec(tuple(win), tuple(channels), samples, seed)
        res = perturbation_experiment(lp, spec, method=method)
        out.append(res.stage_deviation(stage).mean() if len(res.samples) else np.nan)
    return np.array(out)


def decay_slope(starts: Sequence[float], means: Sequence[float]) -> float:
    """Least-squares slope of ``log(mean)`` against window start."""
    means = np.asarray(means, dtype=float)
    if np.any(means <= 0):
        raise ValueError("log-slope needs positive means")
    return float(np.polyfit(np.asarray(starts, dtype=float), np.log(means), 1)[0])
