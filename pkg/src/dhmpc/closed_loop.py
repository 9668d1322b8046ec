"""Receding-horizon simulation with full or coarsened MPC."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .coarsening import CoarseGrid, Prior, coarsen, make_grid, project, solve_coarse
from .lp import Infeasible, SolverError, solve
from .model import CompactLp, MpcProblem, StageSpec, to_compact

SCHEMES = ("full", "equal", "fts", "diffusing")


class StepInfeasible(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"MPC problem infeasible at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


class StepSolverError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"solver failed at step {step}: {cause}")
        self.step = step


@dataclass(frozen=True, eq=False)
class Scenario:
    """Time-invariant plant plus per-step data series.

    ``q, r, v, w`` have one row per simulation step; row ``t`` of ``v`` is the
    additive disturbance entering the state at step ``t`` (row 0 is unused:
    the initial state is ``x0``).  ``actuator(x, u)``, if given, maps a
    planned first control to the one the plant can physically apply.
    """

    base: StageSpec
    q: np.ndarray
    r: np.ndarray
    v: np.ndarray
    w: np.ndarray
    x0: np.ndarray
    name: str = ""
    actuator: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    _templates: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        nx, nu, nw = self.base.dims
        T = np.asarray(self.q).shape[0]
        for key, width in (("q", nx), ("r", nu), ("v", nx), ("w", nw)):
            arr = np.asarray(getattr(self, key), dtype=float).reshape(T, width)
            object.__setattr__(self, key, arr)
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(nx))

    @property
    def length(self) -> int:
        return self.q.shape[0]

    def _window(self, t: int, N: int) -> slice:
        if t < 0 or N < 1 or t + N > self.length:
            raise ValueError(f"window [{t}, {t + N - 1}] outside scenario of length {self.length}")
        return slice(t, t + N)

    def problem(self, t: int, N: int, x: np.ndarray | None = None) -> MpcProblem:
        """MPC problem over steps ``t .. t+N-1`` starting from state ``x``."""
        win = self._window(t, N)
        x = self.x0 if x is None else np.asarray(x, dtype=float)
        v = self.v[win].copy()
        v[0] = x
        stages = tuple(
            self.base.replace(q=self.q[win][i], r=self.r[win][i], v=v[i], w=self.w[win][i])
            for i in range(N)
        )
        return MpcProblem(stages)

    def compact(self, t: int, N: int, x: np.ndarray | None = None) -> CompactLp:
        """Same LP as ``to_compact(self.problem(t, N, x))`` on a shared matrix."""
        win = self._window(t, N)
        if N not in self._templates:
            self._templates[N] = to_compact(self.problem(0, N))
        tmpl = self._templates[N]
        s = self.base
        x = self.x0 if x is None else np.asarray(x, dtype=float)
        v = self.v[win].copy()
        v[0] = x
        w = self.w[win]
        ones = np.ones((N, 1))
        d = np.hstack([v, -v, w, -w, ones * s.x_lo, -ones * s.x_hi, ones * s.u_lo, -ones * s.u_hi])
        p = np.hstack([self.q[win], self.r[win]])
        return tmpl.with_data(d=d.reshape(-1), p=p.reshape(-1))


def step_plant(x: np.ndarray, u: np.ndarray, stage: StageSpec, v_next: np.ndarray) -> np.ndarray:
    """``A x + B u + v_next``."""
    return stage.A @ np.asarray(x, dtype=float) + stage.B @ np.asarray(u, dtype=float) + np.asarray(v_next, dtype=float)


@dataclass(frozen=True)
class ControllerConfig:
    """Controller settings.

    ``prior="shifted"`` coarsens around the previous plan advanced one step
    (zero duals); when that coarse problem is infeasible the step is retried
    around the zero prior.  ``forecast_sigma`` adds multiplicative noise to
    the algebraic data the controller sees beyond stage 1.
    """

    scheme: str = "diffusing"
    N: int = 288
    K: int | None = 30
    guard: bool = True
    prior: str = "zero"
    forecast_sigma: float = 0.0
    forecast_seed: int = 0
    method: str = "auto"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.prior not in ("zero", "shifted"):
            raise ValueError("prior must be 'zero' or 'shifted'")
        if self.scheme != "full" and (self.K is None or self.K < 1):
            raise ValueError(f"scheme {self.scheme!r} needs K >= 1")
        if self.forecast_sigma < 0:
            raise ValueError("forecast_sigma must be nonnegative")

    @property
    def label(self) -> str:
        if self.scheme == "full":
            return "full"
        return f"{self.scheme}-K{self.K}" + ("-guard" if self.guard else "")

    def grid(self) -> CoarseGrid:
        return make_grid(self.scheme, self.N, self.K, self.guard)


@dataclass(frozen=True)
class ClosedLoopTrace:
    label: str
    x: np.ndarray           # (N_sim + 1, nx) realized states
    u: np.ndarray           # (N_sim, nu) implemented controls
    cost_step: np.ndarray   # (N_sim,)
    solve_s: np.ndarray     # (N_sim,) wall time of coarsen + solve + project
    objective: np.ndarray   # (N_sim,) full-resolution cost of each projected plan
    stage1_violation: np.ndarray  # (N_sim,) worst stage-1 row violation of the plan

    @property
    def N_sim(self) -> int:
        return self.u.shape[0]

    @property
    def cumulative_cost(self) -> float:
        return float(np.sum(self.cost_step))

    @property
    def mean_solve_s(self) -> float:
        return float(np.mean(self.solve_s)) if self.solve_s.size else 0.0

    def to_csv(self, path: str | Path) -> None:
        nx, nu = self.x.shape[1], self.u.shape[1]
        cum = np.cumsum(self.cost_step)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "cost_step", "cost_cum", "solve_ms"]
                        + [f"x{j + 1}" for j in range(nx)] + [f"u{j + 1}" for j in range(nu)])
            for t in range(self.N_sim):
                vals = [self.cost_step[t], cum[t], 1e3 * self.solve_s[t], *self.x[t], *self.u[t]]
                wr.writerow([t] + [f"{v:.12g}" for v in vals])


def _forecast(lp: CompactLp, nx: int, nw: int, cfg: ControllerConfig, t: int) -> CompactLp:
    """Controller's view of the window: algebraic data of stages 2..N scaled by
    ``1 + sigma * xi`` (both rows of each equality pair)."""
    if cfg.forecast_sigma == 0.0 or nw == 0 or lp.N < 2:
        return lp
    rng = np.random.default_rng([cfg.forecast_seed, t])
    d = lp.d.reshape(lp.N, lp.m).copy()
    factor = 1.0 + cfg.forecast_sigma * rng.standard_normal((lp.N - 1, nw))
    plus = slice(2 * nx, 2 * nx + nw)
    minus = slice(2 * nx + nw, 2 * nx + 2 * nw)
    d[1:, plus] *= factor
    d[1:, minus] *= factor
    return lp.with_data(d=d.reshape(-1))


def _plan(lp: CompactLp, cfg: ControllerConfig, grid: CoarseGrid | None, prior: Prior | None):
    if grid is None:
        sol = solve(lp, method=cfg.method, with_basis=False)
        return sol.z, sol.lam
    coarse = coarsen(lp, grid, prior)
    csol = solve_coarse(coarse, method=cfg.method)
    return project(csol, coarse.prior, coarse.ops)


def _shift_primal(z: np.ndarray, N: int, base: StageSpec, v_last: np.ndarray) -> np.ndarray:
    """Previous plan advanced one step; the new last stage repeats the last
    control and propagates the state, so the tail obeys the dynamics."""
    nx = base.dims[0]
    blocks = z.reshape(N, -1).copy()
    out = np.vstack([blocks[1:], blocks[-1:]])
    out[-1, :nx] = step_plant(blocks[-1, :nx], blocks[-1, nx:], base, v_last)
    return out.reshape(-1)


def run_closed_loop(scenario: Scenario, cfg: ControllerConfig, N_sim: int) -> ClosedLoopTrace:
    """Simulate ``N_sim`` steps of receding-horizon control."""
    if N_sim < 1:
        raise ValueError("N_sim must be at least 1")
    N = cfg.N
    if scenario.length < N_sim + N:
        raise ValueError(f"scenario has {scenario.length} steps, needs N_sim + N = {N_sim + N}")
    base = scenario.base
    nx, nu, nw = base.dims
    n = nx + nu
    grid = None if cfg.scheme == "full" else cfg.grid()
    xs = np.zeros((N_sim + 1, nx))
    us = np.zeros((N_sim, nu))
    cost = np.zeros(N_sim)
    times = np.zeros(N_sim)
    obj = np.zeros(N_sim)
    viol = np.zeros(N_sim)
    xs[0] = scenario.x0
    prev: np.ndarray | None = None
    for t in range(N_sim):
        lp = scenario.compact(t, N, xs[t])
        prior = None
        if grid is not None and cfg.prior == "shifted" and prev is not None:
            # duals are not carried over: a stale multiplier skews the coarse cost
            prior = Prior(_shift_primal(prev, N, base, scenario.v[t + N - 1]), np.zeros(lp.shape[0]))
        seen = _forecast(lp, nx, nw, cfg, t)
        start = time.perf_counter()
        try:
            try:
                z, _ = _plan(seen, cfg, grid, prior)
            except Infeasible:
                if prior is None:
                    raise
                # a shifted prior carries no feasibility guarantee; retry around zero
                z, _ = _plan(seen, cfg, grid, None)
        except Infeasible as exc:
            raise StepInfeasible(t, str(exc)) from exc
        except SolverError as exc:
            raise StepSolverError(t, exc) from exc
        times[t] = time.perf_counter() - start
        prev = z
        obj[t] = float(lp.p @ z)
        res1 = lp.residual(z)[:lp.m]
        viol[t] = max(0.0, float(-res1.min()))
        us[t] = z[nx:n] if scenario.actuator is None else scenario.actuator(xs[t], z[nx:n])
        cost[t] = float(scenario.q[t] @ xs[t] + scenario.r[t] @ us[t])
        xs[t + 1] = step_plant(xs[t], us[t], base, scenario.v[t + 1])
    return ClosedLoopTrace(label=cfg.label, x=xs, u=us, cost_step=cost, solve_s=times,
                           objective=obj, stage1_violation=viol)


@dataclass
class SchemeComparison:
    rows: list[dict]
    win_rate: float | None

    def row(self, scenario: str, label: str) -> dict:
        for r in self.rows:
            if r["scenario"] == scenario and r["config"] == label:
                return r
        raise KeyError((scenario, label))

    def mean_increase(self, label: str) -> float:
        vals = [r["increase_vs_full"] for r in self.rows
                if r["config"] == label and r["increase_vs_full"] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_solve_s(self, label: str) -> float:
        return float(np.mean([r["mean_solve_s"] for r in self.rows if r["config"] == label]))

    def summary(self) -> dict:
        labels = list(dict.fromkeys(r["config"] for r in self.rows))
        return {lab: {"mean_cost": float(np.mean([r["cost"] for r in self.rows if r["config"] == lab])),
                      "mean_increase_vs_full": self.mean_increase(lab),
                      "mean_solve_s": self.mean_solve_s(lab)} for lab in labels}

    def to_dict(self) -> dict:
        return {"rows": self.rows, "win_rate_diffusing": self.win_rate, "summary": self.summary()}

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def compare_schemes(scenarios: list[Scenario], cfgs: list[ControllerConfig], N_sim: int,
                    traces: dict | None = None) -> SchemeComparison:
    """Run every configuration on every scenario and tabulate cost and time.

    ``increase_vs_full`` is relative to the ``full`` configuration of the same
    scenario (``None`` without one).  The win rate is the fraction of
    scenarios where a diffusing configuration has the lowest cost among the
    coarse configurations.  Pass a dict as ``traces`` to collect the traces.
    """
    if not scenarios:
        raise ValueError("need at least one scenario")
    rows = []
    wins, contests = 0, 0
    for scen in scenarios:
        results = []
        for cfg in cfgs:
            tr = run_closed_loop(scen, cfg, N_sim)
            results.append((cfg, tr))
            if traces is not None:
                traces[(scen.name, cfg.label)] = tr
        full = next((tr for cfg, tr in results if cfg.scheme == "full"), None)
        for cfg, tr in results:
            inc = None
            if full is not None:
                inc = (tr.cumulative_cost - full.cumulative_cost) / abs(full.cumulative_cost)
            rows.append({
                "scenario": scen.name, "config": cfg.label, "scheme": cfg.scheme,
                "cost": tr.cumulative_cost, "increase_vs_full": inc,
                "total_solve_s": float(tr.solve_s.sum()), "mean_solve_s": tr.mean_solve_s,
            })
        coarse = [(tr.cumulative_cost, cfg.scheme) for cfg, tr in results if cfg.scheme != "full"]
        if any(sch == "diffusing" for _, sch in coarse) and len({sch for _, sch in coarse}) > 1:
            contests += 1
            wins += min(coarse, key=lambda c: c[0])[1] == "diffusing"
    return SchemeComparison(rows=rows, win_rate=wins / contests if contests else None)
