"""Synthetic central HVAC plant benchmark.

Two storage states and fourteen controls:

==========  ===========================================
x[1]        CW storage energy [kWh]
x[2]        HW storage energy [kWh]
u[1]        chiller subplant load [kW cooling]
u[2]        heat recovery chiller load [kW cooling]
u[3]        HW generator load [kW heat]
u[4]        cooling tower load [kW heat rejected]
u[5]        CW storage charge (+) / discharge (-) [kW]
u[6]        HW storage charge (+) / discharge (-) [kW]
u[7]        dump heat exchanger [kW]
u[8]        electricity demand [kW]
u[9]        water demand [gal/h]
u[10]       natural gas demand [kW]
u[11..14]   unmet CW (+/-) and HW (+/-) load slacks [kW]
==========  ===========================================

Algebraic rows (``E x + F u = w``): electricity, water, gas and condenser
water balances, then the CW and HW load balances.  The plant efficiencies
are fixed synthetic values (see :data:`PLANT`); only relative comparisons
between controllers are meaningful.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .closed_loop import Scenario
from .model import MpcProblem, StageSpec

NX, NU, NW = 2, 14, 6

PLANT = {
    "cop_chiller": 5.0,
    "cop_hrc": 3.5,
    "eta_boiler": 0.9,
    "tower_fan_kw_per_kw": 0.02,
    "tower_water_gal_per_kwh": 0.3,
    "chiller_cap": 7000.0,
    "hrc_cap": 1500.0,
    "boiler_cap": 5000.0,
    "tower_cap": 12000.0,
    "dump_cap": 2000.0,
    "cw_storage_cap": 10000.0,
    "hw_storage_cap": 5000.0,
    "cw_rate": 3000.0,
    "hw_rate": 1500.0,
}

PROFILE_COLUMNS = ("t", "price_elec", "load_elec", "load_cw", "load_hw")


@dataclass(frozen=True)
class ProfileSet:
    """Time series for the four time-varying channels, one row per step."""

    t: np.ndarray
    price_elec: np.ndarray
    load_elec: np.ndarray
    load_cw: np.ndarray
    load_hw: np.ndarray

    def __post_init__(self):
        lengths = {len(np.atleast_1d(getattr(self, c))) for c in PROFILE_COLUMNS}
        if len(lengths) != 1:
            raise ValueError(f"profile columns have different lengths {sorted(lengths)}")
        for c in PROFILE_COLUMNS:
            object.__setattr__(self, c, np.asarray(getattr(self, c), dtype=float).reshape(-1))
        for c in ("load_elec", "load_cw", "load_hw"):
            if np.any(getattr(self, c) < 0):
                raise ValueError(f"{c} has negative entries")

    def __len__(self) -> int:
        return self.t.size


@dataclass(frozen=True)
class HvacConfig:
    dt_min: float = 5.0
    N: int = 288
    N_sim: int = 288
    seed: int = 0
    price_mean: float = 0.10
    price_amp: float = 0.05
    price_noise: float = 0.01
    load_elec_mean: float = 8000.0
    load_elec_amp: float = 3000.0
    load_cw_mean: float = 4500.0
    load_cw_amp: float = 2500.0
    load_hw_mean: float = 2000.0
    load_hw_amp: float = 800.0
    load_noise: float = 0.05
    penalty: float = 45.0
    water_price: float = 0.009
    gas_price: float = 0.018
    holding_cost: float = 1e-5
    x0: tuple[float, float] = (5000.0, 2500.0)
    plant: dict = field(default_factory=lambda: dict(PLANT))

    def __post_init__(self):
        if self.dt_min <= 0:
            raise ValueError("dt_min must be positive")
        if self.N < 1 or self.N_sim < 0:
            raise ValueError("need N >= 1 and N_sim >= 0")
        amps = (self.price_amp, self.load_elec_amp, self.load_cw_amp, self.load_hw_amp,
                self.price_noise, self.load_noise)
        if min(amps) < 0:
            raise ValueError("amplitudes and noise levels must be nonnegative")

    @property
    def dt_h(self) -> float:
        return self.dt_min / 60.0


def synthetic_profiles(cfg: HvacConfig, length: int | None = None) -> ProfileSet:
    """Daily sinusoids with AR(1) noise, seeded by ``cfg.seed``."""
    T = cfg.N_sim + cfg.N if length is None else length
    rng = np.random.default_rng(cfg.seed)
    hours = np.arange(T) * cfg.dt_h
    phase = rng.uniform(0.0, 24.0)
    hod = hours + phase

    def ar1(scale):
        e = rng.normal(0.0, scale, T)
        out = np.empty(T)
        acc = 0.0
        for k in range(T):
            acc = 0.95 * acc + np.sqrt(1 - 0.95 ** 2) * e[k]
            out[k] = acc
        return out

    daily = np.sin(2 * np.pi * (hod - 9.0) / 24.0)
    price = cfg.price_mean + cfg.price_amp * daily + ar1(cfg.price_noise)
    elec = cfg.load_elec_mean + cfg.load_elec_amp * daily
    cw = cfg.load_cw_mean + cfg.load_cw_amp * np.sin(2 * np.pi * (hod - 10.0) / 24.0)
    hw = cfg.load_hw_mean + cfg.load_hw_amp * np.cos(2 * np.pi * (hod - 6.0) / 24.0)
    elec = elec * (1.0 + ar1(cfg.load_noise))
    cw = cw * (1.0 + ar1(cfg.load_noise))
    hw = hw * (1.0 + ar1(cfg.load_noise))
    return ProfileSet(
        t=np.arange(T, dtype=float),
        price_elec=np.maximum(price, 0.005),
        load_elec=np.maximum(elec, 0.0),
        load_cw=np.maximum(cw, 0.0),
        load_hw=np.maximum(hw, 0.0),
    )


def plant_stage(cfg: HvacConfig, load_max: float, elec_max: float) -> StageSpec:
    """Time-invariant part of a stage (matrices and bounds; zero data)."""
    pl = cfg.plant
    A = np.eye(NX)
    B = np.zeros((NX, NU))
    B[0, 4] = cfg.dt_h
    B[1, 5] = cfg.dt_h
    E = np.zeros((NW, NX))
    F = np.zeros((NW, NU))
    # electricity: purchased = campus load + chillers + tower fans
    F[0, 7] = 1.0
    F[0, 0] = -1.0 / pl["cop_chiller"]
    F[0, 1] = -1.0 / pl["cop_hrc"]
    F[0, 3] = -pl["tower_fan_kw_per_kw"]
    # water: tower evaporation
    F[1, 8] = 1.0
    F[1, 3] = -pl["tower_water_gal_per_kwh"]
    # gas: HW generator fuel
    F[2, 9] = 1.0
    F[2, 2] = -1.0 / pl["eta_boiler"]
    # condenser water: towers reject chiller heat plus dumped heat
    F[3, 3] = 1.0
    F[3, 0] = -(1.0 + 1.0 / pl["cop_chiller"])
    F[3, 6] = -1.0
    # CW load: chillers cover load and storage charging
    F[4, [0, 1, 4, 10, 11]] = [1.0, 1.0, -1.0, 1.0, -1.0]
    # HW load: generator and recovered heat cover load, charging and dumping
    F[5, [2, 1, 5, 6, 12, 13]] = [1.0, 1.0 + 1.0 / pl["cop_hrc"], -1.0, -1.0, 1.0, -1.0]

    slack_hi = 10.0 * max(load_max, 1.0)
    tower_hi = pl["tower_cap"]
    u_hi = np.array([
        pl["chiller_cap"], pl["hrc_cap"], pl["boiler_cap"], tower_hi,
        pl["cw_rate"], pl["hw_rate"], pl["dump_cap"],
        10.0 * max(elec_max, 1.0) + pl["chiller_cap"] + pl["hrc_cap"] + tower_hi,
        pl["tower_water_gal_per_kwh"] * tower_hi,
        pl["boiler_cap"] / pl["eta_boiler"],
        slack_hi, slack_hi, slack_hi, slack_hi,
    ])
    u_lo = np.zeros(NU)
    u_lo[4], u_lo[5] = -pl["cw_rate"], -pl["hw_rate"]
    return StageSpec(
        A=A, B=B, E=E, F=F,
        q=np.zeros(NX), r=np.zeros(NU), v=np.zeros(NX), w=np.zeros(NW),
        x_lo=np.zeros(NX), x_hi=np.array([pl["cw_storage_cap"], pl["hw_storage_cap"]]),
        u_lo=u_lo, u_hi=u_hi,
    )


def storage_actuator(base: StageSpec):
    """Plant-side tank limits.

    A storage flow that would over- or under-fill a tank is curtailed; the
    chilled/hot water that can no longer go to (or come from) the tank is
    booked on the matching load slack, so the load balances still hold.
    """
    dt = base.B[0, 4]
    cap = base.x_hi
    lo = base.x_lo
    # (storage control, slack absorbing reduced charge, slack absorbing reduced discharge)
    routes = ((4, 11, 10), (5, 13, 12))

    def apply(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        u = np.array(u, dtype=float)
        for j, (k, surplus, deficit) in enumerate(routes):
            nxt = x[j] + dt * u[k]
            if nxt > cap[j]:
                delta = (nxt - cap[j]) / dt
                u[k] -= delta
                u[surplus] += delta
            elif nxt < lo[j]:
                delta = (lo[j] - nxt) / dt
                u[k] += delta
                u[deficit] += delta
        return u

    return apply


def scenario_from_profiles(cfg: HvacConfig, prof: ProfileSet, name: str = "") -> Scenario:
    T = len(prof)
    base = plant_stage(cfg, load_max=float(max(prof.load_cw.max(), prof.load_hw.max())),
                       elec_max=float(prof.load_elec.max()))
    dt = cfg.dt_h
    r = np.zeros((T, NU))
    r[:, 7] = prof.price_elec * dt
    r[:, 8] = cfg.water_price * dt
    r[:, 9] = cfg.gas_price * dt
    r[:, 10:14] = cfg.penalty * dt
    q = np.full((T, NX), cfg.holding_cost * dt)
    w = np.zeros((T, NW))
    w[:, 0] = prof.load_elec
    w[:, 4] = prof.load_cw
    w[:, 5] = prof.load_hw
    return Scenario(base=base, q=q, r=r, v=np.zeros((T, NX)), w=w,
                    x0=np.asarray(cfg.x0, dtype=float), name=name or f"hvac-seed{cfg.seed}",
                    actuator=storage_actuator(base))


def generate_instance(cfg: HvacConfig, profiles: ProfileSet | None = None) -> tuple[MpcProblem, Scenario]:
    """Open-loop problem over the first ``N`` steps plus the full scenario."""
    prof = synthetic_profiles(cfg) if profiles is None else profiles
    if len(prof) < cfg.N:
        raise ValueError(f"profiles have {len(prof)} rows, need at least N={cfg.N}")
    scen = scenario_from_profiles(cfg, prof)
    return scen.problem(0, cfg.N), scen


# channels perturbed in the sensitivity study: electrical, CW and HW loads
LOAD_CHANNELS = {"load_elec": 0, "load_cw": 4, "load_hw": 5}


def write_profiles(prof: ProfileSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(PROFILE_COLUMNS)
        for row in zip(*(getattr(prof, c) for c in PROFILE_COLUMNS)):
            wr.writerow([repr(float(x)) for x in row])


def load_profiles(path: str | Path) -> ProfileSet:
    """Read a profile CSV with header ``t,price_elec,load_elec,load_cw,load_hw``."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = [h.strip() for h in next(rd)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        missing = [c for c in PROFILE_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in PROFILE_COLUMNS]
        cols = [[] for _ in PROFILE_COLUMNS]
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            try:
                vals = [float(row[i]) for i in idx]
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: cannot parse row {row!r}") from None
            for c, v in zip(cols, vals):
                c.append(v)
            for name, v in zip(PROFILE_COLUMNS, vals):
                if name.startswith("load_") and v < 0:
                    raise ValueError(f"{path}:{lineno}: negative {name} {v}")
    return ProfileSet(*(np.array(c) for c in cols))
