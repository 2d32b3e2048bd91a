"""Idealized switched-linear converter simulator.

Replaces a SPICE engine with per-phase modified nodal analysis: switches are
resistors (r_on/r_off), storage elements use backward-Euler companion models,
and the two-phase system is advanced period by period until the boundary state
stops changing. The testbench is fixed: an ideal vin source between IN and
ground and r_load between OUT and ground.

Phase A occupies fraction `duty` of the period and is the delivery phase of
the p-type switch: FET-B conducts in phase A, FET-A in phase B (complementary
drive, no dead time). With this convention the canonical buck (FET-B high
side, FET-A low side) obeys vout = D*vin in continuous conduction.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .netlist import (
    GROUND,
    Kind,
    Netlist,
    check_duty,
    has_structural_errors,
    is_external,
)

PHASE_A = "A"
PHASE_B = "B"

FAIL_STRUCTURAL = "Structural"
FAIL_SINGULAR = "SingularSystem"
FAIL_NO_STEADY_STATE = "NoSteadyState"
FAIL_NON_FINITE = "NonFinite"
FAIL_DEGENERATE = "DegenerateOutput"

P_IN_FLOOR = 1e-6  # watts
VOUT_FLOOR = 1e-3  # volts
_NORM_FLOOR = 1e-9
_BLOWUP = 1e12


@dataclass(frozen=True)
class SimConfig:
    vin: float = 2.0
    f_sw: float = 200e3
    c_val: float = 10e-6
    l_val: float = 10e-6
    r_on: float = 0.05
    r_off: float = 10e6
    r_load: float = 10.0
    g_min: float = 1e-9
    dt: float = 1.0 / (200e3 * 1000)
    max_periods: int = 2000
    ss_tol: float = 1e-4

    def __post_init__(self):
        if self.vin <= 0 or self.f_sw <= 0:
            raise ValueError("vin and f_sw must be positive")
        if self.dt > 1.0 / (self.f_sw * 200) + 1e-18:
            raise ValueError("dt must resolve the period with >= 200 steps")
        if not (self.r_on < self.r_load < self.r_off):
            raise ValueError("need r_on < r_load < r_off")
        if not (0 < self.ss_tol < 1):
            raise ValueError("ss_tol in (0,1)")
        if self.max_periods < 1:
            raise ValueError("max_periods >= 1")

    def fingerprint(self) -> tuple:
        return dataclasses.astuple(self)


def load_sim_config(path: str) -> SimConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return sim_config_from_items(parse_kv(fh.read()))


def parse_kv(text: str) -> dict[str, str]:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    items: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line {raw!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def sim_config_from_items(items: dict[str, str]) -> SimConfig:
    fields = {f.name: f.type for f in dataclasses.fields(SimConfig)}
    kwargs = {}
    for key, value in items.items():
        if key not in fields:
            raise ValueError(f"unknown SimConfig key {key!r}")
        kwargs[key] = int(value) if key == "max_periods" else float(value)
    return SimConfig(**kwargs)


@dataclass(frozen=True)
class Design:
    netlist: Netlist
    duty: float

    def __post_init__(self):
        object.__setattr__(self, "duty", check_duty(self.duty))


@dataclass(frozen=True)
class SimResult:
    valid: bool
    vout: float
    efficiency: float
    periods_run: int
    failure: Optional[str] = None


@dataclass
class LinearSystem:
    """One phase's MNA system: a @ z_{k+1} = src + hist @ z_k.

    Unknowns z: node voltages (non-ground), then the vin branch current,
    then one branch current per inductor.
    """
    a: np.ndarray
    hist: np.ndarray
    src: np.ndarray
    unknowns: list[str]
    out_ix: int
    isrc_ix: int

    def step_maps(self) -> tuple[np.ndarray, np.ndarray]:
        """(T, u) with z_{k+1} = T @ z_k + u; raises LinAlgError if singular."""
        t = np.linalg.solve(self.a, self.hist)
        u = np.linalg.solve(self.a, self.src)
        return t, u


def _switch_resistance(kind: Kind, phase: str, cfg: SimConfig) -> float:
    on = (phase == PHASE_A) if kind is Kind.FET_B else (phase == PHASE_B)
    return cfg.r_on if on else cfg.r_off


def build_phase_system(n: Netlist, phase: str, cfg: SimConfig) -> LinearSystem:
    """Stamp the MNA matrices for one switch phase.

    Callers must have run structural_check; behavior on structurally broken
    netlists is unspecified (simulate() reports them as Structural failures).
    """
    node_order: dict[str, None] = {}
    node_order.setdefault("IN")
    node_order.setdefault("OUT")
    for e in n.entries:
        for t in e.nodes:
            if t != GROUND:
                node_order.setdefault(t)
    names = list(node_order)
    node_ix = {name: i for i, name in enumerate(names)}
    inductors = [e for e in n.entries if e.device.kind is Kind.INDUCTOR]
    nn = len(names)
    dim = nn + 1 + len(inductors)

    a = np.zeros((dim, dim))
    hist = np.zeros((dim, dim))
    src = np.zeros(dim)

    def stamp_conductance(p: str, q: str, g: float):
        pi = node_ix.get(p, -1) if p != GROUND else -1
        qi = node_ix.get(q, -1) if q != GROUND else -1
        if pi >= 0:
            a[pi, pi] += g
        if qi >= 0:
            a[qi, qi] += g
        if pi >= 0 and qi >= 0:
            a[pi, qi] -= g
            a[qi, pi] -= g

    for i in range(nn):
        a[i, i] += cfg.g_min
    stamp_conductance("OUT", GROUND, 1.0 / cfg.r_load)

    isrc_ix = nn
    a[node_ix["IN"], isrc_ix] += 1.0
    a[isrc_ix, node_ix["IN"]] += 1.0
    src[isrc_ix] = cfg.vin

    l_ix = nn + 1
    for e in n.entries:
        kind = e.device.kind
        p, q = e.nodes
        if kind.is_switch:
            stamp_conductance(p, q, 1.0 / _switch_resistance(kind, phase, cfg))
        elif kind is Kind.CAPACITOR:
            gc = cfg.c_val / cfg.dt
            stamp_conductance(p, q, gc)
            # companion current source +gc * v_C(t_k) into node p
            pi = node_ix.get(p, -1) if p != GROUND else -1
            qi = node_ix.get(q, -1) if q != GROUND else -1
            if pi >= 0:
                hist[pi, pi] += gc
                if qi >= 0:
                    hist[pi, qi] -= gc
            if qi >= 0:
                hist[qi, qi] += gc
                if pi >= 0:
                    hist[qi, pi] -= gc
        else:  # inductor: v_p - v_q - (L/dt)(i_{k+1} - i_k) = 0
            pi = node_ix.get(p, -1) if p != GROUND else -1
            qi = node_ix.get(q, -1) if q != GROUND else -1
            if pi >= 0:
                a[pi, l_ix] += 1.0
                a[l_ix, pi] += 1.0
            if qi >= 0:
                a[qi, l_ix] -= 1.0
                a[l_ix, qi] -= 1.0
            a[l_ix, l_ix] -= cfg.l_val / cfg.dt
            hist[l_ix, l_ix] = -cfg.l_val / cfg.dt
            l_ix += 1

    unknowns = [f"v:{name}" for name in names] + ["i:vin"] + [
        f"i:{e.device.name}" for e in inductors
    ]
    return LinearSystem(a, hist, src, unknowns, node_ix["OUT"], isrc_ix)


def steady_state_reached(prev_state: np.ndarray, cur_state: np.ndarray, tol: float) -> bool:
    prev = np.asarray(prev_state, dtype=float)
    cur = np.asarray(cur_state, dtype=float)
    if prev.shape != cur.shape:
        raise ValueError("state vectors differ in length")
    return float(np.linalg.norm(cur - prev)) <= tol * max(float(np.linalg.norm(cur)), _NORM_FLOOR)


def _augment(t: np.ndarray, u: np.ndarray) -> np.ndarray:
    m = t.shape[0]
    aug = np.zeros((m + 1, m + 1))
    aug[:m, :m] = t
    aug[:m, m] = u
    aug[m, m] = 1.0
    return aug


def simulate(design: Design, cfg: SimConfig = SimConfig()) -> SimResult:
    """Run the two-phase switched system to periodic steady state.

    Backward Euler with fixed dt makes each phase an affine map of the state,
    so whole periods are composed exactly (matrix powers of the augmented
    step map) and only the final period is re-run sample by sample for the
    waveform averages.
    """
    n = design.netlist
    if has_structural_errors(n):
        return SimResult(False, 0.0, 0.0, 0, FAIL_STRUCTURAL)

    steps = int(round(1.0 / (cfg.f_sw * cfg.dt)))
    k_a = int(round(design.duty * steps))
    k_a = min(max(k_a, 1), steps - 1)

    try:
        sys_a = build_phase_system(n, PHASE_A, cfg)
        sys_b = build_phase_system(n, PHASE_B, cfg)
        t_a, u_a = sys_a.step_maps()
        t_b, u_b = sys_b.step_maps()
    except np.linalg.LinAlgError:
        return SimResult(False, 0.0, 0.0, 0, FAIL_SINGULAR)

    period_map = np.linalg.matrix_power(_augment(t_b, u_b), steps - k_a) @ np.linalg.matrix_power(
        _augment(t_a, u_a), k_a
    )
    if not np.all(np.isfinite(period_map)):
        return SimResult(False, 0.0, 0.0, 0, FAIL_NON_FINITE)

    dim = t_a.shape[0]
    z = np.zeros(dim + 1)
    z[dim] = 1.0
    periods_run = 0
    steady = False
    for _ in range(cfg.max_periods):
        z_next = period_map @ z
        periods_run += 1
        if not np.all(np.isfinite(z_next)) or np.max(np.abs(z_next)) > _BLOWUP:
            return SimResult(False, 0.0, 0.0, periods_run, FAIL_NON_FINITE)
        if steady_state_reached(z[:dim], z_next[:dim], cfg.ss_tol):
            z = z_next
            steady = True
            break
        z = z_next
    if not steady:
        return SimResult(False, 0.0, 0.0, periods_run, FAIL_NO_STEADY_STATE)

    # one more period, sampled stepwise
    state = z[:dim].copy()
    vout_acc = 0.0
    vout_sq_acc = 0.0
    iin_acc = 0.0
    for t_m, u_m, k in ((t_a, u_a, k_a), (t_b, u_b, steps - k_a)):
        for _ in range(k):
            state = t_m @ state + u_m
            v = state[sys_a.out_ix]
            vout_acc += v
            vout_sq_acc += v * v
            iin_acc += state[sys_a.isrc_ix]
    if not np.isfinite(vout_acc) or not np.isfinite(iin_acc):
        return SimResult(False, 0.0, 0.0, periods_run, FAIL_NON_FINITE)

    vout = float(vout_acc / steps)
    p_out = float(vout_sq_acc / steps) / cfg.r_load
    p_in = cfg.vin * float(-iin_acc / steps)  # branch current flows into the source
    if p_in < P_IN_FLOOR or abs(vout) < VOUT_FLOOR:
        return SimResult(False, vout, 0.0, periods_run, FAIL_DEGENERATE)
    efficiency = min(max(p_out / p_in, 0.0), 1.0)
    return SimResult(True, vout, efficiency, periods_run)
