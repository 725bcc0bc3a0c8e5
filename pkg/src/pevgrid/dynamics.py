"""Time-domain simulation core.

Differential states are the rotor angle and speed deviation of every
dynamic generator; bus voltages are algebraic unknowns re-solved at each
integration stage (structure preserving: load buses stay explicit, EV
groups inject there).  Faults and branch trips patch the admittance matrix
at exact event times; the fixed-step RK4 integrator never steps across a
discontinuity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernel as K
from .control import ASLEEP, ACTIVE, ControllerState, PevgConfig, washout_frequency
from .network import CaseValidationError, PowerSystemCase, build_ybus
from .powerflow import (DynamicInit, augmented_ybus, init_dynamics,
                        solve_power_flow)

NETWORK_TOL = 1e-9
NETWORK_MAX_ITER = 20

EVENT_ACTIONS = ("bus_fault_on", "fault_clear", "branch_trip", "branch_restore")


class ScenarioError(Exception):
    pass


class SimulationDiverged(Exception):
    """Raised by the single-step API when the network solve fails."""


@dataclass(frozen=True)
class Event:
    """Timed topology change.  ``bus`` is a file-level bus id, ``branch``
    an internal branch index."""
    time: float
    action: str
    bus: int | None = None
    branch: int | None = None

    @staticmethod
    def fault(time, bus):
        return Event(time, "bus_fault_on", bus=bus)

    @staticmethod
    def clear(time):
        return Event(time, "fault_clear")

    @staticmethod
    def trip(time, branch):
        return Event(time, "branch_trip", branch=branch)

    @staticmethod
    def restore(time, branch):
        return Event(time, "branch_restore", branch=branch)

    def to_dict(self):
        d = {"time": self.time, "action": self.action}
        if self.bus is not None:
            d["bus"] = self.bus
        if self.branch is not None:
            d["branch"] = self.branch
        return d


@dataclass(frozen=True)
class Scenario:
    """Simulation request: event list, horizon, step, EV-fleet gain."""
    events: tuple[Event, ...] = ()
    t_end: float = 10.0
    dt: float = 1e-3
    h_mw_per_hz: float = 0.0
    sample_dt: float = 0.01
    control: dict = field(default_factory=dict)   # PevgConfig threshold overrides

    def last_event_time(self) -> float:
        return max((e.time for e in self.events), default=0.0)

    def to_dict(self):
        return {
            "events": [e.to_dict() for e in self.events],
            "t_end": self.t_end,
            "dt": self.dt,
            "h_mw_per_hz": self.h_mw_per_hz,
            "sample_dt": self.sample_dt,
            "control": dict(self.control),
        }

    @staticmethod
    def from_dict(d: dict) -> "Scenario":
        events = tuple(Event(time=e["time"], action=e["action"],
                             bus=e.get("bus"), branch=e.get("branch"))
                       for e in d.get("events", ()))
        return Scenario(events=events,
                        t_end=float(d.get("t_end", 10.0)),
                        dt=float(d.get("dt", 1e-3)),
                        h_mw_per_hz=float(d.get("h_mw_per_hz", 0.0)),
                        sample_dt=float(d.get("sample_dt", 0.01)),
                        control=dict(d.get("control", {})))


@dataclass
class SystemState:
    """Dynamic snapshot: rotor states, bus voltages, group controllers."""
    t: float
    delta: np.ndarray          # (n_dyn,) rad
    omega: np.ndarray          # (n_dyn,) rad/s deviation
    v: np.ndarray              # (N,) voltage magnitude, pu
    theta: np.ndarray          # (N,) unwrapped voltage angle, rad
    pevg_p: np.ndarray         # (N,) group output, pu, consumption positive
    ctrl_on: np.ndarray        # (N,) uint8
    lpf_theta: np.ndarray      # (N,) washout low-pass state
    df_prev: np.ndarray        # (N,) last frequency estimate, Hz
    dfdt_f: np.ndarray         # (N,) filtered rate, Hz/s

    def copy(self) -> "SystemState":
        return SystemState(self.t, self.delta.copy(), self.omega.copy(),
                           self.v.copy(), self.theta.copy(), self.pevg_p.copy(),
                           self.ctrl_on.copy(), self.lpf_theta.copy(),
                           self.df_prev.copy(), self.dfdt_f.copy())

    def controllers(self) -> list[ControllerState]:
        out = []
        for i in range(len(self.v)):
            out.append(ControllerState(
                mode=ACTIVE if self.ctrl_on[i] else ASLEEP,
                filtered_df=float(self.df_prev[i]),
                filtered_dfdt=float(self.dfdt_f[i]),
                output_p=float(self.pevg_p[i])))
        return out


@dataclass
class Trace:
    """Sampled simulation output plus provenance metadata."""
    t: np.ndarray
    delta: np.ndarray          # (S, n_dyn)
    omega: np.ndarray
    v: np.ndarray              # (S, N)
    theta: np.ndarray          # unwrapped
    pevg_p: np.ndarray         # (S, N) pu
    metadata: dict

    @property
    def diverged(self) -> bool:
        mark = self.metadata.get("instability")
        return bool(mark and mark.get("reason") == "network_divergence")

    @property
    def instability(self):
        return self.metadata.get("instability")


# ---------------------------------------------------------------------------


class CaseRuntime:
    """Per-case working set: equilibrium, folded admittance blocks, machine
    and EV-group parameter arrays, LU factors for the current topology.

    Immutable after construction except for the topology bookkeeping used
    while a simulation applies events; concurrent runs must each own their
    runtime (cheap to build, or use ``fork()`` semantics of process pools).
    """

    def __init__(self, case: PowerSystemCase, config: PevgConfig | None = None,
                 pf=None):
        self.case = case
        self.config = (config or PevgConfig.for_case(case, 0.0)).validate()
        self.pf = pf if pf is not None else solve_power_flow(case)
        self.init: DynamicInit = init_dynamics(case, self.pf)

        n = case.n_buses
        gens = case.generators
        self.dyn_gens = [g for g in gens if not g.infinite]
        self.fix_gens = [g for g in gens if g.infinite]
        src = self.dyn_gens + self.fix_gens          # source ordering
        self.n = n
        self.n_dyn = len(self.dyn_gens)
        self.n_src = len(src)

        self.e_mag = np.array([self.init.e_mag[g.index] for g in src])
        self.delta_fix = np.array([self.init.delta0[g.index] for g in self.fix_gens])
        self.delta0 = np.array([self.init.delta0[g.index] for g in self.dyn_gens])
        self.m = np.array([g.m for g in self.dyn_gens])
        self.dcoef = np.array([g.d for g in self.dyn_gens])

        # Source coupling blocks (constant across topology events).
        self.y_gg = np.array([1.0 / (1j * g.xd_prime) for g in src])
        self.y_lg = np.zeros((n, self.n_src), dtype=complex)
        for s, g in enumerate(src):
            self.y_lg[g.bus, s] = -self.y_gg[s]
        self.y_gl = np.ascontiguousarray(self.y_lg.T)

        self.load_g0 = np.zeros(n)
        self.load_b0 = np.zeros(n)
        for la in self.init.load_admittances:
            self.load_g0[la.bus] = la.g0
            self.load_b0[la.bus] = la.b0

        # Per-bus group gains in pu per Hz.
        self.h_pu = np.asarray(self.config.h_i, dtype=float) / case.mva_base \
            if self.config.h_i is not None else np.zeros(n)
        self.ctrl_idx = np.nonzero(self.h_pu > 0)[0].astype(np.int64)

        self.v0c = self.pf.v * np.exp(1j * self.pf.theta)

        self._topology = (frozenset(), frozenset())
        self._yll_cache = {}
        self.y_ll, self.lu, self.piv = self._get_config(frozenset(), frozenset())

        # Mechanical power from the dynamic network's own solve so the
        # equilibrium is an exact fixed point of the discrete map.
        v = self.v0c.copy()
        p_e = np.zeros(self.n_src)
        ok, _, res = K.stage_solve(self.y_ll, self.lu, self.piv, self.y_lg,
                                   self.y_gl, self.y_gg, self.e_mag,
                                   self.delta0, self.delta_fix,
                                   np.zeros(n), self.config.lv_derate_v,
                                   v, p_e, NETWORK_TOL, NETWORK_MAX_ITER, 0)
        if not ok:
            raise CaseValidationError(
                f"initial network solve failed (residual {res:.2e})")
        self.p_m = p_e[:self.n_dyn].copy()
        self.v_eq = v

    # -- topology -----------------------------------------------------------

    def _folded_yll(self, branch_out, faulted):
        y = build_ybus(self.case, branch_out=sorted(branch_out),
                       faulted_buses=sorted(faulted))
        diag = self.load_g0 - 1j * self.load_b0
        for s in range(self.n_src):
            bus = (self.dyn_gens + self.fix_gens)[s].bus
            y[bus, bus] += self.y_gg[s]
        y[np.diag_indices_from(y)] += diag
        return y

    def _get_config(self, branch_out: frozenset, faulted: frozenset):
        key = (branch_out, faulted)
        if key not in self._yll_cache:
            y = self._folded_yll(branch_out, faulted)
            lu, piv = K.lu_factor_c(y)
            self._yll_cache[key] = (y, lu, piv)
        return self._yll_cache[key]

    def set_topology(self, branch_out=(), faulted_buses=()):
        self._topology = (frozenset(branch_out), frozenset(faulted_buses))
        self.y_ll, self.lu, self.piv = self._get_config(*self._topology)

    # -- state --------------------------------------------------------------

    def initial_state(self) -> SystemState:
        n = self.n
        return SystemState(
            t=0.0, delta=self.delta0.copy(), omega=np.zeros(self.n_dyn),
            v=np.abs(self.v0c), theta=self.pf.theta.copy(),
            pevg_p=np.zeros(n), ctrl_on=np.zeros(n, dtype=np.uint8),
            lpf_theta=self.pf.theta.copy(), df_prev=np.zeros(n),
            dfdt_f=np.zeros(n))

    def coi_reference(self, delta: np.ndarray) -> float:
        """Angle reference: inertia-weighted mean, or the fixed sources'
        mean angle when the case contains any (their inertia dominates)."""
        if len(self.fix_gens):
            return float(self.delta_fix.mean())
        return float((self.m * delta).sum() / self.m.sum())

    def coi_separation(self, delta: np.ndarray) -> float:
        return float(np.abs(delta - self.coi_reference(delta)).max())

    # -- network solve (public) ----------------------------------------------

    def solve_network(self, delta, pevg_p=None, v_guess=None, tol=NETWORK_TOL,
                      max_iter=NETWORK_MAX_ITER):
        """Solve the algebraic bus equations for fixed rotor angles.

        Returns (v_mag, theta, p_e, iterations).  ``pevg_p`` is the per-bus
        group output in pu (consumption positive).  Raises
        :class:`SimulationDiverged` when the residual tolerance cannot be
        met, which callers treat as voltage collapse.
        """
        delta = np.asarray(delta, dtype=float)
        p = np.zeros(self.n) if pevg_p is None else np.asarray(pevg_p, dtype=float)
        v = (self.v_eq if v_guess is None else np.asarray(v_guess)).astype(complex).copy()
        p_e = np.zeros(self.n_src)
        ok, iters, res = K.stage_solve(self.y_ll, self.lu, self.piv, self.y_lg,
                                       self.y_gl, self.y_gg, self.e_mag, delta,
                                       self.delta_fix, p, self.config.lv_derate_v,
                                       v, p_e, tol, max_iter, 0)
        if not ok:
            raise SimulationDiverged(
                f"network solve did not reach {tol:.0e} in {max_iter} "
                f"iterations (residual {res:.2e})")
        return np.abs(v), np.angle(v), p_e, iters


def solve_network(runtime: CaseRuntime, state: SystemState, pevg_p=None):
    """Functional form of the algebraic solve: voltages for a state's rotor
    angles, warm-started from the state's own voltages."""
    vg = state.v * np.exp(1j * state.theta)
    v, th, _, _ = runtime.solve_network(state.delta, pevg_p, v_guess=vg)
    return v, th


def swing_rhs(runtime: CaseRuntime, state: SystemState):
    """Rotor derivatives for an algebraically consistent state.

    d(delta)/dt = omega and M d(omega)/dt = P_m - P_e - D omega, with the
    electrical power taken from the quadratic form over the augmented
    admittance matrix at the state's voltages.
    """
    vc = state.v * np.exp(1j * state.theta)
    e = runtime.e_mag * np.exp(1j * np.concatenate([state.delta, runtime.delta_fix]))
    i_src = runtime.y_gg * e + runtime.y_gl @ vc
    p_e = (e * np.conj(i_src)).real[:runtime.n_dyn]
    ddelta = state.omega.copy()
    domega = (runtime.p_m - p_e - runtime.dcoef * state.omega) / runtime.m
    return ddelta, domega


def network_residuals(runtime: CaseRuntime, delta, v_complex, pevg_p=None,
                      branch_out=(), faulted_buses=()):
    """Active/reactive power residuals of the bus balance equations,
    evaluated independently of the kernel (numpy, unfolded form).

    The active line is  V^2 g0 + P_net(V, theta) + P_group  and the
    reactive line is  V^2 b0 + Q_net(V, theta)  where P_net/Q_net are the
    injections into the network-plus-sources admittance model and g0/b0
    are the frozen load coefficients (consumption positive).  Group output
    carries the same low-voltage derating the solver applies.
    """
    case = runtime.case
    y_aug = augmented_ybus(case, build_ybus(case, branch_out=branch_out,
                                            faulted_buses=faulted_buses))
    # Internal node columns follow generator file order; build full voltage.
    e_all = np.zeros(case.n_generators, dtype=complex)
    src = runtime.dyn_gens + runtime.fix_gens
    delta_all = np.concatenate([np.asarray(delta, dtype=float), runtime.delta_fix])
    for s, g in enumerate(src):
        e_all[g.index] = runtime.e_mag[s] * np.exp(1j * delta_all[s])
    vfull = np.concatenate([np.asarray(v_complex, dtype=complex), e_all])
    s_inj = vfull * np.conj(y_aug @ vfull)
    n = runtime.n
    vm2 = np.abs(vfull[:n]) ** 2
    p = np.zeros(n) if pevg_p is None else np.asarray(pevg_p, dtype=float)
    lv = runtime.config.lv_derate_v
    derate = np.minimum(1.0, vm2 / (lv * lv))
    rp = vm2 * runtime.load_g0 + s_inj.real[:n] + p * derate
    rq = vm2 * runtime.load_b0 + s_inj.imag[:n]
    return rp, rq


# ---------------------------------------------------------------------------
# Stepping and full simulation


def _kernel_args(rt: CaseRuntime, st: SystemState, vc: np.ndarray,
                 p_e: np.ndarray):
    cfg = rt.config
    return (rt.y_ll, rt.lu, rt.piv, rt.y_lg, rt.y_gl, rt.y_gg, rt.e_mag,
            rt.delta_fix, rt.m, rt.dcoef, rt.p_m,
            st.delta, st.omega, vc, p_e,
            st.theta, st.ctrl_on, st.lpf_theta, st.df_prev, st.dfdt_f,
            st.pevg_p, rt.ctrl_idx, rt.h_pu, cfg.f_sat, cfg.activation_dfdt,
            cfg.sleep_df, cfg.sleep_dfdt, cfg.washout_tw, cfg.lv_derate_v)


def _consistent_solve(rt: CaseRuntime, st: SystemState, vc, p_e, tol=NETWORK_TOL):
    ok, _, res = K.stage_solve(rt.y_ll, rt.lu, rt.piv, rt.y_lg, rt.y_gl,
                               rt.y_gg, rt.e_mag, st.delta, rt.delta_fix,
                               st.pevg_p, rt.config.lv_derate_v, vc, p_e,
                               tol, NETWORK_MAX_ITER, 0)
    return ok, res


def step(runtime: CaseRuntime, state: SystemState, dt: float) -> SystemState:
    """One RK4 step of length dt (single-step API used by tests and small
    experiments; :func:`simulate` drives the same kernel in bulk)."""
    st = state.copy()
    vc = (st.v * np.exp(1j * st.theta)).astype(complex)
    vc_entry = vc.copy()
    p_e = np.zeros(runtime.n_src)
    ok, _ = _consistent_solve(runtime, st, vc, p_e)
    if not ok:
        raise SimulationDiverged("network solve failed at step entry")
    st.theta += np.angle(vc * np.conj(vc_entry))
    status, _ = K.integrate_steps(*_kernel_args(runtime, st, vc, p_e),
                                  1, dt, 0.0, NETWORK_TOL, NETWORK_MAX_ITER)
    if status != K.STATUS_OK:
        raise SimulationDiverged(f"network solve failed during step at t={st.t}")
    st.t = state.t + dt
    st.v = np.abs(vc)   # st.theta already tracks the unwrapped angles
    return st


def _validate_events(case: PowerSystemCase, scenario: Scenario):
    prev = -math.inf
    resolved = []
    for ev in scenario.events:
        if ev.action not in EVENT_ACTIONS:
            raise ScenarioError(f"unknown event action {ev.action!r}")
        if not 0.0 <= ev.time <= scenario.t_end:
            raise ScenarioError(f"event time {ev.time} outside [0, t_end]")
        if ev.time <= prev:
            raise ScenarioError("event times must be strictly increasing")
        prev = ev.time
        if ev.action == "bus_fault_on":
            if ev.bus is None:
                raise ScenarioError("bus_fault_on needs a bus id")
            resolved.append(replace(ev, bus=case.bus_index(ev.bus)))
        elif ev.action in ("branch_trip", "branch_restore"):
            if ev.branch is None or not 0 <= ev.branch < len(case.branches):
                raise ScenarioError(f"event references invalid branch {ev.branch}")
            resolved.append(ev)
        else:
            resolved.append(ev)
    return resolved


def simulate(case_or_runtime, scenario: Scenario,
             abort_on_instability: bool = False) -> Trace:
    """Run a scenario and return the sampled trace.

    Events are applied at their exact times (integration steps land on
    event boundaries).  A failed network solve is recorded in the trace
    metadata as an instability marker, not raised.  With
    ``abort_on_instability`` the run also stops early once the rotor
    angles have separated more than pi from the inertia-weighted mean
    after the last event, which is sufficient for classification.
    """
    if isinstance(case_or_runtime, CaseRuntime):
        rt = case_or_runtime
    else:
        cfg = PevgConfig.for_case(case_or_runtime, scenario.h_mw_per_hz,
                                  **scenario.control)
        rt = CaseRuntime(case_or_runtime, cfg)
    if abs(rt.config.h_global - scenario.h_mw_per_hz) > 1e-9 * max(1.0, scenario.h_mw_per_hz):
        raise ScenarioError("runtime control gain does not match scenario h")
    if scenario.dt <= 0 or scenario.t_end <= 0 or scenario.sample_dt <= 0:
        raise ScenarioError("dt, sample_dt and t_end must be positive")

    events = _validate_events(rt.case, scenario)
    n_samples = int(math.floor(scenario.t_end / scenario.sample_dt + 1e-9)) + 1

    # Breakpoints: sample instants plus event instants, deduplicated.
    bps: list[tuple[float, list]] = []
    for k in range(n_samples):
        bps.append((k * scenario.sample_dt, ["sample"]))
    if abs(bps[-1][0] - scenario.t_end) > 1e-12:
        bps.append((scenario.t_end, []))
    for ev in events:
        bps.append((ev.time, [ev]))
    bps.sort(key=lambda p: p[0])
    merged: list[tuple[float, list]] = []
    for t, tags in bps:
        if merged and abs(t - merged[-1][0]) < 1e-12:
            merged[-1][1].extend(tags)
        else:
            merged.append((t, list(tags)))

    st = rt.initial_state()
    rt.set_topology()
    vc = rt.v_eq.copy()
    p_e = np.zeros(rt.n_src)
    ok, res = _consistent_solve(rt, st, vc, p_e)

    S = n_samples
    out_t = np.zeros(S)
    out_delta = np.zeros((S, rt.n_dyn))
    out_omega = np.zeros((S, rt.n_dyn))
    out_v = np.zeros((S, rt.n))
    out_theta = np.zeros((S, rt.n))
    out_pevg = np.zeros((S, rt.n))

    branch_out: set = set()
    faulted: set = set()
    instability = None
    last_event_t = scenario.last_event_time()
    n_rec = 0

    def record(t):
        nonlocal n_rec
        out_t[n_rec] = t
        out_delta[n_rec] = st.delta
        out_omega[n_rec] = st.omega
        out_v[n_rec] = np.abs(vc)
        out_theta[n_rec] = st.theta
        out_pevg[n_rec] = st.pevg_p
        n_rec += 1

    def apply_event(ev: Event):
        nonlocal ok
        if ev.action == "bus_fault_on":
            faulted.add(ev.bus)
        elif ev.action == "fault_clear":
            faulted.clear()
        elif ev.action == "branch_trip":
            branch_out.add(ev.branch)
        elif ev.action == "branch_restore":
            branch_out.discard(ev.branch)
        rt.set_topology(branch_out, faulted)
        vc_old = vc.copy()
        ok2, _ = _consistent_solve(rt, st, vc, p_e)
        # The instantaneous angle jump must reach the unwrapped angle
        # tracker: it is exactly what the washout measurement (and hence
        # the wake trigger) reacts to.
        st.theta += np.angle(vc * np.conj(vc_old))
        return ok2

    if not ok:
        instability = {"time": 0.0, "reason": "network_divergence"}

    t_now = merged[0][0]
    idx = 0
    while idx < len(merged) and instability is None:
        t_bp, tags = merged[idx]
        dur = t_bp - t_now
        if dur > 1e-12:
            n_full = int(math.floor(dur / scenario.dt + 1e-9))
            rem = dur - n_full * scenario.dt
            if rem < 1e-9:
                rem = 0.0
            status, _ = K.integrate_steps(
                *_kernel_args(rt, st, vc, p_e),
                n_full, scenario.dt, rem, NETWORK_TOL, NETWORK_MAX_ITER)
            if status != K.STATUS_OK or not np.isfinite(st.delta).all():
                instability = {"time": t_bp, "reason": "network_divergence"}
                t_now = t_bp
                break
        t_now = t_bp
        st.t = t_now
        if "sample" in tags:
            record(t_now)
        for tag in tags:
            if isinstance(tag, Event):
                if not apply_event(tag):
                    instability = {"time": t_now, "reason": "network_divergence"}
        if (abort_on_instability and instability is None
                and t_now >= last_event_t
                and rt.coi_separation(st.delta) > math.pi):
            instability = {"time": t_now, "reason": "angle_separation"}
        idx += 1

    metadata = {
        "case": rt.case.name,
        "scenario": scenario.to_dict(),
        "h_mw_per_hz": scenario.h_mw_per_hz,
        "last_event_time": last_event_t,
        "instability": instability,
        "gen_buses": [rt.case.buses[g.bus].ext_id for g in rt.dyn_gens],
        "bus_ids": [b.ext_id for b in rt.case.buses],
        "m_dyn": [float(x) for x in rt.m],
        "fixed_reference": (float(rt.delta_fix.mean())
                            if len(rt.fix_gens) else None),
    }
    return Trace(t=out_t[:n_rec], delta=out_delta[:n_rec],
                 omega=out_omega[:n_rec], v=out_v[:n_rec],
                 theta=out_theta[:n_rec], pevg_p=out_pevg[:n_rec],
                 metadata=metadata)


# ---------------------------------------------------------------------------
# Frequency extraction from traces


def generator_frequencies(trace: Trace) -> np.ndarray:
    """Rotor frequency deviations in Hz, one column per dynamic machine."""
    return trace.omega / (2.0 * math.pi)


def bus_frequencies(trace: Trace, tw: float = 0.1) -> np.ndarray:
    """Washout-filtered frequency deviations (Hz) of every network bus,
    computed from the sampled angle history."""
    if len(trace.t) < 2:
        return np.zeros_like(trace.theta)
    dt = float(trace.t[1] - trace.t[0])
    return washout_frequency(trace.theta, dt, tw)
