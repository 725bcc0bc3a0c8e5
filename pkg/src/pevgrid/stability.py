"""Stability analyses on top of the simulator.

Three instruments:

* small-signal: finite-difference linearization of the reduced rotor
  dynamics (network algebraically eliminated) and the spectral indicator
  alpha = largest non-structural eigenvalue real part, swept over the
  EV-fleet gain;
* large-disturbance: critical clearing times by bisection on the fault
  duration, with a trajectory classifier (loss-of-synchronism test in the
  inertia-weighted frame plus an end-window frequency bound);
* stability-region scans: classify a grid of rotor-angle perturbations
  around the equilibrium.

For eigenvalue work the EV groups are treated as always active on the
pure linear droop branch, with the bus frequency taken as the
quasi-steady angle sensitivity to the rotor states; wake/sleep triggers
and saturation apply only to the time-domain runs.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .control import PevgConfig
from .dynamics import (CaseRuntime, Event, Scenario, SimulationDiverged,
                       Trace, simulate)
from .network import PowerSystemCase

ZERO_MODE_TOL = 1e-9
FD_EPS = 1e-6


class TraceTooShort(Exception):
    pass


# ---------------------------------------------------------------------------
# Linearization


@dataclass(frozen=True)
class StateMatrix:
    """Reduced state matrix over (delta_1..n, omega_1..n)."""
    a: np.ndarray
    gen_buses: tuple[int, ...]       # terminal bus ids, display order
    h_mw_per_hz: float
    case: str

    @property
    def order(self) -> int:
        return self.a.shape[0]

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.a)


def reduced_rhs(rt: CaseRuntime, delta: np.ndarray, omega: np.ndarray,
                tol: float = 1e-13, force_iters: int = 8):
    """Smooth reduced dynamics F(delta, omega) with the network eliminated.

    The EV-group power uses the linear droop on the quasi-steady bus
    frequency: theta sensitivities to the rotor angles are evaluated from
    the group-free network solution, then the injections are resolved.
    Solves run a fixed number of sweeps from a fixed starting point so the
    map is smooth (finite-difference clean).
    """
    from . import _kernel as K
    n, nd = rt.n, rt.n_dyn
    delta = np.asarray(delta, dtype=float)
    omega = np.asarray(omega, dtype=float)

    # group-free solution
    v = rt.v_eq.copy()
    p_e = np.zeros(rt.n_src)
    ok, _, _ = K.stage_solve(rt.y_ll, rt.lu, rt.piv, rt.y_lg, rt.y_gl, rt.y_gg,
                             rt.e_mag, delta, rt.delta_fix, np.zeros(n),
                             rt.config.lv_derate_v, v, p_e, tol, 30,
                             force_iters)
    if not ok or not np.isfinite(v).all():
        raise SimulationDiverged("network solve failed in reduced dynamics")

    if rt.h_pu.any():
        # dV/ddelta_g = Yll^{-1} (-y_lg[:,g] * j E_g e^{j delta_g})
        dfreq = np.zeros(n)
        x = np.empty(n, dtype=np.complex128)
        vm2 = (v.real ** 2 + v.imag ** 2)
        for g in range(nd):
            rhs = -rt.y_lg[:, g] * (1j * rt.e_mag[g] * np.exp(1j * delta[g]))
            K.lu_solve_c(rt.lu, rt.piv, rhs, x)
            dtheta = (np.conj(v) * x).imag / vm2
            dfreq += dtheta * omega[g]
        p_pevg = rt.h_pu * (dfreq / (2.0 * math.pi))
        ok, _, _ = K.stage_solve(rt.y_ll, rt.lu, rt.piv, rt.y_lg, rt.y_gl,
                                 rt.y_gg, rt.e_mag, delta, rt.delta_fix,
                                 p_pevg, rt.config.lv_derate_v, v, p_e, tol,
                                 30, force_iters)
        if not ok or not np.isfinite(v).all():
            raise SimulationDiverged("network solve failed in reduced dynamics")

    domega = (rt.p_m - p_e[:nd] - rt.dcoef * omega) / rt.m
    return omega.copy(), domega


def linearize(case_or_runtime, h_mw_per_hz: float = 0.0,
              eps: float = FD_EPS) -> StateMatrix:
    """Central-difference state matrix of the reduced dynamics at the
    equilibrium, order 2n over (delta, omega).

    The delta-rows are the exact [0 I] coupling.  When the case has no
    fixed source, a uniform angle shift is an exact symmetry of the
    continuous dynamics, so the delta-columns of the acceleration block
    are deflated to exact zero row sums; this keeps the structural zero
    eigenvalue below the exclusion threshold of :func:`alpha`.
    """
    rt = _as_runtime(case_or_runtime, h_mw_per_hz)
    nd = rt.n_dyn
    x0 = np.concatenate([rt.delta0, np.zeros(nd)])

    a = np.zeros((2 * nd, 2 * nd))
    a[:nd, nd:] = np.eye(nd)

    for j in range(2 * nd):
        step = eps * max(1.0, abs(x0[j]))
        for attempt in range(4):
            try:
                xp = x0.copy()
                xp[j] += step
                _, dp = reduced_rhs(rt, xp[:nd], xp[nd:])
                xm = x0.copy()
                xm[j] -= step
                _, dm = reduced_rhs(rt, xm[:nd], xm[nd:])
                break
            except SimulationDiverged:
                if attempt == 3:
                    raise
                step *= 0.5
        a[nd:, j] = (dp - dm) / (2.0 * step)

    if not rt.fix_gens:
        block = a[nd:, :nd]
        block -= block.sum(axis=1, keepdims=True) / nd
    return StateMatrix(a=a, gen_buses=tuple(rt.case.buses[g.bus].ext_id
                                            for g in rt.dyn_gens),
                       h_mw_per_hz=float(h_mw_per_hz), case=rt.case.name)


def alpha(sm: StateMatrix) -> float:
    """Largest eigenvalue real part, excluding the structural zero mode
    (|lambda| below 1e-9) that reflects angle-reference invariance."""
    lam = sm.eigenvalues()
    keep = np.abs(lam) >= ZERO_MODE_TOL
    if not keep.any():
        raise ValueError("state matrix has no retained eigenvalues")
    return float(lam[keep].real.max())


@dataclass(frozen=True)
class AlphaSweepReport:
    h_values: tuple[float, ...]        # MW/Hz
    alphas: tuple[float, ...]          # 1/s
    case: str
    argmin_h: float
    provenance: dict = field(default_factory=dict)


def sweep_alpha(case: PowerSystemCase, h_grid) -> AlphaSweepReport:
    """alpha(h) over a grid of global gains (MW/Hz); reports the argmin."""
    h_grid = [float(h) for h in h_grid]
    alphas = []
    for h in h_grid:
        alphas.append(alpha(linearize(case, h)))
    k = int(np.argmin(alphas))
    return AlphaSweepReport(h_values=tuple(h_grid), alphas=tuple(alphas),
                            case=case.name, argmin_h=h_grid[k],
                            provenance={"zero_mode_tol": ZERO_MODE_TOL,
                                        "fd_eps": FD_EPS})


def _as_runtime(case_or_runtime, h_mw_per_hz) -> CaseRuntime:
    if isinstance(case_or_runtime, CaseRuntime):
        rt = case_or_runtime
        if abs(rt.config.h_global - h_mw_per_hz) > 1e-9 * max(1.0, h_mw_per_hz):
            raise ValueError("runtime was built for a different gain")
        return rt
    cfg = PevgConfig.for_case(case_or_runtime, h_mw_per_hz)
    return CaseRuntime(case_or_runtime, cfg)


# ---------------------------------------------------------------------------
# Trajectory classification


STABLE = "stable"
UNSTABLE = "unstable"

MAX_COI_SEPARATION = math.pi
END_WINDOW_S = 2.0
END_WINDOW_DF_HZ = 0.5
MIN_POST_EVENT_S = 10.0


def classify(trace: Trace) -> str:
    """Stable/unstable verdict for a simulated trajectory.

    Unstable when the network solve diverged, when any rotor separates
    more than pi radians from the inertia-weighted mean angle after the
    last event, or when rotor frequency deviations in the final two
    seconds still exceed 0.5 Hz; stable otherwise.  Requires at least ten
    simulated seconds after the last event (an early instability marker
    waives the length requirement, the verdict is already determined).
    """
    if trace.metadata.get("instability"):
        return UNSTABLE
    t_last = trace.metadata.get("last_event_time", 0.0)
    t = trace.t
    if len(t) < 2:
        raise TraceTooShort("trace has fewer than two samples")
    if t[-1] - t_last < MIN_POST_EVENT_S - 1e-6:
        raise TraceTooShort(
            f"need {MIN_POST_EVENT_S} s after the last event, "
            f"got {t[-1] - t_last:.3f} s")

    m = np.asarray(trace.metadata["m_dyn"])
    post = t >= t_last - 1e-9
    delta = trace.delta[post]
    fixed_ref = trace.metadata.get("fixed_reference")
    if fixed_ref is not None:
        ref = np.full(len(delta), fixed_ref)
    else:
        ref = (delta * m).sum(axis=1) / m.sum()
    if np.abs(delta - ref[:, None]).max() > MAX_COI_SEPARATION:
        return UNSTABLE

    final = t >= t[-1] - END_WINDOW_S
    df = np.abs(trace.omega[final]) / (2.0 * math.pi)
    if df.max() >= END_WINDOW_DF_HZ:
        return UNSTABLE
    return STABLE


# ---------------------------------------------------------------------------
# Critical clearing time


@dataclass(frozen=True)
class CctResult:
    seconds: float              # stable lower endpoint of the final bracket
    censored: bool = False      # stable even at the bracket top
    unclearable: bool = False   # unstable already at one resolution step
    evaluations: int = 0

    def label(self) -> str:
        if self.censored:
            return f">={self.seconds:.3f}"
        return f"{self.seconds:.3f}"


def critical_clearing_time(case_or_runtime, fault_bus: int,
                           h_mw_per_hz: float = 0.0, *,
                           t_fault: float = 1.0, t_post: float = 10.0,
                           bracket: float = 1.0, resolution: float = 1e-3,
                           dt: float = 1e-3) -> CctResult:
    """Longest fault duration at ``fault_bus`` (file-level id) that keeps
    the system stable, found by bisection on the clearing time.

    Clearing times are restricted to multiples of ``resolution`` (default
    1 ms, also the bisection termination width) so every probed event time
    lands on the integration grid.  The returned value is the stable lower
    endpoint of the final bracket.
    """
    rt = _as_runtime(case_or_runtime, h_mw_per_hz)
    rt.case.bus_index(fault_bus)    # validate

    n_eval = 0

    def is_stable(units: int) -> bool:
        nonlocal n_eval
        if units == 0:
            return True
        tau = units * resolution
        sc = Scenario(events=(Event.fault(t_fault, fault_bus),
                              Event.clear(t_fault + tau)),
                      t_end=t_fault + tau + t_post, dt=dt,
                      h_mw_per_hz=h_mw_per_hz)
        n_eval += 1
        return classify(simulate(rt, sc, abort_on_instability=True)) == STABLE

    hi = int(round(bracket / resolution))
    if is_stable(hi):
        return CctResult(seconds=hi * resolution, censored=True,
                         evaluations=n_eval)
    lo = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if is_stable(mid):
            lo = mid
        else:
            hi = mid
    return CctResult(seconds=lo * resolution, unclearable=(lo == 0),
                     evaluations=n_eval)


@dataclass(frozen=True)
class CctReport:
    buses: tuple[int, ...]
    h_values: tuple[float, ...]              # MW/Hz
    results: tuple                           # row-major CctResult grid
    case: str
    provenance: dict = field(default_factory=dict)

    def result(self, i_bus: int, j_h: int) -> CctResult:
        return self.results[i_bus * len(self.h_values) + j_h]

    def seconds(self) -> np.ndarray:
        out = np.full((len(self.buses), len(self.h_values)), np.nan)
        for i in range(len(self.buses)):
            for j in range(len(self.h_values)):
                r = self.result(i, j)
                if isinstance(r, CctResult):
                    out[i, j] = r.seconds
        return out


# Worker context shared through fork(); see _pool_map.
_CCT_CTX: dict = {}


def _cct_cell(job):
    idx, bus, h, kw = job
    case = _CCT_CTX["case"]
    key = ("rt", h)
    if key not in _CCT_CTX:
        _CCT_CTX[key] = CaseRuntime(case, PevgConfig.for_case(case, h))
    try:
        return idx, critical_clearing_time(_CCT_CTX[key], bus, h, **kw)
    except Exception as exc:   # per-cell failure stays a data point
        return idx, f"error: {exc}"


def cct_table(case: PowerSystemCase, buses, h_values_mw, workers: int = 1,
              **kw) -> CctReport:
    """CCT for every (bus, gain) pair, fanned out over a process pool.

    Results are gathered in job-index order, so the table is independent
    of the worker count.  Cell failures are recorded as strings and do not
    stop the sweep.
    """
    buses = [int(b) for b in buses]
    h_values = [float(h) for h in h_values_mw]
    for b in buses:
        case.bus_index(b)
    jobs = []
    for i, b in enumerate(buses):
        for j, h in enumerate(h_values):
            jobs.append((i * len(h_values) + j, b, h, kw))
    results = _pool_map(_cct_cell, jobs, workers, ctx=_CCT_CTX,
                        ctx_values={"case": case})
    ordered = [r for _, r in sorted(results, key=lambda p: p[0])]
    return CctReport(buses=tuple(buses), h_values=tuple(h_values),
                     results=tuple(ordered), case=case.name,
                     provenance={"kwargs": kw})


# ---------------------------------------------------------------------------
# Stability-region scan


@dataclass(frozen=True)
class RasReport:
    offsets_a: tuple[float, ...]     # rad, machine a axis
    offsets_b: tuple[float, ...]
    stable: np.ndarray               # (na, nb) int8: 1 stable, 0 unstable, -1 skipped
    machines: tuple[int, int]        # dynamic generator indices perturbed
    h_mw_per_hz: float
    case: str
    completed: bool = True
    provenance: dict = field(default_factory=dict)

    def stable_count(self) -> int:
        return int((self.stable == 1).sum())


_RAS_CTX: dict = {}


def _ras_point(job):
    idx, off_a, off_b = job
    rt: CaseRuntime = _RAS_CTX["rt"]
    machines = _RAS_CTX["machines"]
    sc: Scenario = _RAS_CTX["scenario"]
    delta = rt.delta0.copy()
    delta[machines[0]] += off_a
    delta[machines[1]] += off_b
    try:
        state = rt.state_from_delta(delta)
    except SimulationDiverged:
        return idx, 0
    tr = simulate(rt, sc, initial_state=state, abort_on_instability=True)
    return idx, 1 if classify(tr) == STABLE else 0


def ras_scan(case: PowerSystemCase, h_mw_per_hz: float = 0.0,
             grid=(41, 41), half_range: float = math.pi,
             machines=(1, 2), t_sim: float = 10.0, dt: float = 1e-3,
             workers: int = 1, max_points: int | None = None) -> RasReport:
    """Classify a grid of rotor-angle perturbations around the equilibrium.

    Machines ``machines`` (dynamic-generator indices, machine 0 anchored)
    are offset by every pair in the grid at zero speed deviation and the
    resulting trajectory is classified.  ``max_points`` caps the work; if
    it is hit the remaining points are marked -1 and the report is flagged
    incomplete.
    """
    na, nb = int(grid[0]), int(grid[1])
    rt = _as_runtime(case, h_mw_per_hz)
    if rt.n_dyn < 2:
        raise ValueError("stability-region scan needs at least two dynamic machines")
    ma, mb = machines
    if not (0 <= ma < rt.n_dyn and 0 <= mb < rt.n_dyn) or ma == mb:
        raise ValueError(f"invalid machine pair {machines}")
    offs_a = np.linspace(-half_range, half_range, na)
    offs_b = np.linspace(-half_range, half_range, nb)
    scenario = Scenario(t_end=t_sim, dt=dt, h_mw_per_hz=h_mw_per_hz)

    jobs = []
    for i in range(na):
        for j in range(nb):
            jobs.append((i * nb + j, float(offs_a[i]), float(offs_b[j])))
    completed = True
    if max_points is not None and len(jobs) > max_points:
        jobs = jobs[:max_points]
        completed = False

    results = _pool_map(_ras_point, jobs, workers, ctx=_RAS_CTX,
                        ctx_values={"rt": rt, "machines": (ma, mb),
                                    "scenario": scenario})
    stable = np.full((na, nb), -1, dtype=np.int8)
    for idx, val in results:
        stable[idx // nb, idx % nb] = val
    return RasReport(offsets_a=tuple(offs_a), offsets_b=tuple(offs_b),
                     stable=stable, machines=(ma, mb),
                     h_mw_per_hz=float(h_mw_per_hz), case=case.name,
                     completed=completed,
                     provenance={"t_sim": t_sim, "dt": dt,
                                 "half_range": half_range})


# ---------------------------------------------------------------------------
# Deterministic process-pool fan-out


def _pool_map(fn, jobs, workers, ctx, ctx_values):
    """Run jobs over a worker pool, gathering results in job order.

    The context dict is populated before forking so workers inherit it;
    with one worker everything runs inline.
    """
    ctx.clear()
    ctx.update(ctx_values)
    try:
        if workers <= 1 or len(jobs) <= 1:
            return [fn(job) for job in jobs]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    finally:
        ctx.clear()


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
