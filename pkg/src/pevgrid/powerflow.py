"""Pre-disturbance equilibrium: Newton-Raphson power flow and conversion of
its solution into dynamic initial conditions (internal EMFs, rotor angles,
mechanical powers, frozen load admittances, augmented admittance matrix).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (CaseValidationError, LoadAdmittance, PowerSystemCase,
                      build_ybus, loads_to_admittance)

PF_TOL = 1e-8
PF_MAX_ITER = 50


class PowerFlowError(Exception):
    pass


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray            # per-bus voltage magnitude, pu
    theta: np.ndarray        # per-bus voltage angle, rad (slack = 0)
    p_gen: np.ndarray        # per-generator active injection, pu
    q_gen: np.ndarray        # per-generator reactive injection, pu
    mismatch_norm: float     # max abs power mismatch at convergence, pu
    iterations: int


def _injected_power(ybus, vc):
    return vc * np.conj(ybus @ vc)


def solve_power_flow(case: PowerSystemCase) -> PowerFlowSolution:
    """Full Newton-Raphson power flow from a flat start.

    Generator terminal buses are held at their voltage setpoints (PV), the
    designated slack bus additionally fixes the angle reference, and every
    other bus is PQ.  Converges when the largest absolute power mismatch
    drops below 1e-8 pu; raises :class:`PowerFlowError` otherwise.
    """
    n = case.n_buses
    slack = case.slack_bus

    p_sched = -case.load_p()
    q_sched = -case.load_q()
    v_set = np.ones(n)
    is_gen_bus = np.zeros(n, dtype=bool)
    for g in case.generators:
        is_gen_bus[g.bus] = True
        v_set[g.bus] = g.v_set
        if g.bus != slack:
            p_sched[g.bus] += g.p_set

    pv = np.array([i for i in range(n) if is_gen_bus[i] and i != slack], dtype=int)
    pq = np.array([i for i in range(n) if not is_gen_bus[i]], dtype=int)
    pvpq = np.concatenate([pv, pq]).astype(int)

    ybus = build_ybus(case)
    v = np.where(is_gen_bus, v_set, 1.0)
    theta = np.zeros(n)

    mismatch_norm = np.inf
    for it in range(PF_MAX_ITER + 1):
        vc = v * np.exp(1j * theta)
        s_inj = _injected_power(ybus, vc)
        dp = p_sched[pvpq] - s_inj.real[pvpq]
        dq = q_sched[pq] - s_inj.imag[pq]
        f = np.concatenate([dp, dq])
        mismatch_norm = float(np.abs(f).max()) if f.size else 0.0
        if mismatch_norm < PF_TOL:
            break
        if it == PF_MAX_ITER:
            raise PowerFlowError(
                f"power flow did not converge: mismatch {mismatch_norm:.3e} pu "
                f"after {it} iterations")

        # Complex power sensitivities (dense), then real blocks.
        ibus = ybus @ vc
        diag_v = np.diag(vc)
        diag_i = np.diag(ibus)
        diag_vn = np.diag(vc / v)
        ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
        ds_dvm = diag_v @ np.conj(ybus @ diag_vn) + np.conj(diag_i) @ diag_vn

        j11 = ds_dva.real[np.ix_(pvpq, pvpq)]
        j12 = ds_dvm.real[np.ix_(pvpq, pq)]
        j21 = ds_dva.imag[np.ix_(pq, pvpq)]
        j22 = ds_dvm.imag[np.ix_(pq, pq)]
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular power-flow Jacobian: {exc}") from None
        theta[pvpq] += dx[:len(pvpq)]
        v[pq] += dx[len(pvpq):]

    vc = v * np.exp(1j * theta)
    s_inj = _injected_power(ybus, vc)

    # Per-bus generator injection = network injection + local load; split it
    # over co-located units in proportion to their dispatch.
    p_gen = np.zeros(case.n_generators)
    q_gen = np.zeros(case.n_generators)
    by_bus: dict[int, list] = {}
    for g in case.generators:
        by_bus.setdefault(g.bus, []).append(g)
    for bus, gens in by_bus.items():
        p_bus = s_inj.real[bus] + case.buses[bus].load_p
        q_bus = s_inj.imag[bus] + case.buses[bus].load_q
        total = sum(g.p_set for g in gens)
        for g in gens:
            share = g.p_set / total if total > 0 else 1.0 / len(gens)
            p_gen[g.index] = p_bus * share
            q_gen[g.index] = q_bus * share

    return PowerFlowSolution(v=v, theta=theta, p_gen=p_gen, q_gen=q_gen,
                             mismatch_norm=mismatch_norm, iterations=it)


def powerflow_report(case: PowerSystemCase, pf: PowerFlowSolution) -> list[dict]:
    """Per-bus rows (id, V, theta, injections) for the CSV report."""
    vc = pf.v * np.exp(1j * pf.theta)
    s_inj = _injected_power(build_ybus(case), vc)
    rows = []
    for b in case.buses:
        rows.append({
            "bus": b.ext_id,
            "kind": b.kind,
            "v_pu": pf.v[b.index],
            "theta_rad": pf.theta[b.index],
            "p_inj_pu": s_inj.real[b.index],
            "q_inj_pu": s_inj.imag[b.index],
            "load_p_pu": b.load_p,
            "load_q_pu": b.load_q,
        })
    return rows


# ---------------------------------------------------------------------------
# Dynamic initial conditions


@dataclass(frozen=True)
class DynamicInit:
    """Equilibrium quantities frozen for a dynamic run.

    Arrays are in generator file order.  ``y_aug`` is the admittance matrix
    of the network augmented with one internal source node per generator
    (rows/columns N .. N+n-1, coupled to the terminal through 1/(j xd'));
    load shunts are NOT folded in, they are listed separately.
    """
    e_mag: np.ndarray        # internal EMF magnitude, pu
    delta0: np.ndarray       # internal angle at equilibrium, rad
    p_m: np.ndarray          # mechanical power, pu
    load_admittances: list[LoadAdmittance]
    y_aug: np.ndarray
    v0: np.ndarray           # bus voltage magnitudes at equilibrium
    theta0: np.ndarray       # bus voltage angles at equilibrium


def augmented_ybus(case: PowerSystemCase, ybus: np.ndarray) -> np.ndarray:
    """Extend an N x N network matrix with generator internal nodes."""
    n = case.n_buses
    ng = case.n_generators
    y = np.zeros((n + ng, n + ng), dtype=complex)
    y[:n, :n] = ybus
    for g in case.generators:
        yg = 1.0 / (1j * g.xd_prime)
        k = n + g.index
        y[k, k] += yg
        y[g.bus, g.bus] += yg
        y[k, g.bus] -= yg
        y[g.bus, k] -= yg
    return y


def init_dynamics(case: PowerSystemCase, pf: PowerFlowSolution) -> DynamicInit:
    """Convert a converged power flow into dynamic initial conditions.

    Each generator becomes a constant EMF behind its transient reactance:
    E = V_terminal + j xd' * I_terminal with I from the power-flow
    injection; the mechanical power is set to the initial electrical power
    so the swing equations start exactly at rest.
    """
    if pf.mismatch_norm > PF_TOL:
        raise PowerFlowError("init_dynamics needs a converged power flow")
    ng = case.n_generators
    e_mag = np.zeros(ng)
    delta0 = np.zeros(ng)
    p_m = np.zeros(ng)
    for g in case.generators:
        vt = pf.v[g.bus] * np.exp(1j * pf.theta[g.bus])
        s = pf.p_gen[g.index] + 1j * pf.q_gen[g.index]
        i_term = np.conj(s / vt)
        e = vt + 1j * g.xd_prime * i_term
        e_mag[g.index] = abs(e)
        delta0[g.index] = float(np.angle(e))
        # Lossless source branch: electrical power at the internal node
        # equals the terminal injection.
        p_m[g.index] = pf.p_gen[g.index]
    loads = loads_to_admittance(case, pf)
    y_aug = augmented_ybus(case, build_ybus(case))
    return DynamicInit(e_mag=e_mag, delta0=delta0, p_m=p_m,
                       load_admittances=loads, y_aug=y_aug,
                       v0=pf.v.copy(), theta0=pf.theta.copy())
