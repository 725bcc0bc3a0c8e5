"""Numba-compiled inner loops for the dynamic simulator.

Everything here works on plain arrays laid out by
:class:`pevgrid.dynamics.CaseRuntime`:

* network buses 0..N-1 carry the algebraic voltage unknowns; the load
  shunts are folded into the complex matrix ``y_ll`` so the network
  equations are linear in the complex voltages except for the EV-group
  injections, which are small constant-power terms handled by a few
  fixed-point sweeps on top of a single LU factorization per topology;
* voltage sources (dynamic generators first, then any fixed sources) sit
  behind their transient reactances in ``y_lg`` / ``y_gl`` / ``y_gg``.

All functions are deterministic; no fastmath.
"""

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_DIVERGED = 1


@njit(cache=True)
def lu_factor_c(a):
    """Partial-pivoting LU of a complex square matrix (copy, not in place)."""
    n = a.shape[0]
    lu = a.copy()
    piv = np.empty(n, dtype=np.int64)
    for k in range(n):
        p = k
        big = abs(lu[k, k])
        for i in range(k + 1, n):
            mag = abs(lu[i, k])
            if mag > big:
                big = mag
                p = i
        piv[k] = p
        if p != k:
            for j in range(n):
                tmp = lu[k, j]
                lu[k, j] = lu[p, j]
                lu[p, j] = tmp
        akk = lu[k, k]
        if akk == 0:
            # Singular; poison the diagonal so solves produce inf instead of
            # raising inside jitted code.
            lu[k, k] = 1e-300
            akk = lu[k, k]
        inv = 1.0 / akk
        for i in range(k + 1, n):
            lu[i, k] *= inv
            lik = lu[i, k]
            for j in range(k + 1, n):
                lu[i, j] -= lik * lu[k, j]
    return lu, piv


@njit(cache=True)
def lu_solve_c(lu, piv, b, x):
    n = lu.shape[0]
    for i in range(n):
        x[i] = b[i]
    for k in range(n):
        p = piv[k]
        if p != k:
            tmp = x[k]
            x[k] = x[p]
            x[p] = tmp
    for i in range(1, n):
        s = x[i]
        for j in range(i):
            s -= lu[i, j] * x[j]
        x[i] = s
    for i in range(n - 1, -1, -1):
        s = x[i]
        for j in range(i + 1, n):
            s -= lu[i, j] * x[j]
        x[i] = s / lu[i, i]


@njit(cache=True)
def _pevg_currents(v, p_pevg, lv_v, out):
    """Current drawn at each bus by its EV group (consumption positive).

    Above ``lv_v`` the group is a constant-power device, I = P/conj(V).
    Below, the power is derated by (|V|/lv_v)^2 which makes the current
    linear in V and keeps the equations solvable through bolted faults.
    """
    lv2 = lv_v * lv_v
    for i in range(v.shape[0]):
        p = p_pevg[i]
        if p == 0.0:
            out[i] = 0.0
        else:
            vm2 = v[i].real * v[i].real + v[i].imag * v[i].imag
            if vm2 >= lv2:
                out[i] = p / np.conj(v[i])
            else:
                out[i] = p * v[i] / lv2
    return out


@njit(cache=True)
def solve_network_c(y_ll, lu, piv, rhs_gen, p_pevg, lv_v, v, tol, max_iter,
                    force_iters):
    """Solve the algebraic bus equations for complex voltages, in place.

    ``rhs_gen`` is the source-side current vector -(y_lg @ e).  Returns
    (ok, iterations, max_residual) where the residual is the largest
    absolute active/reactive power imbalance (pu) at any bus.  When
    ``force_iters`` > 0 exactly that many sweeps are run with no early
    exit, which makes the result a smooth function of the inputs (used by
    finite-difference linearization).
    """
    n = y_ll.shape[0]
    ip = np.empty(n, dtype=np.complex128)
    b = np.empty(n, dtype=np.complex128)
    vn = np.empty(n, dtype=np.complex128)
    res = 1e300
    n_iter = max_iter if force_iters == 0 else force_iters
    it_done = 0
    for it in range(n_iter):
        _pevg_currents(v, p_pevg, lv_v, ip)
        for i in range(n):
            b[i] = rhs_gen[i] - ip[i]
        lu_solve_c(lu, piv, b, vn)
        for i in range(n):
            v[i] = vn[i]
        it_done = it + 1
        if force_iters > 0:
            continue
        # Power residual of the full nonlinear equations at the new point.
        _pevg_currents(v, p_pevg, lv_v, ip)
        res = 0.0
        for i in range(n):
            acc = ip[i] - rhs_gen[i]
            for j in range(n):
                acc += y_ll[i, j] * v[j]
            s = v[i] * np.conj(acc)
            if abs(s.real) > res:
                res = abs(s.real)
            if abs(s.imag) > res:
                res = abs(s.imag)
        if res < tol:
            return True, it_done, res
    if force_iters > 0:
        return True, it_done, 0.0
    return False, it_done, res


@njit(cache=True)
def electrical_power(y_gl, y_gg, e_cplx, v, p_e):
    """Active power injected by each source into the network (pu)."""
    n_src = y_gl.shape[0]
    n = v.shape[0]
    for g in range(n_src):
        acc = y_gg[g] * e_cplx[g]
        for i in range(n):
            acc += y_gl[g, i] * v[i]
        s = e_cplx[g] * np.conj(acc)
        p_e[g] = s.real


@njit(cache=True)
def _source_rhs(y_lg, e_cplx, rhs):
    n, n_src = y_lg.shape
    for i in range(n):
        acc = 0.0 + 0.0j
        for g in range(n_src):
            acc -= y_lg[i, g] * e_cplx[g]
        rhs[i] = acc


@njit(cache=True)
def _make_e(e_mag, delta_dyn, delta_fix, e_cplx):
    nd = delta_dyn.shape[0]
    for g in range(nd):
        e_cplx[g] = e_mag[g] * (np.cos(delta_dyn[g]) + 1j * np.sin(delta_dyn[g]))
    for k in range(delta_fix.shape[0]):
        g = nd + k
        e_cplx[g] = e_mag[g] * (np.cos(delta_fix[k]) + 1j * np.sin(delta_fix[k]))


@njit(cache=True)
def stage_solve(y_ll, lu, piv, y_lg, y_gl, y_gg, e_mag, delta_dyn, delta_fix,
                p_pevg, lv_v, v, p_e, tol, max_iter, force_iters):
    """Network solve + source powers for one set of rotor angles.

    Mutates ``v`` (warm start in, solution out) and ``p_e``.  Returns
    (ok, iterations, residual).
    """
    n = y_ll.shape[0]
    n_src = y_lg.shape[1]
    e_cplx = np.empty(n_src, dtype=np.complex128)
    rhs = np.empty(n, dtype=np.complex128)
    _make_e(e_mag, delta_dyn, delta_fix, e_cplx)
    _source_rhs(y_lg, e_cplx, rhs)
    ok, iters, res = solve_network_c(y_ll, lu, piv, rhs, p_pevg, lv_v, v,
                                     tol, max_iter, force_iters)
    electrical_power(y_gl, y_gg, e_cplx, v, p_e)
    return ok, iters, res


@njit(cache=True)
def integrate_steps(
        # network configuration
        y_ll, lu, piv, y_lg, y_gl, y_gg, e_mag, delta_fix,
        # machine parameters
        m, dcoef, p_m,
        # mutable dynamic state
        delta, omega, v, p_e,
        # mutable measurement / controller state (per network bus)
        theta_acc, ctrl_on, lpf_theta, df_prev, dfdt_f, out_p,
        # controller parameters
        ctrl_idx, h_pu, f_sat, act_dfdt, sleep_df, sleep_dfdt, tw, lv_v,
        # stepping
        n_full, dt, rem, tol, max_iter):
    """Advance the coupled system by n_full steps of dt plus a remainder.

    Classical fixed-step RK4 on the rotor states with a network solve at
    every stage; EV-group controllers are updated once per completed step
    from the new bus angles.  On entry ``v``/``p_e`` must be consistent
    with ``delta`` and ``out_p`` (use :func:`stage_solve` after any
    topology or output change).  Returns (status, steps_completed).
    """
    nd = delta.shape[0]
    n = v.shape[0]
    k1d = np.empty(nd)
    k1w = np.empty(nd)
    kacc_d = np.empty(nd)
    kacc_w = np.empty(nd)
    d_st = np.empty(nd)
    o_st = np.empty(nd)
    v_old = np.empty(n, dtype=np.complex128)
    two_pi = 2.0 * np.pi
    total = n_full + (1 if rem > 0.0 else 0)

    for step in range(total):
        h = dt if step < n_full else rem

        # Voltages at the step start, for the unwrapped-angle increment.
        for i in range(n):
            v_old[i] = v[i]

        # k1 uses the cached consistent solve
        for g in range(nd):
            k1d[g] = omega[g]
            k1w[g] = (p_m[g] - p_e[g] - dcoef[g] * omega[g]) / m[g]
            kacc_d[g] = k1d[g]
            kacc_w[g] = k1w[g]
            d_st[g] = delta[g] + 0.5 * h * k1d[g]
            o_st[g] = omega[g] + 0.5 * h * k1w[g]

        # k2
        ok, _, _ = stage_solve(y_ll, lu, piv, y_lg, y_gl, y_gg, e_mag, d_st,
                               delta_fix, out_p, lv_v, v, p_e, tol, max_iter, 0)
        if not ok:
            return STATUS_DIVERGED, step
        for g in range(nd):
            k2d = o_st[g]
            k2w = (p_m[g] - p_e[g] - dcoef[g] * o_st[g]) / m[g]
            kacc_d[g] += 2.0 * k2d
            kacc_w[g] += 2.0 * k2w
            d_st[g] = delta[g] + 0.5 * h * k2d
            o_st[g] = omega[g] + 0.5 * h * k2w

        # k3
        ok, _, _ = stage_solve(y_ll, lu, piv, y_lg, y_gl, y_gg, e_mag, d_st,
                               delta_fix, out_p, lv_v, v, p_e, tol, max_iter, 0)
        if not ok:
            return STATUS_DIVERGED, step
        for g in range(nd):
            k3d = o_st[g]
            k3w = (p_m[g] - p_e[g] - dcoef[g] * o_st[g]) / m[g]
            kacc_d[g] += 2.0 * k3d
            kacc_w[g] += 2.0 * k3w
            d_st[g] = delta[g] + h * k3d
            o_st[g] = omega[g] + h * k3w

        # k4
        ok, _, _ = stage_solve(y_ll, lu, piv, y_lg, y_gl, y_gg, e_mag, d_st,
                               delta_fix, out_p, lv_v, v, p_e, tol, max_iter, 0)
        if not ok:
            return STATUS_DIVERGED, step
        for g in range(nd):
            k4d = o_st[g]
            k4w = (p_m[g] - p_e[g] - dcoef[g] * o_st[g]) / m[g]
            delta[g] += h / 6.0 * (kacc_d[g] + k4d)
            omega[g] += h / 6.0 * (kacc_w[g] + k4w)

        # Consistent solve at the new state (controller output unchanged yet)
        ok, _, _ = stage_solve(y_ll, lu, piv, y_lg, y_gl, y_gg, e_mag, delta,
                               delta_fix, out_p, lv_v, v, p_e, tol, max_iter, 0)
        if not ok:
            return STATUS_DIVERGED, step

        # Unwrapped bus angles (per-step increments are well below pi)
        for i in range(n):
            cr = v[i].real * v_old[i].real + v[i].imag * v_old[i].imag
            ci = v[i].imag * v_old[i].real - v[i].real * v_old[i].imag
            theta_acc[i] += np.arctan2(ci, cr)

        # EV-group measurement, trigger and output update, once per step
        if ctrl_idx.shape[0] > 0:
            a = np.exp(-h / tw)
            changed = False
            for kk in range(ctrl_idx.shape[0]):
                i = ctrl_idx[kk]
                x = a * lpf_theta[i] + (1.0 - a) * theta_acc[i]
                lpf_theta[i] = x
                df = (theta_acc[i] - x) / (tw * two_pi)
                raw = (df - df_prev[i]) / h
                dfdt_f[i] = a * dfdt_f[i] + (1.0 - a) * raw
                df_prev[i] = df
                if ctrl_on[i] == 0:
                    if abs(dfdt_f[i]) >= act_dfdt:
                        ctrl_on[i] = 1
                else:
                    if abs(df) < sleep_df and abs(dfdt_f[i]) < sleep_dfdt:
                        ctrl_on[i] = 0
                if ctrl_on[i] == 1:
                    p = h_pu[i] * df
                    cap = f_sat * h_pu[i]
                    if p > cap:
                        p = cap
                    elif p < -cap:
                        p = -cap
                else:
                    p = 0.0
                if p != out_p[i]:
                    out_p[i] = p
                    changed = True
            if changed:
                ok, _, _ = stage_solve(y_ll, lu, piv, y_lg, y_gl, y_gg, e_mag,
                                       delta, delta_fix, out_p, lv_v, v, p_e,
                                       tol, max_iter, 0)
                if not ok:
                    return STATUS_DIVERGED, step

    return STATUS_OK, total
