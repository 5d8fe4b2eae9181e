"""Differentiating the completion solve.

Three routes to dz*/dx are provided and cross-check each other:

* exact implicit Jacobians at a converged state, either through the
  residual (solve J_z \\ J_x) or through the fixed-point map
  (solve (I - dT/dz) \\ dT/dx);
* the truncated K-step chain through the recorded refinement steps,
  which is what training actually uses;
* central finite differences, kept around as the oracle.

The decoupled sweep T is differentiated analytically through both
half-steps, including the quotient-rule terms from dividing mismatch by
voltage (these vanish at a fixed point but matter on the approach).  The
Newton refinement uses the frozen-Jacobian convention: the factorized
matrix is treated as a constant, which zeroes the step's dependence on
its entry state and leaves -J^-1 (dh/dx).
"""

import numpy as np
import scipy.linalg

from . import pf


def finite_diff_jacobian(fn, at, step=1e-6):
    """Central-difference Jacobian of a vector function; the test oracle."""
    at = np.asarray(at, dtype=float)
    f0 = np.asarray(fn(at), dtype=float)
    jac = np.zeros((f0.size, at.size))
    for k in range(at.size):
        hi = at.copy()
        lo = at.copy()
        hi[k] += step
        lo[k] -= step
        jac[:, k] = (np.asarray(fn(hi), float) - np.asarray(fn(lo), float)) / (2 * step)
    return jac


def exact_implicit_jacobian_h(grid, z, x, d):
    """dz*/dx from the residual form: -(dh/dz)^-1 (dh/dx) at h(z,x,d)=0."""
    del d  # the residual Jacobians do not depend on demand
    jz = pf.pf_jacobian_z(grid, z, x)
    jx = pf.pf_jacobian_x(grid, z, x)
    lu = scipy.linalg.lu_factor(jz)
    return -scipy.linalg.lu_solve(lu, jx)


def _step_linearization(grid, factors, z, x, d):
    """Linearize one decoupled sweep around z.

    Returns the pieces both directions need: the mid state after the angle
    half-step, du/d(z,x) at the entry state, dw/d(z_mid,x) at the mid
    state, and the clamp mask of the magnitude half-step.
    """
    part = grid.part
    npq = part.pvpq.size
    nd = part.load.size
    ng = part.gen.size

    h = pf.completion_residual(grid, z, x, d)
    vm, _ = pf.full_state(grid, z, x)
    jz = pf.pf_jacobian_z(grid, z, x)
    jx = pf.pf_jacobian_x(grid, z, x)
    vp = vm[part.pvpq]
    du_dz = jz[:npq, :] / vp[:, None]
    du_dx = jx[:npq, :] / vp[:, None]
    # quotient rule: u_i = h_i / V_b, and V_b is itself a variable
    for i, b in enumerate(part.pvpq):
        b = int(b)
        corr = h[i] / (vm[b] * vm[b])
        if b in part.pos_in_load:
            du_dz[i, npq + part.pos_in_load[b]] -= corr
        else:
            du_dx[i, ng + part.pos_in_grv[b]] -= corr

    z_mid = z.copy()
    z_mid[:npq] = z[:npq] - factors.solve_bp(h[:npq] / vp)

    h1 = pf.completion_residual(grid, z_mid, x, d)
    jz1 = pf.pf_jacobian_z(grid, z_mid, x)
    jx1 = pf.pf_jacobian_x(grid, z_mid, x)
    vl = vm[part.load]
    dw_dzmid = jz1[npq:, :] / vl[:, None]
    dw_dx = jx1[npq:, :] / vl[:, None]
    for j in range(nd):
        dw_dzmid[j, npq + j] -= h1[npq + j] / (vl[j] * vl[j])

    v_new = z_mid[npq:] - factors.solve_bpp(h1[npq:] / vl)
    clamped = (v_new < pf.V_CLAMP[0]) | (v_new > pf.V_CLAMP[1])
    return z_mid, du_dz, du_dx, dw_dzmid, dw_dx, clamped


def fdpf_step_jacobians(grid, factors, z, x, d):
    """Analytic (dT/dz, dT/dx) of one decoupled sweep at state z."""
    part = grid.part
    npq = part.pvpq.size
    n = part.n_state
    m = part.n_decision
    _, du_dz, du_dx, dw_dzmid, dw_dx, clamped = _step_linearization(
        grid, factors, z, x, d)

    dtp_dz = -factors.solve_bp(du_dz)
    dtp_dz[:, :npq] += np.eye(npq)
    dtp_dx = -factors.solve_bp(du_dx)

    dw_dz = dw_dzmid[:, :npq] @ dtp_dz
    dw_dz[:, npq:] += dw_dzmid[:, npq:]
    dw_dx_tot = dw_dzmid[:, :npq] @ dtp_dx + dw_dx

    dv_dz = -factors.solve_bpp(dw_dz)
    dv_dz[:, npq:] += np.eye(n - npq)
    dv_dx = -factors.solve_bpp(dw_dx_tot)
    dv_dz[clamped, :] = 0.0
    dv_dx[clamped, :] = 0.0

    dtdz = np.empty((n, n))
    dtdz[:npq] = dtp_dz
    dtdz[npq:] = dv_dz
    dtdx = np.empty((n, m))
    dtdx[:npq] = dtp_dx
    dtdx[npq:] = dv_dx
    return dtdz, dtdx


def exact_implicit_jacobian_T(grid, factors, z, x, d):
    """dz*/dx from the fixed-point form: (I - dT/dz)^-1 dT/dx."""
    dtdz, dtdx = fdpf_step_jacobians(grid, factors, z, x, d)
    a = np.eye(dtdz.shape[0]) - dtdz
    return scipy.linalg.solve(a, dtdx)


def kstep_jacobian(grid, factors, tape, x, d):
    """Truncated dz/dx through the recorded refinement.

    Decoupled refinement chains J <- dT/dx + dT/dz J across the recorded
    states (the solver entry state carries no gradient).  A Newton step
    under the frozen-Jacobian convention resets the chain, leaving
    -J^-1 dh/dx at its entry state.
    """
    part = grid.part
    if tape.kind == "nr":
        if not tape.states:
            return np.zeros((part.n_state, part.n_decision))
        z_e = tape.states[-1]
        jx = pf.pf_jacobian_x(grid, z_e, x)
        lu = tape.nr_lu
        if lu is None:
            lu = scipy.linalg.lu_factor(pf.pf_jacobian_z(grid, z_e, x))
        return -scipy.linalg.lu_solve(lu, jx)
    if tape.kind == "fdpf":
        jac = np.zeros((part.n_state, part.n_decision))
        for z_i in tape.states:
            dtdz, dtdx = fdpf_step_jacobians(grid, factors, z_i, x, d)
            jac = dtdx + dtdz @ jac
        return jac
    if tape.kind == "none":
        return np.zeros((part.n_state, part.n_decision))
    raise ValueError("unknown tape kind %r" % tape.kind)


def refinement_vjp(grid, factors, tape, x, d, cot):
    """x-cotangent of the refinement: cot^T (dz/dx) without forming dz/dx.

    Walks the recorded steps in reverse with transpose solves against the
    factorized decoupled matrices (or the stored Newton factor).
    """
    part = grid.part
    npq = part.pvpq.size
    g = np.zeros(part.n_decision)
    if tape.kind == "nr":
        if not tape.states:
            return g
        z_e = tape.states[-1]
        lu = tape.nr_lu
        if lu is None:
            lu = scipy.linalg.lu_factor(pf.pf_jacobian_z(grid, z_e, x))
        y = scipy.linalg.lu_solve(lu, cot, trans=1)
        return -pf.pf_jacobian_x(grid, z_e, x).T @ y
    if tape.kind == "none":
        return g
    if tape.kind != "fdpf":
        raise ValueError("unknown tape kind %r" % tape.kind)

    ct = cot[:npq].copy()
    cv = cot[npq:].copy()
    for z_i in reversed(tape.states):
        _, du_dz, du_dx, dw_dzmid, dw_dx, clamped = _step_linearization(
            grid, factors, z_i, x, d)
        cv = cv.copy()
        cv[clamped] = 0.0
        c_w = -factors.solve_bpp(cv, trans=True)
        ctp = ct + dw_dzmid[:, :npq].T @ c_w
        cv_mid = cv + dw_dzmid[:, npq:].T @ c_w
        g += dw_dx.T @ c_w
        c_u = -factors.solve_bp(ctp, trans=True)
        ct = ctp + du_dz[:, :npq].T @ c_u
        cv = cv_mid + du_dz[:, npq:].T @ c_u
        g += du_dx.T @ c_u
    return g


def chained_state_jacobian(grid, factors, states, x, d):
    """Product of per-step dT/dz over a window of entry states."""
    part = grid.part
    prod = np.eye(part.n_state)
    for z_i in states:
        dtdz, _ = fdpf_step_jacobians(grid, factors, z_i, x, d)
        prod = dtdz @ prod
    return prod
