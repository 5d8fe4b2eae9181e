"""Power-flow completion and the hybrid fixed-point solver.

Given a decision vector x = [Pg at generator buses, V at generator and
slack buses] and a demand vector d = [Pd; Qd] (all buses, per-unit), the
completion problem finds z = [theta at non-slack buses, V at load buses]
zeroing the active mismatch at non-slack buses and the reactive mismatch
at load buses.  The hybrid solver runs a fixed number of fast-decoupled
guide sweeps from a flat start, then a short recorded refinement (one
Newton step or a few more decoupled sweeps) that the gradient code
differentiates through.

Everything here is deliberately non-throwing on numerical failure: a
diverged or singular solve comes back as a result with converged=False.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels


class SingularJacobian(Exception):
    """Newton matrix could not be factorized at the current state."""


# load-voltage safety box applied after every decoupled magnitude half-step
V_CLAMP = (0.1, 2.5)


@dataclass
class SolverConfig:
    guide_steps: int = 9
    refine: str = "nr"              # "nr" | "fdpf" | "none"
    refine_steps: int = 1
    tolerance: float = 1e-5
    divergence_cap: float = 1e3

    def total_steps(self):
        return self.guide_steps + (self.refine_steps if self.refine != "none" else 0)


@dataclass
class RefinementTape:
    """States entering each recorded refinement step, for the backward pass."""
    kind: str
    states: list = field(default_factory=list)
    nr_lu: tuple = None


@dataclass
class SolveResult:
    z: np.ndarray
    converged: bool
    iterations: int
    trace: np.ndarray               # mismatch inf-norm before/after each step
    clamp_hits: int
    tape: RefinementTape = None

    @property
    def final_mismatch(self):
        return float(self.trace[-1])


@dataclass
class StateBundle:
    """Full operating point: bus voltages plus per-generator dispatch."""
    vm: np.ndarray
    va: np.ndarray
    pg: np.ndarray
    qg: np.ndarray


def flat_start(grid):
    part = grid.part
    z = np.empty(part.n_state)
    z[:part.pvpq.size] = grid.slack_angle
    z[part.pvpq.size:] = 1.0
    return z


def full_state(grid, z, x):
    """Expand (z, x) to bus-level (vm, va) arrays."""
    part = grid.part
    npq = part.pvpq.size
    va = np.full(grid.n_bus, grid.slack_angle)
    va[part.pvpq] = z[:npq]
    vm = np.ones(grid.n_bus)
    vm[part.load] = z[npq:]
    vm[part.grv] = x[part.gen.size:]
    return vm, va


def nominal_decision(grid):
    """Decision vector from the case file's generator setpoints."""
    part = grid.part
    x = np.empty(part.n_decision)
    for k, b in enumerate(grid.gen_bus):
        if int(b) in part.pos_in_gen:
            x[part.pos_in_gen[int(b)]] = grid.pg_set[k]
        x[part.gen.size + part.pos_in_grv[int(b)]] = grid.vg_set[k]
    return x


def completion_residual(grid, z, x, d):
    """Mismatch vector: P rows at non-slack buses, Q rows at load buses."""
    part = grid.part
    vm, va = full_state(grid, z, x)
    p, q = _kernels.injections(grid.gbus, grid.bbus, vm, va)
    n = grid.n_bus
    pd, qd = d[:n], d[n:]
    pg_bus = np.zeros(n)
    pg_bus[part.gen] = x[:part.gen.size]
    h = np.empty(part.n_state)
    h[:part.pvpq.size] = p[part.pvpq] - (pg_bus[part.pvpq] - pd[part.pvpq])
    h[part.pvpq.size:] = q[part.load] + qd[part.load]
    return h


def pf_jacobian_z(grid, z, x):
    """Jacobian of the residual w.r.t. z, dense (n_state x n_state)."""
    part = grid.part
    vm, va = full_state(grid, z, x)
    dpdt, dpdv, dqdt, dqdv = _kernels.injection_jacobians(grid.gbus, grid.bbus,
                                                          vm, va)
    pvpq, pq = part.pvpq, part.load
    top = np.hstack([dpdt[np.ix_(pvpq, pvpq)], dpdv[np.ix_(pvpq, pq)]])
    bot = np.hstack([dqdt[np.ix_(pq, pvpq)], dqdv[np.ix_(pq, pq)]])
    return np.vstack([top, bot])


def pf_jacobian_x(grid, z, x):
    """Jacobian of the residual w.r.t. x, dense (n_state x n_decision)."""
    part = grid.part
    vm, va = full_state(grid, z, x)
    _, dpdv, _, dqdv = _kernels.injection_jacobians(grid.gbus, grid.bbus, vm, va)
    pvpq, pq, grv = part.pvpq, part.load, part.grv
    ng = part.gen.size
    jx = np.zeros((part.n_state, part.n_decision))
    for col, b in enumerate(part.gen):
        jx[part.pos_in_pvpq[int(b)], col] = -1.0
    jx[:pvpq.size, ng:] = dpdv[np.ix_(pvpq, grv)]
    jx[pvpq.size:, ng:] = dqdv[np.ix_(pq, grv)]
    return jx


def mismatch_norm(grid, z, x, d):
    h = completion_residual(grid, z, x, d)
    return float(np.max(np.abs(h)))


def fdpf_step(grid, factors, z, x, d):
    """One decoupled sweep (angle half-step, refreshed magnitude half-step).

    Returns (z_next, clamped) where clamped flags a load-voltage hit on the
    [v_floor, v_ceil] box.
    """
    part = grid.part
    npq = part.pvpq.size
    h = completion_residual(grid, z, x, d)
    vm, va = full_state(grid, z, x)
    u = h[:npq] / vm[part.pvpq]
    z1 = z.copy()
    z1[:npq] = z[:npq] - factors.solve_bp(u)
    h1 = completion_residual(grid, z1, x, d)
    vm1, _ = full_state(grid, z1, x)
    w = h1[npq:] / vm1[part.load]
    z1[npq:] = z1[npq:] - factors.solve_bpp(w)
    clipped = np.clip(z1[npq:], V_CLAMP[0], V_CLAMP[1])
    clamped = bool(np.any(clipped != z1[npq:]))
    z1[npq:] = clipped
    return z1, clamped


def nr_step(grid, z, x, d):
    """Full Newton step; returns (z_next, lu) for the backward transpose solve."""
    h = completion_residual(grid, z, x, d)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            j = pf_jacobian_z(grid, z, x)
        lu = scipy.linalg.lu_factor(j)
    except ZeroDivisionError:
        # compiled kernel objects to V = 0 where numpy would emit inf
        raise SingularJacobian("zero voltage magnitude") from None
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        # lu_factor rejects non-finite entries with ValueError
        raise SingularJacobian(str(exc)) from None
    if not np.all(np.isfinite(lu[0])):
        raise SingularJacobian("non-finite factor")
    step = scipy.linalg.lu_solve(lu, h)
    return z - step, lu


def _diverged(grid, z, x, d, cap):
    h = completion_residual(grid, z, x, d)
    hmax = float(np.max(np.abs(h))) if np.all(np.isfinite(h)) else np.inf
    return hmax, (not np.isfinite(hmax)) or hmax > cap


def hybrid_solve(grid, factors, x, d, cfg=None, record=False):
    """Guide sweeps from a flat start, then the recorded refinement.

    The guide phase always runs the configured number of sweeps (no early
    exit) so the entry state of the refinement is a smooth function of x.
    Divergence (mismatch above cfg.divergence_cap or non-finite) stops the
    solve and is reported through converged=False, never an exception.
    """
    cfg = cfg or SolverConfig()
    z = flat_start(grid)
    hmax, bad = _diverged(grid, z, x, d, cfg.divergence_cap)
    trace = [hmax]
    clamp_hits = 0
    steps = 0
    tape = RefinementTape(kind=cfg.refine) if record else None

    def result(z, conv):
        return SolveResult(z=z, converged=conv, iterations=steps,
                           trace=np.array(trace), clamp_hits=clamp_hits,
                           tape=tape)

    if bad:
        return result(z, False)
    for _ in range(cfg.guide_steps):
        z, clamped = fdpf_step(grid, factors, z, x, d)
        clamp_hits += clamped
        steps += 1
        hmax, bad = _diverged(grid, z, x, d, cfg.divergence_cap)
        trace.append(hmax)
        if bad:
            return result(z, False)

    if cfg.refine == "nr":
        for _ in range(cfg.refine_steps):
            if record:
                tape.states.append(z.copy())
            try:
                z, lu = nr_step(grid, z, x, d)
            except SingularJacobian:
                return result(z, False)
            if record:
                tape.nr_lu = lu
            steps += 1
            hmax, bad = _diverged(grid, z, x, d, cfg.divergence_cap)
            trace.append(hmax)
            if bad:
                return result(z, False)
    elif cfg.refine == "fdpf":
        for _ in range(cfg.refine_steps):
            if record:
                tape.states.append(z.copy())
            z, clamped = fdpf_step(grid, factors, z, x, d)
            clamp_hits += clamped
            steps += 1
            hmax, bad = _diverged(grid, z, x, d, cfg.divergence_cap)
            trace.append(hmax)
            if bad:
                return result(z, False)
    elif cfg.refine != "none":
        raise ValueError("unknown refinement %r" % cfg.refine)

    return result(z, trace[-1] < cfg.tolerance)


def post_complete(grid, z, x, d):
    """Dependent dispatch [Pg at slack, Qg at slack+generator buses]."""
    part = grid.part
    vm, va = full_state(grid, z, x)
    p, q = _kernels.injections(grid.gbus, grid.bbus, vm, va)
    n = grid.n_bus
    pd, qd = d[:n], d[n:]
    zt = np.empty(part.slack.size + part.grv.size)
    zt[:part.slack.size] = p[part.slack] + pd[part.slack]
    zt[part.slack.size:] = q[part.grv] + qd[part.grv]
    return zt


def assemble_bundle(grid, z, x, ztilde):
    part = grid.part
    vm, va = full_state(grid, z, x)
    pg = np.empty(grid.n_gen)
    for k, b in enumerate(grid.gen_bus):
        b = int(b)
        if b in part.pos_in_slack:
            pg[k] = ztilde[part.pos_in_slack[b]]
        else:
            pg[k] = x[part.pos_in_gen[b]]
    qg = ztilde[part.slack.size:].copy()   # grv order == gen_bus order
    return StateBundle(vm=vm, va=va, pg=pg, qg=qg)


def disassemble_bundle(grid, bundle):
    """Inverse of assemble_bundle; exact round-trip."""
    part = grid.part
    x = np.empty(part.n_decision)
    zt = np.empty(part.slack.size + part.grv.size)
    for k, b in enumerate(grid.gen_bus):
        b = int(b)
        if b in part.pos_in_slack:
            zt[part.pos_in_slack[b]] = bundle.pg[k]
        else:
            x[part.pos_in_gen[b]] = bundle.pg[k]
    x[part.gen.size:] = bundle.vm[part.grv]
    zt[part.slack.size:] = bundle.qg
    npq = part.pvpq.size
    z = np.empty(part.n_state)
    z[:npq] = bundle.va[part.pvpq]
    z[npq:] = bundle.vm[part.load]
    return x, z, zt


def branch_flows(grid, vm, va):
    """(pf, qf, pt, qt) per in-service branch, per-unit."""
    return _kernels.branch_flows(
        grid.fbus, grid.tbus,
        grid.yff.real, grid.yff.imag, grid.yft.real, grid.yft.imag,
        grid.ytf.real, grid.ytf.imag, grid.ytt.real, grid.ytt.imag,
        vm, va)


def solve_case(grid, factors, x, d, cfg=None, record=False):
    """hybrid_solve + post-completion, bundled."""
    res = hybrid_solve(grid, factors, x, d, cfg, record=record)
    zt = post_complete(grid, res.z, x, d)
    return assemble_bundle(grid, res.z, x, zt), res
