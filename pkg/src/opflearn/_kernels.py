"""Hot numeric kernels: bus injections, injection Jacobians, branch flows.

Two interchangeable implementations live here.  The numba path compiles
tight loops; the numpy path is fully vectorized and serves both as the
fallback (numba missing or OPFLEARN_PURE_NUMPY=1) and as the agreement
oracle in tests.  Dense matrices are fine at the network sizes this
package targets; the Jacobian assembly cost is dominated by the n x n
trig tables either way.

Public selection happens once at import.  Tests and the benchmark reach
the specific implementations through the np_* / nb_* names.
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("OPFLEARN_PURE_NUMPY", "").strip() in ("1", "true", "yes")


# ---------------------------------------------------------------- numpy path

def np_injections(gb, bb, vm, va):
    """Net complex power injection split into (P, Q), per-unit."""
    th = va[:, None] - va[None, :]
    ct = np.cos(th)
    st = np.sin(th)
    p = vm * ((gb * ct + bb * st) @ vm)
    q = vm * ((gb * st - bb * ct) @ vm)
    return p, q


def np_injection_jacobians(gb, bb, vm, va):
    """Dense partials (dP/dth, dP/dV, dQ/dth, dQ/dV), each n x n."""
    th = va[:, None] - va[None, :]
    ct = np.cos(th)
    st = np.sin(th)
    a = gb * ct + bb * st
    b = gb * st - bb * ct
    p = vm * (a @ vm)
    q = vm * (b @ vm)
    vv = vm[:, None] * vm[None, :]
    dpdt = vv * b
    dpdv = vm[:, None] * a
    dqdt = -vv * a
    dqdv = vm[:, None] * b
    n = vm.size
    i = np.arange(n)
    dii = np.diagonal(bb)
    gii = np.diagonal(gb)
    dpdt[i, i] = -q - dii * vm * vm
    dpdv[i, i] = p / vm + gii * vm
    dqdt[i, i] = p - gii * vm * vm
    dqdv[i, i] = q / vm - dii * vm
    return dpdt, dpdv, dqdt, dqdv


def np_branch_flows(f, t, gff, bff, gft, bft, gtf, btf, gtt, btt, vm, va):
    """Active/reactive flow at both branch ends, from-bus angle reference."""
    vf = vm[f]
    vt = vm[t]
    d = va[f] - va[t]
    c = np.cos(d)
    s = np.sin(d)
    vfvt = vf * vt
    pf = gff * vf * vf + vfvt * (gft * c + bft * s)
    qf = -bff * vf * vf + vfvt * (gft * s - bft * c)
    pt = gtt * vt * vt + vfvt * (gtf * c - btf * s)
    qt = -btt * vt * vt - vfvt * (gtf * s + btf * c)
    return pf, qf, pt, qt


def np_branch_flow_partials(f, t, gff, bff, gft, bft, gtf, btf, gtt, btt, vm, va):
    """Partials of the four end flows w.r.t. (vf, vt, theta_f).

    The theta_t partial is the negative of the theta_f one for every row,
    so only twelve arrays come back: (dpf_dvf, dpf_dvt, dpf_dth, dqf_dvf,
    dqf_dvt, dqf_dth, dpt_dvf, dpt_dvt, dpt_dth, dqt_dvf, dqt_dvt, dqt_dth).
    """
    vf = vm[f]
    vt = vm[t]
    d = va[f] - va[t]
    c = np.cos(d)
    s = np.sin(d)
    vfvt = vf * vt
    dpf_dvf = 2 * gff * vf + vt * (gft * c + bft * s)
    dpf_dvt = vf * (gft * c + bft * s)
    dpf_dth = vfvt * (-gft * s + bft * c)
    dqf_dvf = -2 * bff * vf + vt * (gft * s - bft * c)
    dqf_dvt = vf * (gft * s - bft * c)
    dqf_dth = vfvt * (gft * c + bft * s)
    dpt_dvf = vt * (gtf * c - btf * s)
    dpt_dvt = 2 * gtt * vt + vf * (gtf * c - btf * s)
    dpt_dth = -vfvt * (gtf * s + btf * c)
    dqt_dvf = -vt * (gtf * s + btf * c)
    dqt_dvt = -2 * btt * vt - vf * (gtf * s + btf * c)
    dqt_dth = vfvt * (-gtf * c + btf * s)
    return (dpf_dvf, dpf_dvt, dpf_dth, dqf_dvf, dqf_dvt, dqf_dth,
            dpt_dvf, dpt_dvt, dpt_dth, dqt_dvf, dqt_dvt, dqt_dth)


# ---------------------------------------------------------------- numba path

nb_injections = None
nb_injection_jacobians = None
nb_branch_flows = None
nb_branch_flow_partials = None

if not _FORCE_NUMPY:
    try:
        from numba import njit
    except ImportError:
        njit = None
    if njit is not None:
        @njit(cache=True, nogil=True)
        def _nb_injections(gb, bb, vm, va):
            n = vm.shape[0]
            p = np.zeros(n)
            q = np.zeros(n)
            for i in range(n):
                pi = 0.0
                qi = 0.0
                for j in range(n):
                    th = va[i] - va[j]
                    c = np.cos(th)
                    s = np.sin(th)
                    pi += vm[j] * (gb[i, j] * c + bb[i, j] * s)
                    qi += vm[j] * (gb[i, j] * s - bb[i, j] * c)
                p[i] = vm[i] * pi
                q[i] = vm[i] * qi
            return p, q

        @njit(cache=True, nogil=True)
        def _nb_injection_jacobians(gb, bb, vm, va):
            n = vm.shape[0]
            dpdt = np.zeros((n, n))
            dpdv = np.zeros((n, n))
            dqdt = np.zeros((n, n))
            dqdv = np.zeros((n, n))
            for i in range(n):
                pi = 0.0
                qi = 0.0
                for j in range(n):
                    th = va[i] - va[j]
                    c = np.cos(th)
                    s = np.sin(th)
                    a = gb[i, j] * c + bb[i, j] * s
                    b = gb[i, j] * s - bb[i, j] * c
                    pi += vm[j] * a
                    qi += vm[j] * b
                    if i != j:
                        dpdt[i, j] = vm[i] * vm[j] * b
                        dpdv[i, j] = vm[i] * a
                        dqdt[i, j] = -vm[i] * vm[j] * a
                        dqdv[i, j] = vm[i] * b
                pi *= vm[i]
                qi *= vm[i]
                dpdt[i, i] = -qi - bb[i, i] * vm[i] * vm[i]
                dpdv[i, i] = pi / vm[i] + gb[i, i] * vm[i]
                dqdt[i, i] = pi - gb[i, i] * vm[i] * vm[i]
                dqdv[i, i] = qi / vm[i] - bb[i, i] * vm[i]
            return dpdt, dpdv, dqdt, dqdv

        @njit(cache=True, nogil=True)
        def _nb_branch_flows(f, t, gff, bff, gft, bft, gtf, btf, gtt, btt, vm, va):
            nl = f.shape[0]
            pf = np.zeros(nl)
            qf = np.zeros(nl)
            pt = np.zeros(nl)
            qt = np.zeros(nl)
            for k in range(nl):
                vf = vm[f[k]]
                vt = vm[t[k]]
                d = va[f[k]] - va[t[k]]
                c = np.cos(d)
                s = np.sin(d)
                pf[k] = gff[k] * vf * vf + vf * vt * (gft[k] * c + bft[k] * s)
                qf[k] = -bff[k] * vf * vf + vf * vt * (gft[k] * s - bft[k] * c)
                pt[k] = gtt[k] * vt * vt + vf * vt * (gtf[k] * c - btf[k] * s)
                qt[k] = -btt[k] * vt * vt - vf * vt * (gtf[k] * s + btf[k] * c)
            return pf, qf, pt, qt

        @njit(cache=True, nogil=True)
        def _nb_branch_flow_partials(f, t, gff, bff, gft, bft, gtf, btf, gtt, btt,
                                     vm, va):
            nl = f.shape[0]
            out = np.zeros((12, nl))
            for k in range(nl):
                vf = vm[f[k]]
                vt = vm[t[k]]
                d = va[f[k]] - va[t[k]]
                c = np.cos(d)
                s = np.sin(d)
                out[0, k] = 2 * gff[k] * vf + vt * (gft[k] * c + bft[k] * s)
                out[1, k] = vf * (gft[k] * c + bft[k] * s)
                out[2, k] = vf * vt * (-gft[k] * s + bft[k] * c)
                out[3, k] = -2 * bff[k] * vf + vt * (gft[k] * s - bft[k] * c)
                out[4, k] = vf * (gft[k] * s - bft[k] * c)
                out[5, k] = vf * vt * (gft[k] * c + bft[k] * s)
                out[6, k] = vt * (gtf[k] * c - btf[k] * s)
                out[7, k] = 2 * gtt[k] * vt + vf * (gtf[k] * c - btf[k] * s)
                out[8, k] = -vf * vt * (gtf[k] * s + btf[k] * c)
                out[9, k] = -vt * (gtf[k] * s + btf[k] * c)
                out[10, k] = -2 * btt[k] * vt - vf * (gtf[k] * s + btf[k] * c)
                out[11, k] = vf * vt * (-gtf[k] * c + btf[k] * s)
            return out

        def _nb_partials_tuple(f, t, gff, bff, gft, bft, gtf, btf, gtt, btt, vm, va):
            out = _nb_branch_flow_partials(f, t, gff, bff, gft, bft, gtf, btf,
                                           gtt, btt, vm, va)
            return tuple(out[i] for i in range(12))

        nb_injections = _nb_injections
        nb_injection_jacobians = _nb_injection_jacobians
        nb_branch_flows = _nb_branch_flows
        nb_branch_flow_partials = _nb_partials_tuple

USING_NUMBA = nb_injections is not None

injections = nb_injections if USING_NUMBA else np_injections
injection_jacobians = nb_injection_jacobians if USING_NUMBA else np_injection_jacobians
branch_flows = nb_branch_flows if USING_NUMBA else np_branch_flows
branch_flow_partials = (nb_branch_flow_partials if USING_NUMBA
                        else np_branch_flow_partials)
