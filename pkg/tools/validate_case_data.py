"""Validate MATPOWER case data files against their stored power-flow solutions.

The Vm/Va columns in the canonical IEEE case files hold archival solved
voltages (copied from the CDF source by cdf2matp).  Re-solving the power flow
from the stored dispatch and comparing against those columns checks every
impedance, tap, shunt and load entry collectively.  Magnitudes must agree to
file rounding; angles only loosely, since the archival solutions predate
double-precision solvers.  Generator reactive limits are enforced by
PV->PQ switching, as the archival solutions did.

The solver here is deliberately independent of the package sources: complex
Ybus, polar mismatch, and scipy.optimize.fsolve with numerical
differentiation.

Usage: python3 tools/validate_case_data.py data/case57.m [more cases...]
"""

import re
import sys

import numpy as np
from scipy.optimize import fsolve


def read_matrix(text, name):
    m = re.search(r"mpc\.%s\s*=\s*\[(.*?)\];" % name, text, re.S)
    if m is None:
        raise ValueError("matrix %s not found" % name)
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].strip().rstrip(";")
        if not line:
            continue
        rows.append([float(tok) for tok in line.split()])
    return np.array(rows)


def load_case(path):
    text = open(path).read()
    base = float(re.search(r"mpc\.baseMVA\s*=\s*([\d.]+)\s*;", text).group(1))
    return {
        "base": base,
        "bus": read_matrix(text, "bus"),
        "gen": read_matrix(text, "gen"),
        "branch": read_matrix(text, "branch"),
    }


def build_ybus(case):
    bus, branch, base = case["bus"], case["branch"], case["base"]
    nb = bus.shape[0]
    idx = {int(b): i for i, b in enumerate(bus[:, 0])}
    Y = np.zeros((nb, nb), dtype=complex)
    for row in branch:
        if row[10] == 0:
            continue
        f, t = idx[int(row[0])], idx[int(row[1])]
        ys = 1.0 / (row[2] + 1j * row[3])
        bc = row[4]
        tau = row[8] if row[8] != 0 else 1.0
        tap = tau * np.exp(1j * np.deg2rad(row[9]))
        Y[f, f] += (ys + 1j * bc / 2) / (tau * tau)
        Y[t, t] += ys + 1j * bc / 2
        Y[f, t] += -ys / np.conj(tap)
        Y[t, f] += -ys / tap
    for i in range(nb):
        Y[i, i] += (bus[i, 4] + 1j * bus[i, 5]) / base
    return Y, idx


def solve_pf(case, enforce_qlims=True):
    bus, gen, base = case["bus"], case["gen"], case["base"]
    Y, idx = build_ybus(case)
    nb = bus.shape[0]
    types = bus[:, 1].astype(int)
    slack = np.where(types == 3)[0]

    Pspec = -bus[:, 2] / base
    Qspec = -bus[:, 3] / base
    vset = np.ones(nb)
    qmin = np.zeros(nb)
    qmax = np.zeros(nb)
    hasgen = np.zeros(nb, bool)
    for row in gen:
        if row[7] == 0:
            continue
        i = idx[int(row[0])]
        Pspec[i] += row[1] / base
        vset[i] = row[5]
        qmin[i] += row[4] / base
        qmax[i] += row[3] / base
        hasgen[i] = True

    fixed_q = {}
    for _ in range(12):
        pv = np.array([i for i in range(nb) if types[i] == 2 and i not in fixed_q])
        pq = np.array(sorted([i for i in range(nb) if types[i] == 1] + list(fixed_q)))
        pvpq = np.sort(np.concatenate([pv, pq])).astype(int)
        Qs = Qspec.copy()
        for i, q in fixed_q.items():
            Qs[i] += q
        Vm = np.ones(nb)
        Va = np.zeros(nb)
        Vm[slack] = vset[slack]
        Vm[pv] = vset[pv]
        Va[slack] = np.deg2rad(bus[slack, 8])

        def residual(u):
            vm = Vm.copy()
            va = Va.copy()
            va[pvpq] = u[: pvpq.size]
            vm[pq] = u[pvpq.size :]
            V = vm * np.exp(1j * va)
            S = V * np.conj(Y @ V)
            return np.concatenate(
                [S.real[pvpq] - Pspec[pvpq], S.imag[pq] - Qs[pq]]
            )

        u0 = np.concatenate([Va[pvpq], Vm[pq]])
        u, info, ok, msg = fsolve(residual, u0, full_output=True, xtol=1e-12)
        if ok != 1:
            raise RuntimeError("power flow failed: %s" % msg)
        Va[pvpq] = u[: pvpq.size]
        Vm[pq] = u[pvpq.size :]

        if not enforce_qlims:
            break
        V = Vm * np.exp(1j * Va)
        S = V * np.conj(Y @ V)
        Qg = S.imag + bus[:, 3] / base
        viol = []
        for i in np.where(hasgen & (types == 2))[0]:
            if i in fixed_q:
                continue
            if Qg[i] > qmax[i] + 1e-9:
                viol.append((i, qmax[i]))
            elif Qg[i] < qmin[i] - 1e-9:
                viol.append((i, qmin[i]))
        if not viol:
            break
        for i, q in viol:
            fixed_q[i] = q

    if fixed_q:
        print("  q-limited gens at buses:",
              sorted(int(bus[i, 0]) for i in fixed_q))
    return Vm, np.rad2deg(Va), np.max(np.abs(residual(u)))


def main(paths):
    status = 0
    for path in paths:
        case = load_case(path)
        bus = case["bus"]
        Vm, Va, res = solve_pf(case)
        dvm = np.abs(Vm - bus[:, 7])
        dva = np.abs(Va - bus[:, 8])
        print("%s: residual %.2e  max|dVm| %.2e (bus %d)  max|dVa| %.2e deg (bus %d)"
              % (path, res, dvm.max(), bus[np.argmax(dvm), 0],
                 dva.max(), bus[np.argmax(dva), 0]))
        # Vm is checked to file rounding; Va only loosely (archival angles).
        bad = np.where((dvm > 1.1e-3) | (dva > 0.4))[0]
        if bad.size:
            status = 1
            for i in bad[:20]:
                print("  bus %3d: Vm %.4f vs %.4f   Va %+.3f vs %+.3f"
                      % (bus[i, 0], Vm[i], bus[i, 7], Va[i], bus[i, 8]))
    print("OK" if status == 0 else "MISMATCH")
    return status


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
