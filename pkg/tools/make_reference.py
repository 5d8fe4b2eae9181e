#!/usr/bin/env python3
"""Produce reference optimal-dispatch costs with a general NLP solver.

Solves the full AC optimal dispatch per demand sample with SLSQP over
y = [va at non-slack buses, vm everywhere, pg, qg]: quadratic cost,
bus balance equalities, voltage/dispatch boxes and squared apparent-flow
caps.  Analytic Jacobians throughout.  Output is the CSV consumed by the
--refs options of the main CLI (rows: sample index, cost).

This is a maintainer tool, deliberately independent of the package's
solver stack (only the grid/case layer is shared) so its optima can
serve as an external yardstick.  Run from the repository root:

    python3 tools/make_reference.py data/case57.m --count 1000 --seed 7 \
        --split test --out data/case57_desk_refs.csv
"""

import argparse
import sys
import time

import numpy as np
from scipy.optimize import minimize

sys.path.insert(0, "src")

from opflearn import _kernels, caseio, grid as grid_mod  # noqa: E402


def build_problem(grid):
    n = grid.n_bus
    ng = grid.n_gen
    part = grid.part
    ns = [i for i in range(n) if i not in set(part.slack.tolist())]
    ns = np.array(ns, dtype=int)

    def split(y):
        va = np.full(n, grid.slack_angle)
        va[ns] = y[:ns.size]
        vm = y[ns.size:ns.size + n]
        pg = y[ns.size + n:ns.size + n + ng]
        qg = y[ns.size + n + ng:]
        return va, vm, pg, qg

    def objective(y):
        _, _, pg, _ = split(y)
        mw = pg * grid.base_mva
        c = grid.cost_coeffs
        return float(np.sum(c[:, 0] * mw * mw + c[:, 1] * mw + c[:, 2]))

    def objective_grad(y):
        _, _, pg, _ = split(y)
        g = np.zeros(y.size)
        mw = pg * grid.base_mva
        g[ns.size + n:ns.size + n + ng] = (
            2 * grid.cost_coeffs[:, 0] * mw + grid.cost_coeffs[:, 1]
        ) * grid.base_mva
        return g

    def balance(y, d):
        va, vm, pg, qg = split(y)
        p, q = _kernels.np_injections(grid.gbus, grid.bbus, vm, va)
        pg_bus = np.zeros(n)
        qg_bus = np.zeros(n)
        pg_bus[grid.gen_bus] = pg
        qg_bus[grid.gen_bus] = qg
        return np.concatenate([p - (pg_bus - d[:n]), q - (qg_bus - d[n:])])

    def balance_jac(y, d):
        va, vm, _, _ = split(y)
        dpdt, dpdv, dqdt, dqdv = _kernels.np_injection_jacobians(
            grid.gbus, grid.bbus, vm, va)
        jac = np.zeros((2 * n, y.size))
        jac[:n, :ns.size] = dpdt[:, ns]
        jac[:n, ns.size:ns.size + n] = dpdv
        jac[n:, :ns.size] = dqdt[:, ns]
        jac[n:, ns.size:ns.size + n] = dqdv
        for k, b in enumerate(grid.gen_bus):
            jac[b, ns.size + n + k] = -1.0
            jac[n + b, ns.size + n + ng + k] = -1.0
        return jac

    rated = np.where(grid.rated)[0]
    cap2 = grid.rate_a[rated] ** 2
    flow_args = (grid.fbus, grid.tbus,
                 grid.yff.real, grid.yff.imag, grid.yft.real, grid.yft.imag,
                 grid.ytf.real, grid.ytf.imag, grid.ytt.real, grid.ytt.imag)

    def flow_margin(y):
        va, vm, _, _ = split(y)
        pfl, qfl, ptl, qtl = _kernels.np_branch_flows(*flow_args, vm, va)
        return np.concatenate([cap2 - pfl[rated] ** 2 - qfl[rated] ** 2,
                               cap2 - ptl[rated] ** 2 - qtl[rated] ** 2])

    def flow_margin_jac(y):
        va, vm, _, _ = split(y)
        pfl, qfl, ptl, qtl = _kernels.np_branch_flows(*flow_args, vm, va)
        (dpf_dvf, dpf_dvt, dpf_dth, dqf_dvf, dqf_dvt, dqf_dth,
         dpt_dvf, dpt_dvt, dpt_dth, dqt_dvf, dqt_dvt, dqt_dth) = \
            _kernels.np_branch_flow_partials(*flow_args, vm, va)
        nr = rated.size
        jac = np.zeros((2 * nr, y.size))
        pos_ns = {int(b): i for i, b in enumerate(ns)}
        for row, k in enumerate(rated):
            fb, tb = int(grid.fbus[k]), int(grid.tbus[k])
            for (pv, qv, dp_vf, dp_vt, dp_th, dq_vf, dq_vt, dq_th, out) in (
                (pfl[k], qfl[k], dpf_dvf[k], dpf_dvt[k], dpf_dth[k],
                 dqf_dvf[k], dqf_dvt[k], dqf_dth[k], row),
                (ptl[k], qtl[k], dpt_dvf[k], dpt_dvt[k], dpt_dth[k],
                 dqt_dvf[k], dqt_dvt[k], dqt_dth[k], nr + row),
            ):
                gvf = -2 * (pv * dp_vf + qv * dq_vf)
                gvt = -2 * (pv * dp_vt + qv * dq_vt)
                gth = -2 * (pv * dp_th + qv * dq_th)
                jac[out, ns.size + fb] += gvf
                jac[out, ns.size + tb] += gvt
                if fb in pos_ns:
                    jac[out, pos_ns[fb]] += gth
                if tb in pos_ns:
                    jac[out, pos_ns[tb]] -= gth
        return jac

    bounds = ([(-np.pi, np.pi)] * ns.size
              + [(grid.v_min[i], grid.v_max[i]) for i in range(n)]
              + [(grid.pg_min[k], grid.pg_max[k]) for k in range(ng)]
              + [(grid.qg_min[k], grid.qg_max[k]) for k in range(ng)])

    def initial(d):
        y = np.concatenate([np.full(ns.size, grid.slack_angle), np.ones(n),
                            np.clip(grid.pg_set, grid.pg_min, grid.pg_max),
                            np.zeros(ng)])
        return y

    return split, objective, objective_grad, balance, balance_jac, \
        flow_margin, flow_margin_jac, bounds, initial


def solve_sample(problem, d, y0=None, maxiter=300, ftol=1e-9):
    (split, objective, objective_grad, balance, balance_jac,
     flow_margin, flow_margin_jac, bounds, initial) = problem
    y_start = initial(d) if y0 is None else y0
    cons = [
        {"type": "eq", "fun": balance, "jac": balance_jac, "args": (d,)},
        {"type": "ineq", "fun": flow_margin, "jac": flow_margin_jac},
    ]
    res = minimize(objective, y_start, jac=objective_grad, bounds=bounds,
                   constraints=cons, method="SLSQP",
                   options={"maxiter": maxiter, "ftol": ftol})
    feas = float(np.max(np.abs(balance(res.x, d))))
    flow_min = float(np.min(flow_margin(res.x)))
    return res, feas, flow_min


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("case")
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--scale", type=float, nargs=2, default=(0.8, 1.2))
    ap.add_argument("--split", choices=["train", "test", "all", "nominal"],
                    default="test")
    ap.add_argument("--limit", type=int, default=0,
                    help="cap the number of samples (0 = no cap)")
    ap.add_argument("--out")
    args = ap.parse_args()

    case = caseio.parse_matpower_file(args.case)
    grid = grid_mod.build_grid(case)
    problem = build_problem(grid)

    d_nom = caseio.nominal_demand(case)
    res, feas, fmin = solve_sample(problem, d_nom)
    print("nominal: cost %.2f  success=%s  max|h|=%.2e  min flow margin %.1f"
          % (res.fun, res.success, feas, fmin))
    if args.split == "nominal":
        return 0

    ds = caseio.generate_dataset(case, args.count,
                                 scale_range=tuple(args.scale), seed=args.seed)
    if args.split == "train":
        indices = ds.train_indices
    elif args.split == "test":
        indices = ds.test_indices
    else:
        indices = np.arange(ds.count)
    if args.limit:
        indices = indices[:args.limit]

    costs = {}
    y_warm = res.x
    bad = 0
    t0 = time.time()
    for pos, i in enumerate(indices):
        d = ds.samples[int(i)]
        res_i, feas, fmin = solve_sample(problem, d, y0=y_warm.copy())
        if not res_i.success or feas > 1e-6:
            # retry cold; some warm starts sit on a constraint ridge
            res_i, feas, fmin = solve_sample(problem, d)
        if not res_i.success or feas > 1e-6:
            bad += 1
            print("  sample %d FAILED (status %s, max|h|=%.2e)"
                  % (i, res_i.status, feas))
            continue
        costs[int(i)] = float(res_i.fun)
        y_warm = res_i.x
        if (pos + 1) % 25 == 0:
            print("  %d/%d done (%.1fs)" % (pos + 1, indices.size,
                                            time.time() - t0))
    print("solved %d/%d samples in %.1fs" % (len(costs), indices.size,
                                             time.time() - t0))
    if args.out:
        caseio.write_reference_solutions(args.out, costs)
        print("wrote %s" % args.out)
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
