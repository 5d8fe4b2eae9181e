"""Command-line entry points.

Every artifact-producing subcommand writes a manifest.json next to its
outputs echoing the resolved configuration and library versions, so a
run can be reproduced from the output directory alone.  Exit codes:
0 success, 1 operational failure (parse error, diverged solve, failed
check), 2 usage errors (argparse).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, caseio, evaluate, grid as grid_mod
from . import model as model_mod
from . import pf
from . import train as train_mod

log = logging.getLogger("opflearn")


def _versions():
    import scipy
    out = {"opflearn": __version__, "numpy": np.__version__,
           "scipy": scipy.__version__}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    from . import _kernels
    out["kernels"] = "numba" if _kernels.USING_NUMBA else "numpy"
    return out


def _write_manifest(outdir, command, config):
    payload = {"command": command, "config": config, "versions": _versions()}
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(args):
    out = args.out or os.environ.get("OPFLEARN_OUTDIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_grid(path):
    case = caseio.parse_matpower_file(path)
    return case, grid_mod.build_grid(case)


def _solver_config_from(args):
    return pf.SolverConfig(guide_steps=args.guide, refine=args.refine,
                           refine_steps=args.refine_steps,
                           tolerance=args.tol)


def cmd_parse(args):
    case, grid = _load_grid(args.case)
    part = grid.part
    print("%s: %d buses, %d generators, %d branches, n=%d, m=%d"
          % (case.name, grid.n_bus, grid.n_gen, grid.fbus.size,
             part.n_state, part.n_decision))
    if args.verbose:
        print("slack=%s gen_buses=%s" % (
            [int(grid.labels[i]) for i in part.slack],
            [int(grid.labels[i]) for i in part.gen]))
        print("demand %.1f MW / %.1f MVAr on base %.0f MVA"
              % (grid.pd.sum() * grid.base_mva,
                 grid.qd.sum() * grid.base_mva, grid.base_mva))
    return 0


def cmd_pf(args):
    case, grid = _load_grid(args.case)
    factors = grid_mod.build_fdpf_matrices(grid)
    d = caseio.nominal_demand(case)
    x = pf.nominal_decision(grid)

    if args.method == "hybrid":
        cfg = _solver_config_from(args)
        res = pf.hybrid_solve(grid, factors, x, d, cfg)
    else:
        z = pf.flat_start(grid)
        trace = [pf.mismatch_norm(grid, z, x, d)]
        ok = True
        for _ in range(args.max_iter):
            if trace[-1] < args.tol:
                break
            try:
                if args.method == "nr":
                    z, _ = pf.nr_step(grid, z, x, d)
                else:
                    z, _ = pf.fdpf_step(grid, factors, z, x, d)
            except pf.SingularJacobian:
                ok = False
                break
            trace.append(pf.mismatch_norm(grid, z, x, d))
            if not np.isfinite(trace[-1]) or trace[-1] > 1e3:
                ok = False
                break
        res = pf.SolveResult(z=z, converged=ok and trace[-1] < args.tol,
                             iterations=len(trace) - 1,
                             trace=np.array(trace), clamp_hits=0)

    zt = pf.post_complete(grid, res.z, x, d)
    bundle = pf.assemble_bundle(grid, res.z, x, zt)
    cost = train_mod.objective_cost(grid, bundle.pg)
    print("%s %s: converged=%s iterations=%d final_mismatch=%.3e"
          % (case.name, args.method, res.converged, res.iterations,
             res.final_mismatch))
    print("slack Pg %.4f pu, total Pg %.2f MW, cost %.2f/h"
          % (zt[0], bundle.pg.sum() * grid.base_mva, cost))
    if args.verbose:
        print("trace: " + " ".join("%.2e" % v for v in res.trace))
        print("V range [%.4f, %.4f], angle range [%.2f, %.2f] deg"
              % (bundle.vm.min(), bundle.vm.max(),
                 np.rad2deg(bundle.va.min()), np.rad2deg(bundle.va.max())))
    return 0 if res.converged else 1


def cmd_gen_data(args):
    case, grid = _load_grid(args.case)
    ds = caseio.generate_dataset(case, args.count,
                                 scale_range=(args.scale[0], args.scale[1]),
                                 split_fraction=args.split, seed=args.seed)
    out = _outdir(args)
    path = os.path.join(out, args.name)
    caseio.save_dataset(ds, path)
    _write_manifest(out, "gen-data", {
        "case": args.case, "count": args.count, "scale": list(args.scale),
        "split": args.split, "seed": args.seed, "file": args.name})
    print("wrote %d samples (%d train / %d test) to %s"
          % (ds.count, ds.train_indices.size, ds.test_indices.size, path))
    return 0


def _load_refs(path):
    return caseio.load_reference_solutions(path) if path else None


def cmd_train(args):
    case, grid = _load_grid(args.case)
    factors = grid_mod.build_fdpf_matrices(grid)
    cfg = train_mod.TrainConfig.from_json(args.config) if args.config \
        else train_mod.TrainConfig()
    if args.data:
        ds = caseio.load_dataset(args.data)
    else:
        ds = caseio.generate_dataset(case, args.count, seed=cfg.seed)
    refs = _load_refs(args.refs)
    out = _outdir(args)

    def progress(epoch, train_rec, test_rec):
        if epoch % args.log_every == 0:
            log.info("epoch %d: train cost %.1f eq_max %.2e ineq_viol %d | "
                     "test cost %.1f ineq_viol %d", epoch,
                     train_rec.objective_cost, train_rec.eq_max_mismatch,
                     train_rec.ineq_viol_num, test_rec.objective_cost,
                     test_rec.ineq_viol_num)

    try:
        result = train_mod.primal_dual_train(grid, factors, ds, cfg,
                                             refs=refs, callback=progress)
    except train_mod.TrainingDiverged as exc:
        print("training aborted: %s" % exc, file=sys.stderr)
        return 1

    model_mod.save_checkpoint(result.model, os.path.join(out, "checkpoint.npz"))
    np.savez(os.path.join(out, "duals.npz"), lam=result.duals.lam,
             nu=result.duals.nu)
    caseio.write_metrics_csv(os.path.join(out, "metrics_train.csv"),
                             result.train_records)
    caseio.write_metrics_csv(os.path.join(out, "metrics_test.csv"),
                             result.test_records)
    _write_manifest(out, "train", {
        "case": args.case, "data": args.data, "count": args.count,
        "refs": args.refs, "train": cfg.to_dict()})
    last = result.test_records[-1]
    print("trained %d epochs (%d diverged solves): test cost %.2f, "
          "eq_max %.3e, ineq_viol %d"
          % (result.epochs, result.diverged_total, last.objective_cost,
             last.eq_max_mismatch, last.ineq_viol_num))
    return 0


def cmd_eval(args):
    case, grid = _load_grid(args.case)
    factors = grid_mod.build_fdpf_matrices(grid)
    mdl = model_mod.load_checkpoint(args.checkpoint, grid)
    ds = caseio.load_dataset(args.data)
    refs = _load_refs(args.refs)
    cfg = pf.SolverConfig(guide_steps=args.guide, refine=args.refine,
                          refine_steps=args.refine_steps, tolerance=args.tol)
    out = _outdir(args)

    splits = {"train": ds.train_indices, "test": ds.test_indices}
    chosen = ["train", "test"] if args.split == "all" else [args.split]
    records = []
    for pos, name in enumerate(chosen):
        rec = evaluate.evaluate_split(mdl, grid, factors, ds, splits[name],
                                      cfg, refs=refs, epoch=pos,
                                      viol_tol=args.viol_tol,
                                      workers=args.workers)
        records.append(rec)
        gap = ("%.3f%%" % rec.objective_gap_pct
               if rec.objective_gap_pct is not None else "n/a")
        print("%s: cost %.2f gap %s eq_max %.3e ineq_viol %d"
              % (name, rec.objective_cost, gap, rec.eq_max_mismatch,
                 rec.ineq_viol_num))
    caseio.write_metrics_csv(os.path.join(out, "metrics_eval.csv"), records)
    _write_manifest(out, "eval", {
        "case": args.case, "checkpoint": args.checkpoint, "data": args.data,
        "refs": args.refs, "split": args.split, "viol_tol": args.viol_tol})
    return 0


def cmd_estimate_constants(args):
    case, grid = _load_grid(args.case)
    factors = grid_mod.build_fdpf_matrices(grid)
    mdl = model_mod.load_checkpoint(args.checkpoint, grid)
    ds = caseio.load_dataset(args.data)
    duals = train_mod.DualState.zeros(grid)
    if args.duals:
        with np.load(args.duals) as zf:
            duals = train_mod.DualState(lam=zf["lam"].copy(),
                                        nu=zf["nu"].copy())
    k_list = [int(tok) for tok in args.k_list.split(",")]
    indices = ds.test_indices[:args.samples]
    out = _outdir(args)

    rows, constants, n_used = evaluate.alignment_study(
        mdl, grid, factors, ds, indices, duals, k_list,
        guide_steps=args.guide, tolerance=args.tol, seed=args.seed)
    evaluate.write_alignment_csv(os.path.join(out, "alignment.csv"), rows)
    evaluate.write_constants_json(os.path.join(out, "constants.json"),
                                  constants, extra={"samples_used": n_used})
    _write_manifest(out, "estimate-constants", {
        "case": args.case, "checkpoint": args.checkpoint, "data": args.data,
        "duals": args.duals, "k_list": k_list, "samples": args.samples,
        "guide": args.guide, "seed": args.seed})
    print("constants over %d samples: rho1=%.3e sigma_A=%.3e C_g=%.3e "
          "C_z=%.3e d0=%.3e" % (n_used, constants.rho1, constants.sigma_a,
                                constants.c_g, constants.c_z, constants.d0))
    for row in rows:
        print("K=%d cos %.4f+-%.4f relerr %.3e rho_k %.3e eps %.3e bound %s"
              % (row["K_R"], row["cosine_mean"], row["cosine_std"],
                 row["relerr_mean"], row["rho_k"], row["eps_k"],
                 "%.4f" % row["bound"] if np.isfinite(row["bound"]) else "n/a"))
    return 0


def cmd_grad_check(args):
    case, grid = _load_grid(args.case)
    factors = grid_mod.build_fdpf_matrices(grid)
    ds = caseio.generate_dataset(case, max(args.samples, 4), seed=args.seed)
    mdl = model_mod.init_model(grid, hidden=(32, 32), seed=args.seed)
    model_mod.fit_scaler(mdl, ds.samples[ds.train_indices])
    rng = np.random.default_rng(args.seed)
    duals = train_mod.DualState.zeros(grid)
    duals.lam = rng.uniform(0.0, 2.0, duals.lam.size)
    duals.nu = rng.uniform(0.0, 2.0, duals.nu.size)
    cfg = pf.SolverConfig(guide_steps=30, refine="nr", refine_steps=3,
                          tolerance=1e-12)

    worst = 0.0
    for s in range(args.samples):
        d = ds.samples[s]
        gphi, fwd = train_mod.parameter_gradient(mdl, grid, factors, d, duals,
                                                 cfg, mode="exact")
        if gphi is None:
            print("sample %d: solve diverged" % s, file=sys.stderr)
            return 1
        params = model_mod.pack_params(mdl)
        idx = rng.choice(params.size, args.params, replace=False)
        fd = np.zeros(idx.size)
        for j, k in enumerate(idx):
            for sgn in (1.0, -1.0):
                pp = params.copy()
                pp[k] += sgn * args.step
                model_mod.unpack_params(mdl, pp)
                val = train_mod.loss_value(mdl, grid, factors, d, duals, cfg)
                if val is None:
                    print("sample %d: FD probe diverged" % s, file=sys.stderr)
                    return 1
                fd[j] += sgn * val
            fd[j] /= 2 * args.step
        model_mod.unpack_params(mdl, params)
        rel = float(np.linalg.norm(gphi[idx] - fd) / np.linalg.norm(fd))
        worst = max(worst, rel)
        print("sample %d: %d coordinates, rel err %.3e" % (s, idx.size, rel))
    ok = worst < args.tol
    print("grad-check %s (worst rel err %.3e, tol %.1e)"
          % ("passed" if ok else "FAILED", worst, args.tol))
    return 0 if ok else 1


def _add_solver_flags(sp, guide=9, refine="nr", steps=1, tol=1e-5):
    sp.add_argument("--guide", type=int, default=guide)
    sp.add_argument("--refine", choices=["nr", "fdpf", "none"], default=refine)
    sp.add_argument("--refine-steps", type=int, default=steps)
    sp.add_argument("--tol", type=float, default=tol)


def build_parser():
    ap = argparse.ArgumentParser(
        prog="opflearn",
        description="Learned AC dispatch with a differentiable "
                    "power-flow completion layer")
    ap.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("parse", help="parse a case file and show dimensions")
    sp.add_argument("case")
    sp.set_defaults(fn=cmd_parse)

    sp = sub.add_parser("pf", help="solve the completion at the nominal point")
    sp.add_argument("case")
    sp.add_argument("--method", choices=["hybrid", "nr", "fdpf"],
                    default="hybrid")
    sp.add_argument("--max-iter", type=int, default=50)
    _add_solver_flags(sp)
    sp.set_defaults(fn=cmd_pf)

    sp = sub.add_parser("gen-data", help="sample a demand dataset")
    sp.add_argument("case")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--scale", type=float, nargs=2, default=(0.8, 1.2))
    sp.add_argument("--split", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--name", default="dataset.npz")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="run primal-dual training")
    sp.add_argument("case")
    sp.add_argument("--config", help="JSON file of training options")
    sp.add_argument("--data", help="dataset .npz from gen-data")
    sp.add_argument("--count", type=int, default=1000,
                    help="samples to draw when --data is absent")
    sp.add_argument("--refs", help="reference optima CSV for gap metrics")
    sp.add_argument("--log-every", type=int, default=10)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    sp.add_argument("case")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--refs")
    sp.add_argument("--split", choices=["train", "test", "all"],
                    default="test")
    sp.add_argument("--viol-tol", type=float, default=1e-4)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out")
    _add_solver_flags(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("estimate-constants",
                        help="alignment study and theorem constants")
    sp.add_argument("case")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--duals")
    sp.add_argument("--samples", type=int, default=20)
    sp.add_argument("--k-list", default="1,2,4,8")
    sp.add_argument("--guide", type=int, default=8)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_estimate_constants)

    sp = sub.add_parser("grad-check",
                        help="compare the analytic gradient to finite "
                             "differences")
    sp.add_argument("case")
    sp.add_argument("--samples", type=int, default=1)
    sp.add_argument("--params", type=int, default=50)
    sp.add_argument("--step", type=float, default=1e-6)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_grad_check)
    return ap


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (caseio.CaseFormatError, grid_mod.GridError,
            model_mod.CheckpointError, FileNotFoundError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
