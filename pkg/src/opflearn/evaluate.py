"""Evaluation: feasibility metrics, contraction/Lipschitz constant
estimates, and the gradient-alignment study.

The alignment study compares the truncated-refinement parameter gradient
against the exact implicit-function gradient at a tightly converged
state, per refinement depth.  The measured constants feed an a-priori
alignment bound: with eps below one, the cosine between the two
gradients is at least (1 - eps) / (1 + eps).  Lipschitz-type constants
come from difference quotients around the converged state; operator
norms are spectral norms of the assembled Jacobians except the
network-sensitivity norm, which a matrix-free power iteration supplies.
"""

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import diffgrad
from . import model as model_mod
from . import pf
from . import train as train_mod

log = logging.getLogger(__name__)

ALIGNMENT_COLUMNS = [
    "K_R", "cosine_mean", "cosine_std", "relerr_mean", "relerr_std",
    "rho_k", "L_T", "L_J", "C_1", "eps_k", "eps_inf", "bound", "bound_inf",
]


@dataclass
class MetricsRecord:
    epoch: int
    eq_mean_mismatch: float
    eq_max_mismatch: float
    eq_viol_num: int
    ineq_mean_mismatch: float
    ineq_max_mismatch: float
    ineq_viol_num: int
    objective_cost: float
    objective_gap_pct: float = None


def evaluate_split(mdl, grid, factors, dataset, indices, cfg, duals=None,
                   refs=None, epoch=0, viol_tol=1e-4, workers=1):
    """Feasibility/cost metrics of the policy over the given sample rows."""
    del duals  # metrics are dual-free; kept for a uniform call shape
    stats = train_mod._SplitStats(grid)

    def run(i):
        return train_mod.forward_full(mdl, grid, factors, dataset.samples[i],
                                      cfg)

    outs = train_mod._map_ordered(run, [int(i) for i in indices], workers)
    for i, fwd in zip(indices, outs):
        if not fwd.result.converged:
            stats.n_diverged += 1
            continue
        g = train_mod.inequality_values(grid, fwd.bundle)
        h = train_mod.equality_values(grid, fwd.bundle, dataset.samples[i])
        cost = train_mod.objective_cost(grid, fwd.bundle.pg)
        ref_cost = refs.costs.get(int(i)) if refs else None
        stats.add(grid, g, h, cost, viol_tol, ref_cost)
    return stats.record(epoch)


def spectral_norm(a):
    return float(scipy.linalg.svdvals(a)[0])


def chained_radius(mats):
    """Spectral radius of the product applying mats[0] first.

    The radius, not the norm, is the observed per-iteration error decay:
    the sweep Jacobian is non-normal and its norm sits well above 1 on
    ordinary transmission cases even where the iteration contracts, while
    the radius matches the measured geometric convergence rate.
    """
    prod = None
    for m in mats:
        prod = m.copy() if prod is None else m @ prod
    return float(np.max(np.abs(np.linalg.eigvals(prod))))


# ------------------------------------------------------- theorem constants

@dataclass
class TheoremConstants:
    rho1: float          # one-sweep contraction factor (spectral radius)
    rho_k: dict          # refinement depth -> composite contraction factor
    l_t: float           # one-sweep input sensitivity norm
    l_j: float           # Lipschitz constant of the input-Jacobian map
    l_x: float           # Lipschitz constant of the x-gradient map
    l_z: float           # Lipschitz constant of the z-gradient map
    c_z: float           # z-gradient norm at the converged state
    sigma_j: float       # exact solution-Jacobian norm
    c_g: float           # exact parameter-gradient norm
    sigma_a: float       # network sensitivity operator norm
    d0: float            # refinement entry distance to the converged state

    @property
    def c_1(self):
        return self.rho1 * (self.l_x + self.l_z * self.sigma_j) \
            + self.c_z * self.l_j

    @property
    def eps_inf(self):
        if self.rho1 >= 1 or self.c_g == 0:
            return float("inf")
        return (self.sigma_a / self.c_g) * (
            self.rho1 * self.l_t * self.c_z / (1 - self.rho1))

    def eps(self, k):
        return self.eps_inf + (self.sigma_a / self.c_g) * (
            self.rho_k[k] * self.d0 * self.c_1)

    @staticmethod
    def cosine_bound(eps):
        if not np.isfinite(eps) or eps >= 1:
            return float("nan")
        return (1 - eps) / (1 + eps)

    def to_dict(self):
        out = {k: (dict(v) if isinstance(v, dict) else v)
               for k, v in self.__dict__.items()}
        out["c_1"] = self.c_1
        out["eps_inf"] = self.eps_inf
        return out


def _grad_maps(grid, x, d, duals, z):
    """(x-gradient, z-gradient) of the loss at completion state z."""
    zt = pf.post_complete(grid, z, x, d)
    bundle = pf.assemble_bundle(grid, z, x, zt)
    dvm, dva, dpg, dqg = train_mod.loss_state_gradient(grid, bundle, d, duals)
    gx, gz, gzt = train_mod.project_state_gradient(grid, dvm, dva, dpg, dqg)
    jzt_z, jzt_x = train_mod.completion_sensitivities(grid, z, x)
    return gx + jzt_x.T @ gzt, gz + jzt_z.T @ gzt


def _kstep_from(grid, factors, z, x, d, k):
    """Run k sweeps from z and chain the truncated input Jacobian."""
    part = grid.part
    jac = np.zeros((part.n_state, part.n_decision))
    zi = z.copy()
    for _ in range(k):
        dtdz, dtdx = diffgrad.fdpf_step_jacobians(grid, factors, zi, x, d)
        jac = dtdx + dtdz @ jac
        zi, _ = pf.fdpf_step(grid, factors, zi, x, d)
    return jac


def estimate_sigma_a(mdl, cache, iters=20, seed=0):
    """Largest singular value of d(decision)/d(params), matrix-free."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(mdl.lo.size)
    v /= np.linalg.norm(v)
    sigma2 = 0.0
    for _ in range(iters):
        w = model_mod.model_jvp(mdl, cache, model_mod.model_backward(mdl, cache, v))
        sigma2 = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
    return float(np.sqrt(max(sigma2, 0.0)))


def _lipschitz_quotient(fn, z_star, radius, n_dirs, rng):
    """Max difference quotient of a vector map over random directions."""
    base = fn(z_star)
    best = 0.0
    for _ in range(n_dirs):
        u = rng.standard_normal(z_star.size)
        u *= radius / np.linalg.norm(u)
        quot = np.linalg.norm(fn(z_star + u) - base) / radius
        best = max(best, float(quot))
    return best


def alignment_study(mdl, grid, factors, dataset, indices, duals, k_list,
                    guide_steps=8, tolerance=1e-5, tight=None, seed=0,
                    lip_radius=1e-2, lip_dirs=8):
    """Cosines, relative errors and theorem constants over sample rows.

    Returns (rows, constants, n_used): one row dict per refinement depth
    with the aggregated alignment statistics and the bound columns, plus
    the aggregated TheoremConstants.  Constants aggregate conservatively:
    maxima over samples, except the exact gradient norm which takes the
    minimum (it divides the bound).
    """
    tight = tight or pf.SolverConfig(guide_steps=30, refine="nr",
                                     refine_steps=3, tolerance=1e-12)
    k_list = list(k_list)
    cos = {k: [] for k in k_list}
    rel = {k: [] for k in k_list}
    rho_k = {k: 0.0 for k in k_list}
    rho1 = 0.0
    l_t = l_j = l_x = l_z = c_z = sigma_j = sigma_a = d0 = 0.0
    c_g = np.inf
    n_used = 0

    for i in indices:
        d = dataset.samples[int(i)]
        fwd_star = train_mod.forward_full(mdl, grid, factors, d, tight)
        if not fwd_star.result.converged:
            log.warning("sample %d skipped: tight solve diverged", i)
            continue
        z_star = fwd_star.result.z
        x = fwd_star.x
        g_star = train_mod.gradient_from_forward(mdl, grid, factors, d, duals,
                                                 fwd_star, mode="exact")
        ng_star = np.linalg.norm(g_star)
        if ng_star == 0:
            log.warning("sample %d skipped: zero exact gradient", i)
            continue

        entry = None
        per_k_ok = True
        for k in k_list:
            cfg = pf.SolverConfig(guide_steps=guide_steps, refine="fdpf",
                                  refine_steps=k, tolerance=tolerance)
            fwd_k = train_mod.forward_full(mdl, grid, factors, d, cfg,
                                           record=True)
            if not fwd_k.result.converged:
                per_k_ok = False
                break
            g_k = train_mod.gradient_from_forward(mdl, grid, factors, d,
                                                  duals, fwd_k, mode="kstep")
            cos[k].append(float(g_k @ g_star)
                          / (np.linalg.norm(g_k) * ng_star))
            rel[k].append(float(np.linalg.norm(g_k - g_star)) / ng_star)
            tape = fwd_k.result.tape
            entry = tape.states[0]
            mats = []
            for z_i in tape.states:
                dtdz, dtdx = diffgrad.fdpf_step_jacobians(grid, factors, z_i,
                                                          x, d)
                mats.append(dtdz)
                l_t = max(l_t, spectral_norm(dtdx))
                rho1 = max(rho1, chained_radius([dtdz]))
            rho_k[k] = max(rho_k[k], chained_radius(mats))
        if not per_k_ok:
            log.warning("sample %d skipped: budget solve diverged", i)
            continue

        jac_exact = diffgrad.exact_implicit_jacobian_h(grid, z_star, x, d)
        sigma_j = max(sigma_j, spectral_norm(jac_exact))
        gx_star, gz_star = _grad_maps(grid, x, d, duals, z_star)
        c_z = max(c_z, float(np.linalg.norm(gz_star)))
        c_g = min(c_g, float(ng_star))
        sigma_a = max(sigma_a, estimate_sigma_a(mdl, fwd_star.cache,
                                                seed=seed + int(i)))
        d0 = max(d0, float(np.linalg.norm(entry - z_star)))

        rng = np.random.default_rng([seed, int(i)])
        l_x = max(l_x, _lipschitz_quotient(
            lambda zz: _grad_maps(grid, x, d, duals, zz)[0],
            z_star, lip_radius, lip_dirs, rng))
        l_z = max(l_z, _lipschitz_quotient(
            lambda zz: _grad_maps(grid, x, d, duals, zz)[1],
            z_star, lip_radius, lip_dirs, rng))
        l_j = max(l_j, _lipschitz_quotient(
            lambda zz: _kstep_from(grid, factors, zz, x, d, 1).ravel(),
            z_star, lip_radius, lip_dirs, rng))
        n_used += 1

    if n_used == 0:
        raise RuntimeError("alignment study: no usable samples")

    constants = TheoremConstants(rho1=rho1, rho_k=rho_k, l_t=l_t, l_j=l_j,
                                 l_x=l_x, l_z=l_z, c_z=c_z, sigma_j=sigma_j,
                                 c_g=c_g, sigma_a=sigma_a, d0=d0)
    rows = []
    for k in k_list:
        eps_k = constants.eps(k)
        rows.append({
            "K_R": k,
            "cosine_mean": float(np.mean(cos[k])),
            "cosine_std": float(np.std(cos[k])),
            "relerr_mean": float(np.mean(rel[k])),
            "relerr_std": float(np.std(rel[k])),
            "rho_k": rho_k[k],
            "L_T": constants.l_t,
            "L_J": constants.l_j,
            "C_1": constants.c_1,
            "eps_k": eps_k,
            "eps_inf": constants.eps_inf,
            "bound": TheoremConstants.cosine_bound(eps_k),
            "bound_inf": TheoremConstants.cosine_bound(constants.eps_inf),
        })
    return rows, constants, n_used


def write_alignment_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ALIGNMENT_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = {}
            for key in ALIGNMENT_COLUMNS:
                val = row[key]
                if isinstance(val, float):
                    out[key] = "%.17e" % val
                else:
                    out[key] = val
            writer.writerow(out)


def read_alignment_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "K_R" else float(v))
                         for k, v in rec.items()})
    return rows


def write_constants_json(path, constants, extra=None):
    payload = constants.to_dict()
    payload["rho_k"] = {str(k): v for k, v in payload["rho_k"].items()}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
