"""Unsupervised primal-dual training of the dispatch policy.

The loss per sample is the generation cost plus multiplier-weighted
penalties: lambda on hinged inequality violations, nu on absolute bus
power mismatch.  Primal steps run Adam on the network weights through
the solver's recorded refinement (or the exact implicit Jacobian); dual
ascent bumps the multipliers once per outer iteration using the mean
violation profile seen in the last inner epoch.

Inequality rows are ordered [Pg lower, Pg upper, Qg lower, Qg upper,
V lower, V upper, from-end flow, to-end flow]; flows enter squared so
the rows stay differentiable at zero loading.  Equality rows stack the
active balance of every bus, then the reactive balance of every bus;
rows the completion already zeroes contribute nothing (sign(0) = 0) and
the rest is exactly the learning signal.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels, diffgrad
from . import model as model_mod
from . import pf

log = logging.getLogger(__name__)


class TrainingDiverged(Exception):
    """More than half of an epoch's samples failed to solve."""


# ------------------------------------------------------------ loss pieces

def objective_cost(grid, pg):
    """Quadratic generation cost in currency/h; pg per-unit."""
    mw = np.asarray(pg) * grid.base_mva
    c = grid.cost_coeffs
    return float(np.sum(c[:, 0] * mw * mw + c[:, 1] * mw + c[:, 2]))


def inequality_values(grid, bundle):
    """Stacked constraint values g (feasible iff g <= 0)."""
    pfl, qfl, ptl, qtl = pf.branch_flows(grid, bundle.vm, bundle.va)
    r = grid.rated
    cap2 = grid.rate_a[r] ** 2
    return np.concatenate([
        grid.pg_min - bundle.pg,
        bundle.pg - grid.pg_max,
        grid.qg_min - bundle.qg,
        bundle.qg - grid.qg_max,
        grid.v_min - bundle.vm,
        bundle.vm - grid.v_max,
        pfl[r] ** 2 + qfl[r] ** 2 - cap2,
        ptl[r] ** 2 + qtl[r] ** 2 - cap2,
    ])


def inequality_labels(grid):
    out = []
    for tag in ("pg_lo", "pg_hi", "qg_lo", "qg_hi"):
        out += ["%s[bus%d]" % (tag, grid.labels[b]) for b in grid.gen_bus]
    for tag in ("v_lo", "v_hi"):
        out += ["%s[bus%d]" % (tag, lb) for lb in grid.labels]
    for tag in ("flow_f", "flow_t"):
        out += ["%s[%d-%d]" % (tag, grid.labels[grid.fbus[k]],
                               grid.labels[grid.tbus[k]])
                for k in np.where(grid.rated)[0]]
    return out


def equality_values(grid, bundle, d):
    """Active then reactive power balance residual at every bus."""
    n = grid.n_bus
    p, q = _kernels.injections(grid.gbus, grid.bbus, bundle.vm, bundle.va)
    pg_bus = np.zeros(n)
    qg_bus = np.zeros(n)
    pg_bus[grid.gen_bus] = bundle.pg
    qg_bus[grid.gen_bus] = bundle.qg
    return np.concatenate([p - (pg_bus - d[:n]), q - (qg_bus - d[n:])])


@dataclass
class DualState:
    lam: np.ndarray
    nu: np.ndarray

    @classmethod
    def zeros(cls, grid):
        n_ineq = 4 * grid.n_gen + 2 * grid.n_bus + 2 * int(grid.rated.sum())
        return cls(lam=np.zeros(n_ineq), nu=np.zeros(2 * grid.n_bus))


def lagrangian(grid, bundle, d, duals):
    """Loss value and its pieces: cost + lam . relu(g) + nu . |h|."""
    cost = objective_cost(grid, bundle.pg)
    g = inequality_values(grid, bundle)
    h = equality_values(grid, bundle, d)
    ineq = float(duals.lam @ np.maximum(g, 0.0))
    eq = float(duals.nu @ np.abs(h))
    return cost + ineq + eq, {"cost": cost, "ineq": ineq, "eq": eq,
                              "g": g, "h": h}


def loss_state_gradient(grid, bundle, d, duals):
    """d(loss)/d(vm, va, pg, qg) at the assembled operating point."""
    n = grid.n_bus
    ng = grid.n_gen
    g = inequality_values(grid, bundle)
    h = equality_values(grid, bundle, d)
    w = duals.lam * (g > 0)

    dvm = np.zeros(n)
    dva = np.zeros(n)
    mw_scale = grid.base_mva
    dpg = (2 * grid.cost_coeffs[:, 0] * bundle.pg * mw_scale
           + grid.cost_coeffs[:, 1]) * mw_scale
    dqg = np.zeros(ng)

    at = 0
    dpg -= w[at:at + ng]; at += ng
    dpg += w[at:at + ng]; at += ng
    dqg -= w[at:at + ng]; at += ng
    dqg += w[at:at + ng]; at += ng
    dvm -= w[at:at + n]; at += n
    dvm += w[at:at + n]; at += n
    nr = int(grid.rated.sum())
    wf = w[at:at + nr]; at += nr
    wt = w[at:at + nr]

    if np.any(wf != 0) or np.any(wt != 0):
        r = np.where(grid.rated)[0]
        fb, tb = grid.fbus[r], grid.tbus[r]
        args = (grid.fbus, grid.tbus,
                grid.yff.real, grid.yff.imag, grid.yft.real, grid.yft.imag,
                grid.ytf.real, grid.ytf.imag, grid.ytt.real, grid.ytt.imag,
                bundle.vm, bundle.va)
        pfl, qfl, ptl, qtl = pf.branch_flows(grid, bundle.vm, bundle.va)
        (dpf_dvf, dpf_dvt, dpf_dth, dqf_dvf, dqf_dvt, dqf_dth,
         dpt_dvf, dpt_dvt, dpt_dth, dqt_dvf, dqt_dvt, dqt_dth) = \
            _kernels.branch_flow_partials(*args)
        cf = 2 * wf
        ct = 2 * wt
        gvf = cf * (pfl[r] * dpf_dvf[r] + qfl[r] * dqf_dvf[r]) \
            + ct * (ptl[r] * dpt_dvf[r] + qtl[r] * dqt_dvf[r])
        gvt = cf * (pfl[r] * dpf_dvt[r] + qfl[r] * dqf_dvt[r]) \
            + ct * (ptl[r] * dpt_dvt[r] + qtl[r] * dqt_dvt[r])
        gth = cf * (pfl[r] * dpf_dth[r] + qfl[r] * dqf_dth[r]) \
            + ct * (ptl[r] * dpt_dth[r] + qtl[r] * dqt_dth[r])
        np.add.at(dvm, fb, gvf)
        np.add.at(dvm, tb, gvt)
        np.add.at(dva, fb, gth)
        np.add.at(dva, tb, -gth)

    s = duals.nu * np.sign(h)
    sp, sq = s[:n], s[n:]
    if np.any(sp != 0) or np.any(sq != 0):
        dpdt, dpdv, dqdt, dqdv = _kernels.injection_jacobians(
            grid.gbus, grid.bbus, bundle.vm, bundle.va)
        dva += dpdt.T @ sp + dqdt.T @ sq
        dvm += dpdv.T @ sp + dqdv.T @ sq
        dpg -= sp[grid.gen_bus]
        dqg -= sq[grid.gen_bus]
    return dvm, dva, dpg, dqg


def project_state_gradient(grid, dvm, dva, dpg, dqg):
    """Scatter bus/generator gradients onto (x, z, ztilde) slots."""
    part = grid.part
    gx = np.zeros(part.n_decision)
    for k, b in enumerate(grid.gen_bus):
        b = int(b)
        if b in part.pos_in_gen:
            gx[part.pos_in_gen[b]] = dpg[k]
    gx[part.gen.size:] = dvm[part.grv]
    gz = np.concatenate([dva[part.pvpq], dvm[part.load]])
    gzt = np.empty(part.slack.size + part.grv.size)
    for k, b in enumerate(grid.gen_bus):
        b = int(b)
        if b in part.pos_in_slack:
            gzt[part.pos_in_slack[b]] = dpg[k]
    gzt[part.slack.size:] = dqg
    return gx, gz, gzt


def completion_sensitivities(grid, z, x):
    """Jacobians of the dependent dispatch w.r.t. z and x.

    Rows stack slack active injections then slack+generator reactive
    injections, matching the ztilde layout.
    """
    part = grid.part
    vm, va = pf.full_state(grid, z, x)
    dpdt, dpdv, dqdt, dqdv = _kernels.injection_jacobians(grid.gbus, grid.bbus,
                                                          vm, va)
    pvpq, pq, grv, slack = part.pvpq, part.load, part.grv, part.slack
    jzt_z = np.vstack([
        np.hstack([dpdt[np.ix_(slack, pvpq)], dpdv[np.ix_(slack, pq)]]),
        np.hstack([dqdt[np.ix_(grv, pvpq)], dqdv[np.ix_(grv, pq)]]),
    ])
    nsg = slack.size + grv.size
    jzt_x = np.zeros((nsg, part.n_decision))
    ng = part.gen.size
    jzt_x[:slack.size, ng:] = dpdv[np.ix_(slack, grv)]
    jzt_x[slack.size:, ng:] = dqdv[np.ix_(grv, grv)]
    return jzt_z, jzt_x


# ------------------------------------------------------- forward and grads

@dataclass
class ForwardPass:
    x: np.ndarray
    cache: tuple
    result: pf.SolveResult
    ztilde: np.ndarray
    bundle: pf.StateBundle


def forward_full(mdl, grid, factors, d, cfg=None, record=False):
    """Network -> decode -> hybrid solve -> post-completion, bundled."""
    x, cache = model_mod.model_forward(mdl, d)
    res = pf.hybrid_solve(grid, factors, x, d, cfg, record=record)
    zt = pf.post_complete(grid, res.z, x, d)
    bundle = pf.assemble_bundle(grid, res.z, x, zt)
    return ForwardPass(x=x, cache=cache, result=res, ztilde=zt, bundle=bundle)


def loss_value(mdl, grid, factors, d, duals, cfg=None):
    """Scalar loss, or None when the solve diverged (the FD oracle hook)."""
    fwd = forward_full(mdl, grid, factors, d, cfg)
    if not fwd.result.converged:
        return None
    val, _ = lagrangian(grid, fwd.bundle, d, duals)
    return val


def gradient_from_forward(mdl, grid, factors, d, duals, fwd, mode="kstep"):
    """Parameter gradient given a completed forward pass.

    kstep mode back-propagates through the recorded refinement; exact
    mode applies the implicit-function transpose solve at the solver's
    final state instead.  Both add the direct decision-vector path and
    the dependent-dispatch path before entering the network backward.
    """
    dvm, dva, dpg, dqg = loss_state_gradient(grid, fwd.bundle, d, duals)
    gx, gz, gzt = project_state_gradient(grid, dvm, dva, dpg, dqg)
    jzt_z, jzt_x = completion_sensitivities(grid, fwd.result.z, fwd.x)
    v_x = gx + jzt_x.T @ gzt
    c_z = gz + jzt_z.T @ gzt
    if mode == "kstep":
        if fwd.result.tape is None:
            raise ValueError("kstep gradient needs a recorded solve")
        g_solver = diffgrad.refinement_vjp(grid, factors, fwd.result.tape,
                                           fwd.x, d, c_z)
    elif mode == "exact":
        jz = pf.pf_jacobian_z(grid, fwd.result.z, fwd.x)
        lu = scipy.linalg.lu_factor(jz)
        y = scipy.linalg.lu_solve(lu, c_z, trans=1)
        g_solver = -pf.pf_jacobian_x(grid, fwd.result.z, fwd.x).T @ y
    else:
        raise ValueError("unknown gradient mode %r" % mode)
    total_x = v_x + g_solver
    return model_mod.model_backward(mdl, fwd.cache, total_x)


def parameter_gradient(mdl, grid, factors, d, duals, cfg=None, mode="kstep"):
    """End-to-end dL/dparams for one sample; None signals a skipped solve."""
    fwd = forward_full(mdl, grid, factors, d, cfg, record=(mode == "kstep"))
    if not fwd.result.converged:
        return None, fwd
    return gradient_from_forward(mdl, grid, factors, d, duals, fwd, mode), fwd


# -------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_global_norm(grad, max_norm=10.0):
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


def dual_update(duals, mean_relu_g, mean_abs_h, eta_lam, eta_nu):
    """Ascent step; increments are nonnegative so multipliers stay >= 0."""
    duals.lam = duals.lam + eta_lam * mean_relu_g
    duals.nu = duals.nu + eta_nu * mean_abs_h
    return duals


# ------------------------------------------------------------ training loop

@dataclass
class TrainConfig:
    outer_iters: int = 20
    inner_epochs: int = 25
    batch_size: int = 200
    lr_primal: float = 1e-3
    lr_lambda: float = 0.1
    lr_nu: float = 0.5
    seed: int = 0
    hidden: tuple = (200, 200)
    mode: str = "kstep"
    guide_steps: int = 9
    refine: str = "nr"
    refine_steps: int = 1
    tolerance: float = 1e-5
    viol_tol: float = 1e-4
    workers: int = 1

    def solver_config(self):
        return pf.SolverConfig(guide_steps=self.guide_steps,
                               refine=self.refine,
                               refine_steps=self.refine_steps,
                               tolerance=self.tolerance)

    def to_dict(self):
        out = dict(self.__dict__)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, data):
        cfg = cls()
        for key, val in data.items():
            if not hasattr(cfg, key):
                raise ValueError("unknown training option %r" % key)
            if key == "hidden":
                val = tuple(int(v) for v in val)
            setattr(cfg, key, val)
        return cfg

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class _SplitStats:
    """Ordered accumulation of per-sample violation and cost statistics."""

    def __init__(self, grid):
        n_ineq = DualState.zeros(grid).lam.size
        self.sum_relu_g = np.zeros(n_ineq)
        self.sum_abs_h = np.zeros(2 * grid.n_bus)
        self.eq_mean_sum = 0.0
        self.eq_max = 0.0
        self.eq_viol = 0
        self.ineq_mean_sum = 0.0
        self.ineq_max = 0.0
        self.ineq_viol = 0
        self.cost_sum = 0.0
        self.gap_sum = 0.0
        self.n_gap = 0
        self.n = 0
        self.n_diverged = 0

    def add(self, grid, g, h, cost, viol_tol, ref_cost=None):
        relu = np.maximum(g, 0.0)
        ah = np.abs(h)
        self.sum_relu_g += relu
        self.sum_abs_h += ah
        self.eq_mean_sum += float(ah.mean())
        self.eq_max = max(self.eq_max, float(ah.max()))
        self.eq_viol += int((ah > viol_tol).sum())
        self.ineq_mean_sum += float(relu.mean())
        self.ineq_max = max(self.ineq_max, float(relu.max()))
        self.ineq_viol += int((g > viol_tol).sum())
        self.cost_sum += cost
        if ref_cost is not None and ref_cost != 0:
            self.gap_sum += (cost - ref_cost) / ref_cost
            self.n_gap += 1
        self.n += 1

    def record(self, epoch):
        from .evaluate import MetricsRecord
        n = max(self.n, 1)
        return MetricsRecord(
            epoch=epoch,
            eq_mean_mismatch=self.eq_mean_sum / n,
            eq_max_mismatch=self.eq_max,
            eq_viol_num=self.eq_viol,
            ineq_mean_mismatch=self.ineq_mean_sum / n,
            ineq_max_mismatch=self.ineq_max,
            ineq_viol_num=self.ineq_viol,
            objective_cost=self.cost_sum / n,
            objective_gap_pct=(100.0 * self.gap_sum / self.n_gap
                               if self.n_gap else None),
        )


@dataclass
class TrainResult:
    model: model_mod.PolicyModel
    duals: DualState
    train_records: list
    test_records: list
    epochs: int
    diverged_total: int


def _map_ordered(fn, items, workers):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def primal_dual_train(grid, factors, dataset, cfg, refs=None, callback=None):
    """Run the full primal-dual loop; returns model, duals and metric rows.

    Epochs advance deterministically: the shuffle stream depends only on
    the seed, samples are reduced in batch order, and the optional thread
    pool preserves that order, so two runs with the same configuration
    produce identical parameters and identical metrics rows.
    """
    mdl = model_mod.init_model(grid, hidden=cfg.hidden, seed=cfg.seed)
    model_mod.fit_scaler(mdl, dataset.samples[dataset.train_indices])
    scfg = cfg.solver_config()
    duals = DualState.zeros(grid)
    params = model_mod.pack_params(mdl)
    opt = Adam(params.size, lr=cfg.lr_primal)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])

    train_idx = dataset.train_indices
    train_records, test_records = [], []
    epoch = 0
    diverged_total = 0

    from .evaluate import evaluate_split  # local import avoids a cycle

    def sample_grad(i):
        d = dataset.samples[i]
        return parameter_gradient(mdl, grid, factors, d, duals, scfg,
                                  mode=cfg.mode)

    for outer in range(cfg.outer_iters):
        stats = None
        for inner in range(cfg.inner_epochs):
            epoch += 1
            stats = _SplitStats(grid)
            order = shuffle_rng.permutation(train_idx)
            for start in range(0, order.size, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                outs = _map_ordered(sample_grad, batch, cfg.workers)
                grads = []
                for i, (gphi, fwd) in zip(batch, outs):
                    if gphi is None:
                        stats.n_diverged += 1
                        continue
                    grads.append(gphi)
                    _, parts = lagrangian(grid, fwd.bundle,
                                          dataset.samples[i], duals)
                    ref_cost = refs.costs.get(int(i)) if refs else None
                    stats.add(grid, parts["g"], parts["h"], parts["cost"],
                              cfg.viol_tol, ref_cost)
                if grads:
                    mean_grad = np.mean(grads, axis=0)
                    mean_grad, _ = clip_global_norm(mean_grad)
                    params = opt.step(params, mean_grad)
                    model_mod.unpack_params(mdl, params)
            diverged_total += stats.n_diverged
            if stats.n_diverged > (stats.n + stats.n_diverged) / 2:
                raise TrainingDiverged(
                    "epoch %d: %d of %d samples diverged"
                    % (epoch, stats.n_diverged, stats.n + stats.n_diverged))
            train_records.append(stats.record(epoch))
            test_records.append(evaluate_split(
                mdl, grid, factors, dataset, dataset.test_indices, scfg,
                duals=duals, refs=refs, epoch=epoch, viol_tol=cfg.viol_tol,
                workers=cfg.workers))
            if callback is not None:
                callback(epoch, train_records[-1], test_records[-1])
        duals = dual_update(duals,
                            stats.sum_relu_g / max(stats.n, 1),
                            stats.sum_abs_h / max(stats.n, 1),
                            cfg.lr_lambda, cfg.lr_nu)
        log.info("outer %d/%d done: |lam|=%.3e |nu|=%.3e", outer + 1,
                 cfg.outer_iters, np.linalg.norm(duals.lam),
                 np.linalg.norm(duals.nu))

    return TrainResult(model=mdl, duals=duals, train_records=train_records,
                       test_records=test_records, epochs=epoch,
                       diverged_total=diverged_total)
