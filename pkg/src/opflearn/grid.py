"""Grid model assembly: bus partition, admittance structure, FDPF matrices.

Buses are split into the slack set R (type-3 rows), the generator set G
(non-slack buses hosting an in-service generator) and the load set D
(everything else).  The decision vector x holds [Pg at G, V at G and R],
the completion vector z holds [theta at G and D, V at D], and the
dependent slice holds [Pg at R, Qg at R and G].  All quantities are stored
per-unit on the system base; costs keep their MW scaling.
"""

import hashlib

import numpy as np
import scipy.linalg

from .caseio import CaseFormatError


class GridError(Exception):
    """Raised for structurally unusable grids."""


class Partition:
    """Index bookkeeping for the R/G/D bus split (0-based internal indices).

    slack, gen, load are sorted index arrays; pvpq = gen+load sorted,
    grv = gen+slack sorted (the V part of x), spv = slack+gen sorted
    (the Qg part of the dependent slice).
    """

    def __init__(self, slack, gen, load):
        self.slack = np.asarray(slack, dtype=int)
        self.gen = np.asarray(gen, dtype=int)
        self.load = np.asarray(load, dtype=int)
        self.pvpq = np.sort(np.concatenate([self.gen, self.load]))
        self.grv = np.sort(np.concatenate([self.gen, self.slack]))
        self.spv = self.grv  # same bus set, kept for intent at call sites
        self.n_state = self.gen.size + 2 * self.load.size
        self.n_decision = 2 * self.gen.size + self.slack.size
        # positions of each bus within the stacked vectors
        self.pos_in_pvpq = {int(b): i for i, b in enumerate(self.pvpq)}
        self.pos_in_load = {int(b): i for i, b in enumerate(self.load)}
        self.pos_in_gen = {int(b): i for i, b in enumerate(self.gen)}
        self.pos_in_grv = {int(b): i for i, b in enumerate(self.grv)}
        self.pos_in_slack = {int(b): i for i, b in enumerate(self.slack)}

    def fingerprint(self, labels):
        """Stable hash of the partition over the file's bus labels."""
        blob = ",".join([
            "R:" + ":".join(str(labels[i]) for i in self.slack),
            "G:" + ":".join(str(labels[i]) for i in self.gen),
            "D:" + ":".join(str(labels[i]) for i in self.load),
        ])
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class GridModel:
    """Per-unit network data plus partition for one case.

    Branch admittance blocks follow the standard two-port model
    [[yff, yft], [ytf, ytt]] including taps, phase shift and charging,
    restricted to in-service branches.
    """

    def __init__(self, **kw):
        self.__dict__.update(kw)

    @property
    def n_bus(self):
        return self.gbus.shape[0]

    @property
    def n_gen(self):
        return self.gen_bus.size

    def __repr__(self):
        return "GridModel(%s: %d buses, %d gens, %d branches, n=%d, m=%d)" % (
            self.name, self.n_bus, self.n_gen, self.fbus.size,
            self.part.n_state, self.part.n_decision)


def _branch_admittances(branch, in_service):
    rows = branch[in_service]
    ys = 1.0 / (rows[:, 2] + 1j * rows[:, 3])
    bc = rows[:, 4]
    tau = np.where(rows[:, 8] == 0.0, 1.0, rows[:, 8])
    shift = np.deg2rad(rows[:, 9])
    tap = tau * np.exp(1j * shift)
    yff = (ys + 1j * bc / 2) / (tau * tau)
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    ytt = ys + 1j * bc / 2
    return yff, yft, ytf, ytt


def _assemble_ybus(n, f, t, yff, yft, ytf, ytt, yshunt):
    Y = np.zeros((n, n), dtype=complex)
    np.add.at(Y, (f, f), yff)
    np.add.at(Y, (f, t), yft)
    np.add.at(Y, (t, f), ytf)
    np.add.at(Y, (t, t), ytt)
    Y[np.arange(n), np.arange(n)] += yshunt
    return Y


def build_grid(case):
    """Construct a GridModel from a parsed RawCase.

    Validates the partition: exactly one kind of slack set (type-3 buses
    hosting in-service generation), one in-service generator per generator
    bus, no isolated buses, and a gencost row per generator.
    """
    bus, gen, branch = case.bus, case.gen, case.branch
    base = case.base_mva
    n = bus.shape[0]
    labels = bus[:, 0].astype(int)
    label_to_idx = {int(b): i for i, b in enumerate(labels)}

    types = bus[:, 1].astype(int)
    slack = np.where(types == 3)[0]
    if slack.size == 0:
        raise GridError("%s: no slack bus (type 3)" % case.name)

    gen_status = gen[:, 7] > 0
    gen_idx = np.array([label_to_idx[int(b)] for b in gen[:, 0]], dtype=int)
    live = np.where(gen_status)[0]
    seen = set()
    for g in live:
        b = gen_idx[g]
        if b in seen:
            raise GridError(
                "%s: bus %d hosts more than one in-service generator"
                % (case.name, labels[b]))
        seen.add(b)
    gen_buses = np.array(sorted(seen), dtype=int)
    for s in slack:
        if s not in seen:
            raise GridError(
                "%s: slack bus %d has no in-service generator"
                % (case.name, labels[s]))
    gset = np.array([b for b in gen_buses if b not in set(slack.tolist())],
                    dtype=int)
    dset = np.array([i for i in range(n)
                     if i not in set(gen_buses.tolist()) and i not in set(slack.tolist())],
                    dtype=int)
    part = Partition(slack, gset, dset)

    in_service = branch[:, 10] > 0
    f = np.array([label_to_idx[int(b)] for b in branch[in_service, 0]], dtype=int)
    t = np.array([label_to_idx[int(b)] for b in branch[in_service, 1]], dtype=int)
    yff, yft, ytf, ytt = _branch_admittances(branch, in_service)
    yshunt = (bus[:, 4] + 1j * bus[:, 5]) / base
    ybus = _assemble_ybus(n, f, t, yff, yft, ytf, ytt, yshunt)

    touched = np.zeros(n, dtype=bool)
    touched[f] = True
    touched[t] = True
    row_mag = np.abs(ybus).sum(axis=1)
    if np.any(~touched) or np.any(row_mag == 0.0):
        dead = labels[np.where(~touched | (row_mag == 0.0))[0]]
        raise GridError("%s: isolated buses %s" % (case.name, dead.tolist()))

    # generator tables ordered by internal bus index of their bus
    order = np.argsort(gen_idx[live])
    live = live[order]
    gen_bus = gen_idx[live]
    pg_min = gen[live, 9] / base
    pg_max = gen[live, 8] / base
    qg_min = gen[live, 4] / base
    qg_max = gen[live, 3] / base
    pg_set = gen[live, 1] / base
    vg_set = gen[live, 5].copy()

    if case.gencost is None:
        raise GridError("%s: gencost matrix required" % case.name)
    cost = np.zeros((live.size, 3))
    for k, g in enumerate(live):
        row = case.gencost[g]
        if int(row[0]) != 2:
            raise GridError("%s: only polynomial gencost (model 2) is supported"
                            % case.name)
        ncoef = int(row[3])
        coefs = row[4:4 + ncoef]
        if ncoef > 3:
            raise GridError("%s: gencost degree above quadratic is not supported"
                            % case.name)
        cost[k, 3 - ncoef:] = coefs

    rate_a = branch[in_service, 5] / base
    rated = rate_a > 0
    angmin = np.deg2rad(branch[in_service, 11])
    angmax = np.deg2rad(branch[in_service, 12])
    # +/-360 and degenerate (0, 0) rows mean "unconstrained" in the file format
    ang_limited = ((branch[in_service, 11] > -360) & (branch[in_service, 12] < 360)
                   & ~((branch[in_service, 11] == 0) & (branch[in_service, 12] == 0)))

    grid = GridModel(
        name=case.name,
        base_mva=base,
        labels=labels,
        label_to_idx=label_to_idx,
        bus_type=types,
        pd=bus[:, 2] / base,
        qd=bus[:, 3] / base,
        gbus=ybus.real.copy(),
        bbus=ybus.imag.copy(),
        ybus=ybus,
        fbus=f,
        tbus=t,
        yff=yff, yft=yft, ytf=ytf, ytt=ytt,
        rate_a=rate_a,
        rated=rated,
        angmin=angmin,
        angmax=angmax,
        ang_limited=ang_limited,
        gen_bus=gen_bus,
        pg_min=pg_min, pg_max=pg_max,
        qg_min=qg_min, qg_max=qg_max,
        pg_set=pg_set, vg_set=vg_set,
        cost_coeffs=cost,
        shunt_y=yshunt,
        v_min=bus[:, 12].copy(),
        v_max=bus[:, 11].copy(),
        slack_angle=float(np.deg2rad(bus[slack[0], 8])),
        part=part,
        branch_raw=branch[in_service].copy(),
    )
    grid.fingerprint = part.fingerprint(labels)
    grid.gen_of_bus = {int(b): k for k, b in enumerate(gen_bus)}
    return grid


class FdpfFactors:
    """LU-factorized fast-decoupled matrices for one grid.

    bp acts on the angle half-step over non-slack buses, bpp on the
    magnitude half-step over load buses.  Both are factorized once and
    reused for every solve and every transpose solve.
    """

    def __init__(self, bp, bpp, bp_lu, bpp_lu):
        self.bp = bp
        self.bpp = bpp
        self.bp_lu = bp_lu
        self.bpp_lu = bpp_lu

    def solve_bp(self, rhs, trans=False):
        return scipy.linalg.lu_solve(self.bp_lu, rhs, trans=1 if trans else 0)

    def solve_bpp(self, rhs, trans=False):
        return scipy.linalg.lu_solve(self.bpp_lu, rhs, trans=1 if trans else 0)


def build_fdpf_matrices(grid):
    """Assemble and factorize the decoupled matrices (XB variant).

    The angle matrix comes from series reactance alone: resistance, line
    charging and bus shunts dropped, taps forced to one, phase shifts kept.
    The magnitude matrix is -Im(ybus) with phase shifts removed.  Rows and
    columns are restricted to non-slack and load buses respectively.
    """
    br = grid.branch_raw
    n = grid.n_bus
    f, t = grid.fbus, grid.tbus

    with np.errstate(divide="ignore", invalid="ignore"):
        ys = 1.0 / (1j * br[:, 3])
        tap = np.exp(1j * np.deg2rad(br[:, 9]))
        yff = ys
        yft = -ys / np.conj(tap)
        ytf = -ys / tap
        ytt = ys
        yb = _assemble_ybus(n, f, t, yff, yft, ytf, ytt, np.zeros(n, complex))
        bp_full = -yb.imag

        ys = 1.0 / (br[:, 2] + 1j * br[:, 3])
        bc = br[:, 4]
        tau = np.where(br[:, 8] == 0.0, 1.0, br[:, 8])
        yff = (ys + 1j * bc / 2) / (tau * tau)
        yft = -ys / tau
        ytf = -ys / tau
        ytt = ys + 1j * bc / 2
        yb2 = _assemble_ybus(n, f, t, yff, yft, ytf, ytt, grid.shunt_y)
        bpp_full = -yb2.imag

    pvpq = grid.part.pvpq
    pq = grid.part.load
    bp = bp_full[np.ix_(pvpq, pvpq)]
    bpp = bpp_full[np.ix_(pq, pq)]
    if not (np.all(np.isfinite(bp)) and np.all(np.isfinite(bpp))):
        raise GridError("non-finite decoupled matrix (zero-reactance branch?)")
    try:
        bp_lu = scipy.linalg.lu_factor(bp)
        bpp_lu = scipy.linalg.lu_factor(bpp)
    except scipy.linalg.LinAlgError as exc:
        raise GridError("singular decoupled matrix: %s" % exc) from None
    if (not np.all(np.isfinite(bp_lu[0]))) or (not np.all(np.isfinite(bpp_lu[0]))):
        raise GridError("singular decoupled matrix")
    return FdpfFactors(bp, bpp, bp_lu, bpp_lu)
