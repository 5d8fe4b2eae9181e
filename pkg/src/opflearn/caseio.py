"""Reading and writing of grid case files, load datasets, and run artifacts.

Supports the MATPOWER M-file subset used by the standard test systems:
``mpc.baseMVA`` plus the ``bus``, ``gen``, ``branch`` and ``gencost``
matrices, with ``%`` comments.  Bus labels may be arbitrary positive
integers; everything downstream works on contiguous 0-based indices.
"""

import csv
import logging
import re

import numpy as np

logger = logging.getLogger(__name__)

BUS_COLS = 13
GEN_COLS_MIN = 10
BRANCH_COLS_MIN = 11

METRICS_COLUMNS = [
    "epoch",
    "eq_mean_mismatch",
    "eq_max_mismatch",
    "eq_viol_num",
    "ineq_mean_mismatch",
    "ineq_max_mismatch",
    "ineq_viol_num",
    "objective_cost",
    "objective_gap_pct",
]


class CaseFormatError(Exception):
    """Raised when a case file cannot be interpreted."""


class RawCase:
    """Verbatim numeric content of a case file, in file units (MW, MVAr).

    Attributes
    ----------
    name : str
        Function name from the file header, or the stem of the path.
    base_mva : float
    bus, gen, branch : ndarray
        Row-per-element matrices exactly as listed in the file.
    gencost : ndarray or None
        Polynomial cost rows; None when the file has no gencost matrix.
    """

    def __init__(self, name, base_mva, bus, gen, branch, gencost=None):
        self.name = name
        self.base_mva = base_mva
        self.bus = bus
        self.gen = gen
        self.branch = branch
        self.gencost = gencost

    def __repr__(self):
        return "RawCase(%s: %d buses, %d gens, %d branches)" % (
            self.name, self.bus.shape[0], self.gen.shape[0], self.branch.shape[0])


def _strip_comments(text):
    out = []
    for line in text.splitlines():
        cut = line.find("%")
        out.append(line if cut < 0 else line[:cut])
    return "\n".join(out)


def _read_matrix(text, name, path):
    m = re.search(r"mpc\.%s\s*=\s*\[(.*?)\]\s*;" % name, text, re.S)
    if m is None:
        return None
    rows = []
    width = None
    for lineno, line in enumerate(m.group(1).splitlines()):
        line = line.strip()
        while line.endswith(";"):
            line = line[:-1].strip()
        if not line:
            continue
        try:
            row = [float(tok) for tok in re.split(r"[\s,]+", line)]
        except ValueError as exc:
            raise CaseFormatError(
                "%s: bad numeric literal in mpc.%s row %d: %s"
                % (path, name, lineno, exc)) from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise CaseFormatError(
                "%s: ragged mpc.%s matrix (row %d has %d entries, expected %d)"
                % (path, name, lineno, len(row), width))
        rows.append(row)
    if not rows:
        raise CaseFormatError("%s: mpc.%s is empty" % (path, name))
    return np.array(rows, dtype=float)


def parse_matpower_text(text, name="case"):
    """Parse MATPOWER case text into a RawCase.

    Raises CaseFormatError for unsupported versions, missing matrices,
    ragged rows, or references to undefined buses.
    """
    header = re.search(r"function\s+mpc\s*=\s*(\w+)", text)
    if header:
        name = header.group(1)
    stripped = _strip_comments(text)

    version = re.search(r"mpc\.version\s*=\s*'(\w+)'\s*;", stripped)
    if version and version.group(1) != "2":
        raise CaseFormatError(
            "%s: unsupported case format version %r" % (name, version.group(1)))

    base = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;", stripped)
    if base is None:
        raise CaseFormatError("%s: missing mpc.baseMVA" % name)
    base_mva = float(base.group(1))
    if base_mva <= 0:
        raise CaseFormatError("%s: baseMVA must be positive" % name)

    bus = _read_matrix(stripped, "bus", name)
    gen = _read_matrix(stripped, "gen", name)
    branch = _read_matrix(stripped, "branch", name)
    gencost = _read_matrix(stripped, "gencost", name)
    for label, mat, least in (("bus", bus, BUS_COLS),
                              ("gen", gen, GEN_COLS_MIN),
                              ("branch", branch, BRANCH_COLS_MIN)):
        if mat is None:
            raise CaseFormatError("%s: missing mpc.%s matrix" % (name, label))
        if mat.shape[1] < least:
            raise CaseFormatError(
                "%s: mpc.%s has %d columns, need at least %d"
                % (name, label, mat.shape[1], least))

    labels = bus[:, 0].astype(int)
    if np.unique(labels).size != labels.size:
        raise CaseFormatError("%s: duplicate bus labels" % name)
    known = set(labels.tolist())
    for i, row in enumerate(gen):
        if int(row[0]) not in known:
            raise CaseFormatError(
                "%s: gen row %d references unknown bus %d" % (name, i, int(row[0])))
    for i, row in enumerate(branch):
        for end in (int(row[0]), int(row[1])):
            if end not in known:
                raise CaseFormatError(
                    "%s: branch row %d references unknown bus %d" % (name, i, end))
    if gencost is not None and gencost.shape[0] != gen.shape[0]:
        raise CaseFormatError(
            "%s: gencost has %d rows for %d generators"
            % (name, gencost.shape[0], gen.shape[0]))

    return RawCase(name, base_mva, bus, gen, branch, gencost)


def parse_matpower_file(path):
    """Read and parse a MATPOWER .m case file."""
    with open(path) as handle:
        text = handle.read()
    case = parse_matpower_text(text, name=str(path))
    logger.debug("parsed %s", case)
    return case


class LoadDataset:
    """Sampled demand profiles for one grid, in per-unit.

    samples has shape (count, 2*n_bus): active demand for every bus followed
    by reactive demand for every bus, ordered by internal bus index.
    is_train marks the training split.
    """

    def __init__(self, samples, is_train, nominal, seed, scale_range):
        self.samples = samples
        self.is_train = is_train
        self.nominal = nominal
        self.seed = seed
        self.scale_range = scale_range

    @property
    def count(self):
        return self.samples.shape[0]

    @property
    def train_indices(self):
        return np.where(self.is_train)[0]

    @property
    def test_indices(self):
        return np.where(~self.is_train)[0]


def nominal_demand(case):
    """Per-unit nominal demand vector [Pd; Qd] in internal bus order."""
    return np.concatenate([case.bus[:, 2], case.bus[:, 3]]) / case.base_mva


def generate_dataset(case, count, scale_range=(0.8, 1.2), split_fraction=0.8,
                     seed=0):
    """Draw demand profiles by independent per-bus multiplicative scaling.

    Every active and reactive demand entry of the nominal profile is scaled
    by its own uniform draw from scale_range.  Buses with zero nominal demand
    stay at zero.  The first floor(count*split_fraction) positions of a
    seed-derived permutation form the training split.
    """
    low, high = float(scale_range[0]), float(scale_range[1])
    if count < 1:
        raise ValueError("count must be >= 1")
    if low > high:
        raise ValueError("scale_range must satisfy low <= high")
    if low < 0:
        raise ValueError("scale factors must be nonnegative")
    if not 0.0 <= split_fraction <= 1.0:
        raise ValueError("split_fraction must be within [0, 1]")

    nominal = nominal_demand(case)
    rng = np.random.default_rng(seed)
    factors = rng.uniform(low, high, size=(count, nominal.size))
    samples = factors * nominal[None, :]

    is_train = np.zeros(count, dtype=bool)
    n_train = int(np.floor(count * split_fraction))
    order = rng.permutation(count)
    is_train[order[:n_train]] = True
    return LoadDataset(samples, is_train, nominal, seed, (low, high))


def save_dataset(dataset, path):
    np.savez(path, samples=dataset.samples, is_train=dataset.is_train,
             nominal=dataset.nominal, seed=np.array(dataset.seed),
             scale=np.array(dataset.scale_range))


def load_dataset(path):
    with np.load(path, allow_pickle=False) as zf:
        return LoadDataset(zf["samples"].copy(), zf["is_train"].copy(),
                           zf["nominal"].copy(), int(zf["seed"]),
                           tuple(zf["scale"].tolist()))


class ReferenceSet:
    """Reference optima keyed by sample index.

    costs maps index -> objective value.  solutions maps index -> flat
    per-unit solution array (vm, va, pg, qg concatenated) when the file
    carries one, otherwise the index is absent from solutions.
    """

    def __init__(self, costs, solutions):
        self.costs = costs
        self.solutions = solutions

    def __len__(self):
        return len(self.costs)

    def __contains__(self, index):
        return index in self.costs


def load_reference_solutions(path):
    """Read a reference CSV with rows ``index,cost[,solution values...]``."""
    costs = {}
    solutions = {}
    with open(path, newline="") as handle:
        for lineno, row in enumerate(csv.reader(handle)):
            if not row or row[0].strip().startswith("#"):
                continue
            if lineno == 0 and not _is_number(row[0]):
                continue  # header line
            if len(row) < 2:
                raise CaseFormatError(
                    "%s: row %d needs at least index,cost" % (path, lineno))
            idx = int(float(row[0]))
            if idx in costs:
                raise CaseFormatError(
                    "%s: duplicate reference index %d" % (path, idx))
            costs[idx] = float(row[1])
            if len(row) > 2:
                solutions[idx] = np.array([float(v) for v in row[2:]])
    return ReferenceSet(costs, solutions)


def write_reference_solutions(path, costs, solutions=None):
    """Write a reference CSV accepted by load_reference_solutions."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        for idx in sorted(costs):
            row = [idx, "%.17e" % costs[idx]]
            if solutions and idx in solutions:
                row += ["%.17e" % v for v in np.asarray(solutions[idx]).ravel()]
            writer.writerow(row)


def _is_number(token):
    try:
        float(token)
        return True
    except ValueError:
        return False


def write_metrics_csv(path, records):
    """Write per-epoch metrics records with full double precision.

    Each record may be a dict or any object exposing the METRICS_COLUMNS
    names as attributes.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_COLUMNS)
        for rec in records:
            get = rec.get if isinstance(rec, dict) else lambda k: getattr(rec, k)
            row = []
            for col in METRICS_COLUMNS:
                value = get(col)
                if col in ("epoch", "eq_viol_num", "ineq_viol_num"):
                    row.append("%d" % value)
                elif value is None:
                    row.append("")
                else:
                    row.append("%.17e" % value)
            writer.writerow(row)


def read_metrics_csv(path):
    """Read back a metrics CSV into a list of dicts (None for blank gaps)."""
    out = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        if header != METRICS_COLUMNS:
            raise CaseFormatError("%s: unexpected metrics header %r" % (path, header))
        for row in reader:
            rec = {}
            for col, tok in zip(METRICS_COLUMNS, row):
                if col in ("epoch", "eq_viol_num", "ineq_viol_num"):
                    rec[col] = int(tok)
                else:
                    rec[col] = None if tok == "" else float(tok)
            out.append(rec)
    return out
