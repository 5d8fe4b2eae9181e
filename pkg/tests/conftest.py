"""Shared fixtures: benchmark grids (session-scoped, they never mutate)
and two closed-form toy networks used as analytic oracles."""

import os

import numpy as np
import pytest

from opflearn import caseio, grid as grid_mod, pf

DATA = os.path.join(os.path.dirname(__file__), "..", "data")


def case_path(name):
    return os.path.join(DATA, name)


# Single slack-PV pair over a lossless x=0.1 line.  B' = [[10]], B'' is
# empty (no load bus), and the fixed point solves 10 sin(th) = -0.5
# exactly: th* = -asin(0.05).  First flat-start sweep lands on -0.05.
TOY_PV = """function mpc = toypv
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
1 3 0 0 0 0 1 1.0 0 0 1 1.1 0.9;
2 2 50 0 0 0 1 1.0 0 0 1 1.1 0.9;
];
mpc.gen = [
1 0 0 300 -300 1.0 100 1 400 0;
2 0 0 300 -300 1.0 100 1 400 0;
];
mpc.branch = [
1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
2 0 0 3 0.01 40 0;
2 0 0 3 0.01 40 0;
];
"""

# Slack plus one PQ load (P=0.5, Q=0.3) over the same line.  Writing
# V2 = V e^{j th}:  10 V sin th = -0.5 and V cos th = V^2 + 0.03, so
# u = V^2 satisfies u^2 - 0.94 u + 0.0034 = 0.  High-voltage root:
#   V* = sqrt((0.94 + sqrt(0.87)) / 2),  th* = asin(-0.05 / V*).
TOY_PQ = """function mpc = toypq
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
1 3 0 0 0 0 1 1.0 0 0 1 1.1 0.9;
2 1 50 30 0 0 1 1.0 0 0 1 1.1 0.9;
];
mpc.gen = [
1 0 0 300 -300 1.0 100 1 400 0;
];
mpc.branch = [
1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
2 0 0 3 0.01 40 0;
];
"""

TOY_PQ_V = np.sqrt((0.94 + np.sqrt(0.87)) / 2)
TOY_PQ_TH = np.arcsin(-0.05 / TOY_PQ_V)


def build_toy(text, name):
    case = caseio.parse_matpower_text(text, name=name)
    grid = grid_mod.build_grid(case)
    factors = grid_mod.build_fdpf_matrices(grid)
    return case, grid, factors


@pytest.fixture(scope="session")
def toy_pv():
    return build_toy(TOY_PV, "toypv")


@pytest.fixture(scope="session")
def toy_pq():
    return build_toy(TOY_PQ, "toypq")


@pytest.fixture(scope="session")
def case57():
    return caseio.parse_matpower_file(case_path("case57.m"))


@pytest.fixture(scope="session")
def grid57(case57):
    return grid_mod.build_grid(case57)


@pytest.fixture(scope="session")
def fac57(grid57):
    return grid_mod.build_fdpf_matrices(grid57)


@pytest.fixture(scope="session")
def case118():
    return caseio.parse_matpower_file(case_path("case118.m"))


@pytest.fixture(scope="session")
def grid118(case118):
    return grid_mod.build_grid(case118)


@pytest.fixture(scope="session")
def fac118(grid118):
    return grid_mod.build_fdpf_matrices(grid118)


@pytest.fixture(scope="session")
def nominal57(grid57, fac57):
    """Converged nominal operating point of case57, solved tight."""
    x = pf.nominal_decision(grid57)
    d = np.concatenate([grid57.pd, grid57.qd])
    cfg = pf.SolverConfig(guide_steps=30, refine="nr", refine_steps=3,
                          tolerance=1e-12)
    res = pf.hybrid_solve(grid57, fac57, x, d, cfg)
    assert res.converged
    return x, d, res
