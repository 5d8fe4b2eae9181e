"""Sensitivities of the completion solve, cross-checked three ways:
analytic step Jacobians vs finite differences, residual-form vs
fixed-point-form implicit Jacobians, and the K-step chain vs its VJP.
"""

import numpy as np
import pytest

from opflearn import diffgrad, pf

from conftest import TOY_PQ_TH, TOY_PQ_V


def demand(grid):
    return np.concatenate([grid.pd, grid.qd])


def test_fd_oracle_self_check():
    jac = diffgrad.finite_diff_jacobian(
        lambda v: np.array([v[0] ** 2, v[0] * v[1]]), np.array([3.0, 2.0]))
    np.testing.assert_allclose(jac, [[6.0, 0.0], [2.0, 3.0]], atol=1e-6)


@pytest.fixture()
def mid_state(grid57, fac57):
    # four sweeps in: far enough from flat start, not yet converged, so the
    # quotient-rule correction terms are exercised
    x = pf.nominal_decision(grid57)
    d = demand(grid57)
    res = pf.hybrid_solve(grid57, fac57, x, d,
                          pf.SolverConfig(4, "none", 0))
    return grid57, fac57, res.z, x, d


class TestStepJacobians:
    def test_fdpf_step_vs_fd(self, mid_state):
        grid, fac, z, x, d = mid_state
        dtdz, dtdx = diffgrad.fdpf_step_jacobians(grid, fac, z, x, d)
        fd_z = diffgrad.finite_diff_jacobian(
            lambda zz: pf.fdpf_step(grid, fac, zz, x, d)[0], z)
        fd_x = diffgrad.finite_diff_jacobian(
            lambda xx: pf.fdpf_step(grid, fac, z, xx, d)[0], x)
        np.testing.assert_allclose(dtdz, fd_z, atol=5e-7)
        np.testing.assert_allclose(dtdx, fd_x, atol=5e-7)

    def test_clamped_rows_zeroed(self, toy_pq):
        _, grid, fac = toy_pq
        z = pf.flat_start(grid)
        x = pf.nominal_decision(grid)
        d = np.array([0.0, 0.5, 0.0, 12.0])  # drives V through the floor
        z1, clamped = pf.fdpf_step(grid, fac, z, x, d)
        assert clamped and z1[1] == pf.V_CLAMP[0]
        dtdz, dtdx = diffgrad.fdpf_step_jacobians(grid, fac, z, x, d)
        assert np.all(dtdz[1] == 0.0)
        assert np.all(dtdx[1] == 0.0)


class TestExactJacobians:
    def test_h_form_equals_T_form(self, grid57, fac57, nominal57):
        x, d, res = nominal57
        jh = diffgrad.exact_implicit_jacobian_h(grid57, res.z, x, d)
        jt = diffgrad.exact_implicit_jacobian_T(grid57, fac57, res.z, x, d)
        rel = (np.linalg.norm(jh - jt, "fro")
               / max(np.linalg.norm(jh, "fro"), 1e-30))
        assert rel < 1e-6

    def test_matches_fd_of_full_solve(self, grid57, fac57, nominal57):
        x, d, res = nominal57
        jh = diffgrad.exact_implicit_jacobian_h(grid57, res.z, x, d)
        tight = pf.SolverConfig(30, "nr", 3, tolerance=1e-12)

        def solve(xx):
            r = pf.hybrid_solve(grid57, fac57, xx, d, tight)
            assert r.converged
            return r.z

        fd = diffgrad.finite_diff_jacobian(solve, x, step=1e-6)
        assert np.max(np.abs(jh - fd)) < 1e-6

    def test_toy_pq_closed_form_sensitivity(self, toy_pq):
        # dV*/dV1 obtainable by implicit differentiation of the 2-bus
        # equations; check against the package's exact Jacobian
        _, grid, fac = toy_pq
        d = demand(grid)
        x = pf.nominal_decision(grid)
        res = pf.hybrid_solve(grid, fac, x, d,
                              pf.SolverConfig(70, "none", 0, tolerance=1e-14))
        jh = diffgrad.exact_implicit_jacobian_h(grid, res.z, x, d)
        fd = diffgrad.finite_diff_jacobian(
            lambda xx: pf.hybrid_solve(grid, fac, xx, d,
                                       pf.SolverConfig(70, "none", 0,
                                                       tolerance=1e-14)).z, x)
        np.testing.assert_allclose(jh, fd, atol=1e-7)
        assert res.z[1] == pytest.approx(TOY_PQ_V, abs=1e-11)
        assert res.z[0] == pytest.approx(TOY_PQ_TH, abs=1e-11)


class TestKStep:
    def kstep_setup(self, grid, fac, x, d, k, refine="fdpf"):
        cfg = pf.SolverConfig(8, refine, k, tolerance=1e-5)
        res = pf.hybrid_solve(grid, fac, x, d, cfg, record=True)
        assert res.converged
        return res

    def test_kstep_equals_unrolled_fd(self, grid57, fac57):
        # frozen entry state: differentiate only the recorded block
        x = pf.nominal_decision(grid57)
        d = demand(grid57)
        res = self.kstep_setup(grid57, fac57, x, d, 3)
        jk = diffgrad.kstep_jacobian(grid57, fac57, res.tape, x, d)
        z_entry = res.tape.states[0]

        def block(xx):
            z = z_entry
            for _ in range(3):
                z, _ = pf.fdpf_step(grid57, fac57, z, xx, d)
            return z

        fd = diffgrad.finite_diff_jacobian(block, x)
        assert np.max(np.abs(jk - fd)) < 1e-5

    def test_vjp_matches_materialized_jacobian_fdpf(self, grid57, fac57):
        x = pf.nominal_decision(grid57)
        d = demand(grid57)
        res = self.kstep_setup(grid57, fac57, x, d, 4)
        jk = diffgrad.kstep_jacobian(grid57, fac57, res.tape, x, d)
        rng = np.random.default_rng(0)
        for _ in range(3):
            cot = rng.standard_normal(106)
            vjp = diffgrad.refinement_vjp(grid57, fac57, res.tape, x, d, cot)
            assert np.max(np.abs(vjp - jk.T @ cot)) < 1e-10

    def test_vjp_matches_materialized_jacobian_nr(self, grid57, fac57):
        x = pf.nominal_decision(grid57)
        d = demand(grid57)
        res = self.kstep_setup(grid57, fac57, x, d, 1, refine="nr")
        jk = diffgrad.kstep_jacobian(grid57, fac57, res.tape, x, d)
        rng = np.random.default_rng(1)
        cot = rng.standard_normal(106)
        vjp = diffgrad.refinement_vjp(grid57, fac57, res.tape, x, d, cot)
        assert np.max(np.abs(vjp - jk.T @ cot)) < 1e-10

    def test_nr_kstep_near_exact(self, grid57, fac57, nominal57):
        x, d, res_tight = nominal57
        res = self.kstep_setup(grid57, fac57, x, d, 1, refine="nr")
        jk = diffgrad.kstep_jacobian(grid57, fac57, res.tape, x, d)
        jh = diffgrad.exact_implicit_jacobian_h(grid57, res_tight.z, x, d)
        assert np.max(np.abs(jk - jh)) < 1e-6

    def test_error_decreases_with_k(self, grid57, fac57, nominal57):
        x, d, res_tight = nominal57
        jh = diffgrad.exact_implicit_jacobian_h(grid57, res_tight.z, x, d)
        errs = []
        for k in (1, 2, 4, 8):
            res = self.kstep_setup(grid57, fac57, x, d, k)
            jk = diffgrad.kstep_jacobian(grid57, fac57, res.tape, x, d)
            errs.append(np.linalg.norm(jk - jh, "fro")
                        / np.linalg.norm(jh, "fro"))
        assert errs[0] > errs[1] > errs[2] > errs[3]
        assert errs[3] < errs[0] / 100

    def test_none_refinement_zero_jacobian(self, grid57, fac57):
        x = pf.nominal_decision(grid57)
        d = demand(grid57)
        res = pf.hybrid_solve(grid57, fac57, x, d,
                              pf.SolverConfig(12, "none", 0), record=True)
        jk = diffgrad.kstep_jacobian(grid57, fac57, res.tape, x, d)
        assert np.all(jk == 0.0)
        vjp = diffgrad.refinement_vjp(grid57, fac57, res.tape, x, d,
                                      np.ones(106))
        assert np.all(vjp == 0.0)

    def test_chained_state_jacobian_is_product(self, grid57, fac57):
        x = pf.nominal_decision(grid57)
        d = demand(grid57)
        res = self.kstep_setup(grid57, fac57, x, d, 3)
        states = res.tape.states
        prod = np.eye(106)
        for z in states:
            dtdz, _ = diffgrad.fdpf_step_jacobians(grid57, fac57, z, x, d)
            prod = dtdz @ prod
        got = diffgrad.chained_state_jacobian(grid57, fac57, states, x, d)
        np.testing.assert_allclose(got, prod, atol=1e-12)
