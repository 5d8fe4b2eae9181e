"""Evaluation metrics, the norm helpers behind the alignment bound, the
bound algebra itself, and the study/CSV plumbing.
"""

import json

import numpy as np
import pytest

from opflearn import caseio, evaluate, model as model_mod, pf, train


@pytest.fixture()
def tiny_setup(case57, grid57, fac57):
    ds = caseio.generate_dataset(case57, count=6, scale_range=(0.95, 1.05),
                                 split_fraction=0.5, seed=33)
    mdl = model_mod.init_model(grid57, hidden=(8, 6), seed=9)
    model_mod.fit_scaler(mdl, ds.samples[ds.train_indices])
    cfg = pf.SolverConfig(guide_steps=8, refine="fdpf", refine_steps=4,
                          tolerance=1e-5)
    return ds, mdl, cfg


class TestEvaluateSplit:
    def test_aggregates_match_manual_loop(self, grid57, fac57, tiny_setup):
        ds, mdl, cfg = tiny_setup
        idx = ds.test_indices
        rec = evaluate.evaluate_split(mdl, grid57, fac57, ds, idx, cfg,
                                      epoch=7)
        assert rec.epoch == 7

        costs, eq_means, viol_counts, eq_max = [], [], [], 0.0
        for i in idx:
            fwd = train.forward_full(mdl, grid57, fac57, ds.samples[i], cfg)
            assert fwd.result.converged
            g = train.inequality_values(grid57, fwd.bundle)
            h = train.equality_values(grid57, fwd.bundle, ds.samples[i])
            costs.append(train.objective_cost(grid57, fwd.bundle.pg))
            eq_means.append(np.abs(h).mean())
            eq_max = max(eq_max, np.abs(h).max())
            viol_counts.append(int((g > 1e-4).sum()))
        assert rec.objective_cost == pytest.approx(np.mean(costs), rel=1e-12)
        assert rec.eq_mean_mismatch == pytest.approx(np.mean(eq_means))
        assert rec.eq_max_mismatch == pytest.approx(eq_max)
        assert rec.ineq_viol_num == sum(viol_counts)
        assert rec.objective_gap_pct is None  # no reference costs supplied

    def test_gap_only_over_referenced_rows(self, grid57, fac57, tiny_setup):
        ds, mdl, cfg = tiny_setup
        idx = list(ds.test_indices)
        fwd = train.forward_full(mdl, grid57, fac57, ds.samples[idx[0]], cfg)
        cost0 = train.objective_cost(grid57, fwd.bundle.pg)
        refs = caseio.ReferenceSet({int(idx[0]): cost0 * 2.0}, {})
        rec = evaluate.evaluate_split(mdl, grid57, fac57, ds, idx, cfg,
                                      refs=refs)
        # one referenced row at half its reference cost: gap = -50%
        assert rec.objective_gap_pct == pytest.approx(-50.0, rel=1e-9)

    def test_diverged_samples_skipped(self, grid57, fac57, tiny_setup):
        ds, mdl, cfg = tiny_setup
        idx = ds.test_indices
        rec_all = evaluate.evaluate_split(mdl, grid57, fac57, ds, idx, cfg)
        ds.samples[idx[0]] *= 60.0  # unsolvable loading
        rec = evaluate.evaluate_split(mdl, grid57, fac57, ds, idx, cfg)
        survivors = []
        for i in idx[1:]:
            fwd = train.forward_full(mdl, grid57, fac57, ds.samples[i], cfg)
            survivors.append(train.objective_cost(grid57, fwd.bundle.pg))
        assert rec.objective_cost == pytest.approx(np.mean(survivors))
        assert rec.objective_cost != rec_all.objective_cost


class TestNormHelpers:
    def test_spectral_norm_vs_numpy(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            a = rng.normal(size=(9, 6))
            want = np.linalg.svd(a, compute_uv=False)[0]
            assert evaluate.spectral_norm(a) == pytest.approx(want, rel=1e-12)

    def test_chained_radius_applies_first_matrix_first(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(4, 4))
        b = rng.normal(size=(4, 4))
        want = np.max(np.abs(np.linalg.eigvals(b @ a)))
        assert evaluate.chained_radius([a, b]) == pytest.approx(want, rel=1e-12)

    def test_chained_radius_equals_norm_for_symmetric_map(self):
        # for T(z) = Az with A symmetric the radius and the norm agree,
        # so the k-fold chain reproduces ||A^k|| exactly
        rng = np.random.default_rng(6)
        a = rng.normal(size=(5, 5))
        a = 0.5 * (a + a.T)
        want = np.linalg.svd(a @ a @ a, compute_uv=False)[0]
        assert evaluate.chained_radius([a, a, a]) == pytest.approx(want, rel=1e-12)

    def test_sigma_a_matches_dense_jacobian(self, grid57):
        mdl = model_mod.init_model(grid57, hidden=(8, 6), seed=15)
        d = np.concatenate([grid57.pd, grid57.qd])
        _, cache = model_mod.model_forward(mdl, d)
        n_theta = model_mod.pack_params(mdl).size
        jac = np.empty((grid57.part.n_decision, n_theta))
        eye = np.eye(n_theta)
        for j in range(n_theta):
            jac[:, j] = model_mod.model_jvp(mdl, cache, eye[j])
        want = np.linalg.svd(jac, compute_uv=False)[0]
        got = evaluate.estimate_sigma_a(mdl, cache, iters=60, seed=2)
        assert got == pytest.approx(want, rel=1e-4)

    def test_lipschitz_quotient_exact_for_scaling(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=7)
        got = evaluate._lipschitz_quotient(lambda v: -3.5 * v, z,
                                           radius=1e-3, n_dirs=4, rng=rng)
        assert got == pytest.approx(3.5, rel=1e-9)


class TestBoundAlgebra:
    def constants(self, **kw):
        base = dict(rho1=0.4, rho_k={1: 0.4, 2: 0.16, 4: 0.0256},
                    l_t=2.0, l_j=5.0, l_x=3.0, l_z=1.5, c_z=10.0,
                    sigma_j=2.5, c_g=100.0, sigma_a=4.0, d0=0.1)
        base.update(kw)
        return evaluate.TheoremConstants(**base)

    def test_c1_identity(self):
        c = self.constants()
        want = c.rho1 * (c.l_x + c.l_z * c.sigma_j) + c.c_z * c.l_j
        assert c.c_1 == want == 0.4 * (3.0 + 1.5 * 2.5) + 10.0 * 5.0

    def test_eps_decomposition(self):
        c = self.constants()
        tail = (c.sigma_a / c.c_g) * (c.rho1 * c.l_t * c.c_z / (1 - c.rho1))
        assert c.eps_inf == pytest.approx(tail)
        for k in (1, 2, 4):
            want = c.eps_inf + (c.sigma_a / c.c_g) * (c.rho_k[k] * c.d0 * c.c_1)
            assert c.eps(k) == pytest.approx(want)

    def test_eps_nonincreasing_when_contraction_shrinks(self):
        c = self.constants()
        eps = [c.eps(k) for k in (1, 2, 4)]
        assert eps[0] >= eps[1] >= eps[2] > c.eps_inf

    def test_eps_inf_diverges_without_contraction(self):
        assert self.constants(rho1=1.0).eps_inf == float("inf")
        assert self.constants(c_g=0.0).eps_inf == float("inf")

    def test_cosine_bound_frozen_points(self):
        bound = evaluate.TheoremConstants.cosine_bound
        assert bound(0.0) == 1.0
        assert bound(0.5) == pytest.approx(1.0 / 3.0)
        assert np.isnan(bound(1.0))
        assert np.isnan(bound(float("inf")))

    def test_to_dict_includes_derived(self):
        c = self.constants()
        d = c.to_dict()
        assert d["c_1"] == c.c_1
        assert d["eps_inf"] == c.eps_inf
        assert d["rho_k"] == {1: 0.4, 2: 0.16, 4: 0.0256}


class TestAlignmentStudy:
    def test_structure_and_contraction_chain(self, grid57, fac57,
                                              tiny_setup, tmp_path):
        ds, mdl, _ = tiny_setup
        duals = train.DualState.zeros(grid57)
        rows, constants, n_used = evaluate.alignment_study(
            mdl, grid57, fac57, ds, ds.test_indices[:2], duals,
            k_list=[1, 2], lip_dirs=3)
        assert n_used == 2
        assert [r["K_R"] for r in rows] == [1, 2]
        for row in rows:
            assert set(row) == set(evaluate.ALIGNMENT_COLUMNS)
            assert -1.0 <= row["cosine_mean"] <= 1.0
            assert row["relerr_mean"] >= 0.0
        # chaining another sweep cannot grow the contraction estimate past
        # one factor of the single-sweep value (small slack: the radius is
        # only approximately multiplicative across nearby states)
        assert constants.rho_k[2] <= constants.rho1 * constants.rho_k[1] * 1.05
        assert constants.c_g < np.inf
        assert constants.d0 > 0.0
        assert constants.sigma_j > 0.0

        path = tmp_path / "constants.json"
        evaluate.write_constants_json(str(path), constants,
                                      extra={"n_used": n_used})
        payload = json.loads(path.read_text())
        assert payload["n_used"] == 2
        assert payload["rho_k"]["1"] == constants.rho_k[1]
        assert payload["c_1"] == pytest.approx(constants.c_1)

    def test_no_usable_samples_raises(self, grid57, fac57, tiny_setup):
        ds, mdl, _ = tiny_setup
        ds.samples = ds.samples * 60.0
        duals = train.DualState.zeros(grid57)
        with pytest.raises(RuntimeError):
            evaluate.alignment_study(mdl, grid57, fac57, ds, [0], duals,
                                     k_list=[1])


class TestAlignmentCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        rows = []
        for k in (1, 2, 4, 8):
            row = {c: float(rng.uniform(0, 2)) for c in
                   evaluate.ALIGNMENT_COLUMNS}
            row["K_R"] = k
            rows.append(row)
        path = tmp_path / "alignment.csv"
        evaluate.write_alignment_csv(str(path), rows)
        back = evaluate.read_alignment_csv(str(path))
        assert [r["K_R"] for r in back] == [1, 2, 4, 8]
        for a, b in zip(rows, back):
            for col in evaluate.ALIGNMENT_COLUMNS:
                assert a[col] == b[col]  # %.17e is lossless for doubles

    def test_column_contract(self):
        assert evaluate.ALIGNMENT_COLUMNS == [
            "K_R", "cosine_mean", "cosine_std", "relerr_mean", "relerr_std",
            "rho_k", "L_T", "L_J", "C_1", "eps_k", "eps_inf", "bound",
            "bound_inf",
        ]
