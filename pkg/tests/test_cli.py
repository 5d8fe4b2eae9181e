"""End-to-end command-line flows driven through main(argv) in-process:
exit codes, printed summaries, artifact layout, and a full
train/eval/constants/grad-check chain on a tiny configuration.
"""

import json
import os

import numpy as np
import pytest

from opflearn import caseio, cli, evaluate

from conftest import case_path


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestParse:
    def test_case57_summary_line(self, capsys):
        code, out, _ = run(capsys, "parse", case_path("case57.m"))
        assert code == 0
        assert ("case57: 57 buses, 7 generators, 80 branches, n=106, m=13"
                in out)

    def test_case118_summary_line(self, capsys):
        code, out, _ = run(capsys, "parse", case_path("case118.m"))
        assert code == 0
        assert "118 buses, 54 generators, 186 branches, n=181, m=107" in out

    def test_verbose_adds_partition_detail(self, capsys):
        code, out, _ = run(capsys, "--verbose", "parse", case_path("case57.m"))
        assert code == 0
        assert "slack=" in out and "demand" in out

    def test_missing_file_fails_cleanly(self, capsys):
        code, _, err = run(capsys, "parse", "/nonexistent/case.m")
        assert code == 1
        assert "error:" in err

    def test_malformed_file_fails_cleanly(self, capsys, tmp_path):
        bad = tmp_path / "bad.m"
        bad.write_text("function mpc = bad\nmpc.baseMVA = 100;\n")
        code, _, err = run(capsys, "parse", str(bad))
        assert code == 1
        assert "error:" in err


class TestPf:
    def test_hybrid_nominal_converges(self, capsys):
        code, out, _ = run(capsys, "pf", case_path("case57.m"),
                           "--guide", "9", "--refine", "nr", "--tol", "1e-5")
        assert code == 0
        assert "converged=True" in out

    @pytest.mark.parametrize("method", ["nr", "fdpf"])
    def test_plain_iterations_converge(self, capsys, method):
        code, out, _ = run(capsys, "pf", case_path("case57.m"),
                           "--method", method, "--tol", "1e-8")
        assert code == 0
        assert "converged=True" in out

    def test_starved_budget_reports_failure(self, capsys):
        code, out, _ = run(capsys, "pf", case_path("case57.m"),
                           "--method", "fdpf", "--max-iter", "1",
                           "--tol", "1e-10")
        assert code == 1
        assert "converged=False" in out


class TestGenData:
    def test_artifacts_and_determinism(self, capsys, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            code, msg, _ = run(capsys, "gen-data", case_path("case57.m"),
                               "--count", "12", "--seed", "5",
                               "--name", "ds.npz", "--out", str(out))
            assert code == 0
            assert "12 samples" in msg
            outs.append(out)
        a = caseio.load_dataset(str(outs[0] / "ds.npz"))
        b = caseio.load_dataset(str(outs[1] / "ds.npz"))
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.is_train, b.is_train)
        manifest = json.loads((outs[0] / "manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["config"]["seed"] == 5
        assert "versions" in manifest

    def test_outdir_env_var(self, capsys, tmp_path, monkeypatch):
        target = tmp_path / "from_env"
        monkeypatch.setenv("OPFLEARN_OUTDIR", str(target))
        code, _, _ = run(capsys, "gen-data", case_path("case57.m"),
                         "--count", "4", "--name", "ds.npz")
        assert code == 0
        assert (target / "ds.npz").exists()


@pytest.fixture(scope="class")
def tiny_run(tmp_path_factory):
    """gen-data + train once; the chain tests below share the artifacts."""
    root = tmp_path_factory.mktemp("cli_chain")
    case = case_path("case57.m")
    assert cli.main(["gen-data", case, "--count", "8", "--split", "0.5",
                     "--seed", "3", "--name", "ds.npz",
                     "--out", str(root)]) == 0
    cfg = {"outer_iters": 1, "inner_epochs": 2, "batch_size": 4,
           "lr_primal": 1e-3, "lr_lambda": 10.0, "lr_nu": 50.0, "seed": 2,
           "hidden": [8, 6], "mode": "kstep", "guide_steps": 8,
           "refine": "fdpf", "refine_steps": 4, "tolerance": 1e-5}
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    train_dir = root / "run1"
    assert cli.main(["train", case, "--config", str(cfg_path),
                     "--data", str(root / "ds.npz"),
                     "--out", str(train_dir)]) == 0
    return root, case, cfg_path, train_dir


class TestTrainChain:
    def test_train_artifacts(self, tiny_run):
        root, case, cfg_path, train_dir = tiny_run
        for name in ("checkpoint.npz", "duals.npz", "metrics_train.csv",
                     "metrics_test.csv", "manifest.json"):
            assert (train_dir / name).exists(), name
        rows = caseio.read_metrics_csv(str(train_dir / "metrics_test.csv"))
        assert len(rows) == 2  # one per epoch
        manifest = json.loads((train_dir / "manifest.json").read_text())
        assert manifest["config"]["train"]["hidden"] == [8, 6]

    def test_repeat_training_is_bit_identical(self, tiny_run, capsys):
        root, case, cfg_path, train_dir = tiny_run
        again = root / "run2"
        assert cli.main(["train", case, "--config", str(cfg_path),
                         "--data", str(root / "ds.npz"),
                         "--out", str(again)]) == 0
        capsys.readouterr()
        for name in ("metrics_train.csv", "metrics_test.csv"):
            assert (train_dir / name).read_bytes() == \
                (again / name).read_bytes()

    def test_eval_checkpoint(self, tiny_run, capsys, tmp_path):
        root, case, cfg_path, train_dir = tiny_run
        out = tmp_path / "eval"
        code, msg, _ = run(capsys, "eval", case,
                           "--checkpoint", str(train_dir / "checkpoint.npz"),
                           "--data", str(root / "ds.npz"),
                           "--split", "all", "--guide", "8",
                           "--refine", "fdpf", "--refine-steps", "4",
                           "--out", str(out))
        assert code == 0
        assert msg.count("cost") >= 2  # train and test lines
        rows = caseio.read_metrics_csv(str(out / "metrics_eval.csv"))
        assert len(rows) == 2

    def test_eval_rejects_foreign_grid(self, tiny_run, capsys, tmp_path):
        root, _, _, train_dir = tiny_run
        code, _, err = run(capsys, "eval", case_path("case118.m"),
                           "--checkpoint", str(train_dir / "checkpoint.npz"),
                           "--data", str(root / "ds.npz"),
                           "--out", str(tmp_path))
        assert code == 1
        assert "error:" in err

    def test_estimate_constants(self, tiny_run, capsys, tmp_path):
        root, case, cfg_path, train_dir = tiny_run
        out = tmp_path / "constants"
        code, msg, _ = run(capsys, "estimate-constants", case,
                           "--checkpoint", str(train_dir / "checkpoint.npz"),
                           "--data", str(root / "ds.npz"),
                           "--duals", str(train_dir / "duals.npz"),
                           "--samples", "2", "--k-list", "1,2",
                           "--out", str(out))
        assert code == 0
        assert "rho1=" in msg
        rows = evaluate.read_alignment_csv(str(out / "alignment.csv"))
        assert [r["K_R"] for r in rows] == [1, 2]
        payload = json.loads((out / "constants.json").read_text())
        assert payload["samples_used"] == 2

    def test_grad_check_passes(self, capsys):
        code, out, _ = run(capsys, "grad-check", case_path("case57.m"),
                           "--samples", "1", "--params", "12")
        assert code == 0
        assert "grad-check passed" in out


class TestUsageErrors:
    def test_no_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["parse", "--bogus", "x"])
        assert exc.value.code == 2

    def test_bad_choice(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["pf", case_path("case57.m"), "--method", "secant"])
        assert exc.value.code == 2
