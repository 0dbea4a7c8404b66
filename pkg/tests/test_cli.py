"""CLI contracts: manifest-driven byte-exact reruns across worker counts,
deterministic printed summaries, lossless CSV round trips, and the exit-code
mapping."""

import json
import math
import subprocess
import sys

import pytest

from mlmc_evidence.cli import main, parse_level_range, parse_vector
from mlmc_evidence.errors import ContractViolation


def run_cli(capsys, *argv):
    try:
        code = main(list(argv))
    except SystemExit as exc:  # argparse usage errors
        code = exc.code if isinstance(exc.code, int) else 1
    out = capsys.readouterr()
    return code, out.out, out.err


class TestParsers:
    def test_vector(self):
        assert parse_vector("1,0,-0.693") == [1.0, 0.0, -0.693]
        assert parse_vector("1e-3,2.5E2") == [0.001, 250.0]
        with pytest.raises(ContractViolation):
            parse_vector("1,abc")

    def test_level_range(self):
        assert parse_level_range("1..7") == [1, 2, 3, 4, 5, 6, 7]
        assert parse_level_range("3") == [3]


class TestGenData:
    def test_round_trip_bytes(self, tmp_path, capsys):
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        argv = ["gen-data", "--model", "gaussian", "--n", "200",
                "--theta", "1,0,-0.693", "--seed", "3"]
        code1, line1, _ = run_cli(capsys, *argv, "--out", str(out1))
        code2, line2, _ = run_cli(capsys, *argv, "--out", str(out2))
        assert code1 == code2 == 0
        assert (out1 / "dataset.txt").read_bytes() == (out2 / "dataset.txt").read_bytes()
        assert (out1 / "dataset.txt.json").read_bytes() == (out2 / "dataset.txt.json").read_bytes()
        header = json.loads((out1 / "dataset.txt.json").read_text())
        assert header == {"dim": 1, "n_total": 200, "seed": 3,
                          "true_theta": [1.0, 0.0, -0.693]}

    def test_reload_matches(self, tmp_path, capsys):
        from mlmc_evidence.models import load_dataset, save_dataset

        out = tmp_path / "d"
        code, _, _ = run_cli(capsys, "gen-data", "--model", "bernoulli", "--n", "64",
                             "--seed", "9", "--out", str(out))
        assert code == 0
        data, header = load_dataset(out / "dataset.txt")
        assert data.n_total == 64
        resaved = tmp_path / "resaved.txt"
        save_dataset(resaved, data, header["seed"], header["true_theta"])
        assert resaved.read_bytes() == (out / "dataset.txt").read_bytes()


class TestEstimate:
    def test_deterministic_output_line(self, tmp_path, capsys):
        argv = ["estimate", "--model", "gaussian", "--n0", "8", "--batch", "64",
                "--seed", "7"]
        code1, line1, _ = run_cli(capsys, *argv, "--out", str(tmp_path / "r1"))
        code2, line2, _ = run_cli(capsys, *argv, "--out", str(tmp_path / "r2"))
        assert code1 == code2 == 0
        assert line1 == line2
        assert line1.startswith("log-evidence estimate ")
        j1 = (tmp_path / "r1" / "estimate.json").read_bytes()
        j2 = (tmp_path / "r2" / "estimate.json").read_bytes()
        assert j1 == j2

    def test_worker_count_does_not_change_bytes(self, tmp_path, capsys):
        outs = []
        for w in (1, 2, 8):
            out = tmp_path / f"w{w}"
            code, _, _ = run_cli(
                capsys, "estimate", "--seed", "11", "--batch", "32",
                "--workers", str(w), "--out", str(out),
            )
            assert code == 0
            outs.append(out)
        ref_est = (outs[0] / "estimate.json").read_bytes()
        ref_man = (outs[0] / "manifest.json").read_bytes()
        for out in outs[1:]:
            assert (out / "estimate.json").read_bytes() == ref_est
            assert (out / "manifest.json").read_bytes() == ref_man

    def test_rerun_from_manifest(self, tmp_path, capsys):
        first = tmp_path / "first"
        code, line1, _ = run_cli(capsys, "estimate", "--seed", "5", "--batch", "16",
                                 "--phi", "0,0,0.3466", "--out", str(first))
        assert code == 0
        for w in ("1", "2", "8"):
            replay = tmp_path / f"replay{w}"
            code, line2, _ = run_cli(capsys, "rerun", "--manifest",
                                     str(first / "manifest.json"),
                                     "--out", str(replay), "--workers", w)
            assert code == 0
            assert line2 == line1
            for name in ("estimate.json", "manifest.json"):
                assert (replay / name).read_bytes() == (first / name).read_bytes()

    def test_loads_dataset_from_file(self, tmp_path, capsys):
        data_dir = tmp_path / "data"
        code, _, _ = run_cli(capsys, "gen-data", "--n", "40", "--seed", "2",
                             "--out", str(data_dir))
        assert code == 0
        code, line, _ = run_cli(capsys, "estimate", "--data",
                                str(data_dir / "dataset.txt"), "--seed", "4",
                                "--out", str(tmp_path / "est"))
        assert code == 0
        payload = json.loads((tmp_path / "est" / "estimate.json").read_text())
        assert math.isfinite(payload["value"])


class TestVarianceProfileCommand:
    def test_writes_profile_and_fit(self, tmp_path, capsys):
        out = tmp_path / "vp"
        code, line, _ = run_cli(
            capsys, "variance-profile", "--levels", "1..4", "--reps", "150",
            "--seed", "3", "--out", str(out),
        )
        assert code == 0
        assert "variance decay slope" in line
        rows = (out / "profile.csv").read_text().splitlines()
        assert len(rows) == 1 + 4
        fit = json.loads((out / "fit.json").read_text())
        assert fit["slope_var_z"] < 0

    def test_csv_parses_back_losslessly(self, tmp_path, capsys):
        from mlmc_evidence.diagnostics import read_level_stats_csv, write_level_stats_csv

        out = tmp_path / "vp"
        run_cli(capsys, "variance-profile", "--levels", "1..3", "--reps", "120",
                "--seed", "3", "--out", str(out))
        stats = read_level_stats_csv(out / "profile.csv")
        rewritten = tmp_path / "again.csv"
        write_level_stats_csv(stats, rewritten)
        assert rewritten.read_bytes() == (out / "profile.csv").read_bytes()


class TestMomentsCommand:
    def test_moments_artifact(self, tmp_path, capsys):
        out = tmp_path / "m"
        code, line, _ = run_cli(
            capsys, "moments", "--s", "4.5", "--t", "3", "--draws", "20000",
            "--phi", "0,0,0.3466", "--seed", "5", "--out", str(out),
        )
        assert code == 0
        payload = json.loads((out / "moments.json").read_text())
        assert payload["s_exponent"] == 4.5
        assert not payload["tail_warning"]
        assert "s-moment" in line


class TestGradCheckCommand:
    @pytest.mark.parametrize("model", ["gaussian", "bernoulli"])
    def test_passes_on_both_models(self, tmp_path, capsys, model):
        out = tmp_path / f"gc-{model}"
        code, line, _ = run_cli(
            capsys, "grad-check", "--model", model, "--points", "25",
            "--reps", "400", "--batch", "4", "--n", "12", "--seed", "6",
            "--out", str(out),
        )
        assert code == 0, line
        assert line.startswith("PASS")
        payload = json.loads((out / "gradcheck.json").read_text())
        assert payload["passed"] is True
        assert payload["fd_max_rel_err"] <= 1e-6


class TestTrainCommand:
    def test_short_training_run(self, tmp_path, capsys):
        out = tmp_path / "t"
        code, line, _ = run_cli(
            capsys, "train", "--steps", "40", "--eval-every", "20",
            "--eval-reps", "2", "--batch", "4", "--n", "30", "--seed", "8",
            "--out", str(out),
        )
        assert code == 0
        assert line.startswith("trained 40 steps")
        rows = (out / "records.csv").read_text().splitlines()
        assert rows[0].startswith("step,")
        assert len(rows) == 1 + 3  # steps 0, 20, 40
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seed"] == 8
        assert summary["total_cost"] > 0

    def test_rerun_reproduces_training(self, tmp_path, capsys):
        first = tmp_path / "t1"
        code, line1, _ = run_cli(
            capsys, "train", "--steps", "30", "--eval-every", "15",
            "--eval-reps", "2", "--batch", "4", "--n", "20", "--seed", "9",
            "--out", str(first),
        )
        assert code == 0
        replay = tmp_path / "t2"
        code, line2, _ = run_cli(
            capsys, "rerun", "--manifest", str(first / "manifest.json"),
            "--out", str(replay), "--workers", "2",
        )
        assert code == 0
        assert line1 == line2
        for name in ("records.csv", "summary.json", "manifest.json"):
            assert (replay / name).read_bytes() == (first / name).read_bytes()


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, tmp_path):
        # argparse errors are remapped from its default 2 to the usage code 1
        proc = subprocess.run(
            [sys.executable, "-m", "mlmc_evidence.cli", "estimate", "--bogus", "1",
             "--out", str(tmp_path / "x")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 1

    def test_bad_vector_is_contract_error(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "estimate", "--theta", "nope",
                               "--out", str(tmp_path / "x"))
        assert code == 1
        assert "error" in err

    def test_missing_dataset_path(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "estimate", "--data",
                               str(tmp_path / "absent.txt"), "--out", str(tmp_path / "x"))
        assert code == 1

    def test_resource_guard_exit_two(self, tmp_path, capsys):
        # a level cap of 1 is virtually certain to trip within 64 draws
        code, _, err = run_cli(
            capsys, "estimate", "--level-cap", "1", "--batch", "64", "--seed", "1",
            "--out", str(tmp_path / "x"),
        )
        assert code == 2
        assert "level cap" in err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_two(self, tmp_path, capsys):
        code, _, err = run_cli(
            capsys, "train", "--steps", "400", "--lr-theta", "50", "--lr-phi", "50",
            "--batch", "4", "--n", "30", "--eval-reps", "1", "--seed", "1",
            "--out", str(tmp_path / "x"),
        )
        assert code == 2

    def test_wrong_dim_vector_rejected(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "estimate", "--theta", "1,2",
                               "--out", str(tmp_path / "x"))
        assert code == 1
