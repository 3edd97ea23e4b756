"""CLI tests: every subcommand end to end on tiny cohorts, plus the exit-code
contract and output-file formats."""

import csv
import json
import os

import numpy as np
import pytest

from soctwin.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from soctwin.store import read_checkpoint, read_field, read_mask


def _read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def _patient_path(cohort_dir, idx=0):
    return os.path.join(cohort_dir, "patients", f"ag-{idx:03d}", "patient.json")


class TestGen:
    def test_deterministic_manifest(self, tmp_path):
        args = ["gen", "--kind", "AG", "--n", "2", "--seed", "5", "--grid", "32",
                "--scan-days", "0", "20", "40"]
        assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        ha = json.load(open(tmp_path / "a" / "cohort.json"))["content_hash"]
        hb = json.load(open(tmp_path / "b" / "cohort.json"))["content_hash"]
        assert ha == hb

    def test_seed_changes_hash(self, tmp_path):
        base = ["gen", "--n", "1", "--grid", "32", "--scan-days", "0", "20", "40"]
        main(base + ["--seed", "1", "--out", str(tmp_path / "a")])
        main(base + ["--seed", "2", "--out", str(tmp_path / "b")])
        ha = json.load(open(tmp_path / "a" / "cohort.json"))["content_hash"]
        hb = json.load(open(tmp_path / "b" / "cohort.json"))["content_hash"]
        assert ha != hb

    def test_invalid_grid_maps_to_validation_exit(self, tmp_path):
        rc = main(["gen", "--grid", "8", "--out", str(tmp_path / "x")])
        assert rc == EXIT_VALIDATION


class TestSimulate:
    def test_outputs(self, small_cohort, tmp_path):
        cohort_dir, _ = small_cohort
        out = str(tmp_path / "sim")
        rc = main(["simulate", "--patient", _patient_path(cohort_dir),
                   "--out", out, "--obs-density", "0.8"])
        assert rc == EXIT_OK
        header, rows = _read_csv(os.path.join(out, "volume.csv"))
        assert header == ["day", "volume_mm2"]
        days = [float(r[0]) for r in rows]
        assert days == sorted(days) and days[0] == 0.0 and days[-1] == 60.0
        assert all(float(r[1]) >= 0.0 for r in rows)
        fld, day = read_field(os.path.join(out, "pred_final.socf"))
        assert day == 60.0 and fld.values.shape == (32, 32)
        mask = read_mask(os.path.join(out, "pred_final_mask.pgm"))
        assert mask.shape == (32, 32)

    def test_horizon_extends_curve(self, small_cohort, tmp_path):
        cohort_dir, _ = small_cohort
        out = str(tmp_path / "sim")
        rc = main(["simulate", "--patient", _patient_path(cohort_dir),
                   "--out", out, "--horizon", "90"])
        assert rc == EXIT_OK
        _, rows = _read_csv(os.path.join(out, "volume.csv"))
        assert float(rows[-1][0]) == 90.0

    def test_rt_sensitivity(self, small_cohort, tmp_path):
        # more RT kill cannot leave more tumor (same growth, same schedule)
        cohort_dir, _ = small_cohort
        vols = {}
        for label, a_rt in (("hot", "0.2"), ("cold", "1e-9")):
            out = str(tmp_path / label)
            rc = main(["simulate", "--patient", _patient_path(cohort_dir),
                       "--out", out, "--alpha", "1.0", "--obs-density", "0.8",
                       "--param", f"alpha_rt={a_rt}", "--param", "beta_rt=1e-9"])
            assert rc == EXIT_OK
            _, rows = _read_csv(os.path.join(out, "volume.csv"))
            vols[label] = float(rows[-1][1])
        assert vols["hot"] < vols["cold"]

    def test_bad_param_flag(self, small_cohort, tmp_path):
        cohort_dir, _ = small_cohort
        rc = main(["simulate", "--patient", _patient_path(cohort_dir),
                   "--out", str(tmp_path / "x"), "--param", "bogus=1"])
        assert rc == EXIT_VALIDATION

    def test_missing_patient_maps_to_io_exit(self, tmp_path):
        rc = main(["simulate", "--patient", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "x")])
        assert rc == EXIT_IO


class TestCalibrate:
    def test_folds_outputs(self, small_cohort, tmp_path):
        cohort_dir, _ = small_cohort
        out = str(tmp_path / "calib")
        rc = main(["calibrate", "--cohort", cohort_dir, "--out", out,
                   "--k-folds", "3", "--iters", "2", "--seed", "1"])
        assert rc == EXIT_OK
        header, rows = _read_csv(os.path.join(out, "folds.csv"))
        assert header[0] == "fold" and len(rows) == 3
        for i in range(3):
            params, weights, optim = read_checkpoint(os.path.join(out, f"fold_{i}.json"))
            assert params.D > 0 and weights is None
            assert optim["fold"] == i
        # best train loss never exceeds the initial loss (fit contract)
        for r in rows:
            assert float(r[2]) <= float(r[1]) + 1e-12

    def test_deterministic(self, small_cohort, tmp_path):
        cohort_dir, _ = small_cohort
        outs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            rc = main(["--threads", "1", "calibrate", "--cohort", cohort_dir,
                       "--out", out, "--k-folds", "2", "--iters", "2", "--seed", "9"])
            assert rc == EXIT_OK
            outs.append(open(os.path.join(out, "folds.csv"), "rb").read())
        assert outs[0] == outs[1]

    def test_too_many_folds(self, small_cohort, tmp_path):
        cohort_dir, _ = small_cohort
        rc = main(["calibrate", "--cohort", cohort_dir, "--out", str(tmp_path / "x"),
                   "--k-folds", "10", "--iters", "1"])
        assert rc == EXIT_VALIDATION


class TestEval:
    def test_truth_checkpoint_scores_perfect_dsc(self, clean_cohort, tmp_path):
        # clean cohort + its own generating parameters + assimilation off
        # replays generation bit for bit, so DSC must be exactly 1.0 +- 0.0
        cohort_dir, _, ckpt = clean_cohort
        out = str(tmp_path / "eval")
        rc = main(["eval", "--cohort", cohort_dir, "--checkpoint", ckpt,
                   "--out", out, "--alpha", "1.0"])
        assert rc == EXIT_OK
        _, rows = _read_csv(os.path.join(out, "summary.csv"))
        stats = {r[0]: float(r[1]) for r in rows}
        assert stats["dsc_mean"] == 1.0
        assert stats["dsc_std"] == 0.0

    def test_eval_csv_shape(self, small_cohort, clean_cohort, tmp_path):
        cohort_dir, _ = small_cohort
        _, _, ckpt = clean_cohort
        out = str(tmp_path / "eval")
        rc = main(["eval", "--cohort", cohort_dir, "--checkpoint", ckpt, "--out", out])
        assert rc == EXIT_OK
        header, rows = _read_csv(os.path.join(out, "eval.csv"))
        assert header == ["patient", "dsc", "ttp_observed", "ttp_predicted"]
        assert len(rows) == 3
        for r in rows:
            assert 0.0 <= float(r[1]) <= 1.0

    def test_missing_cohort_maps_to_io_exit(self, clean_cohort, tmp_path):
        _, _, ckpt = clean_cohort
        rc = main(["eval", "--cohort", str(tmp_path / "ghost"), "--checkpoint", ckpt,
                   "--out", str(tmp_path / "x")])
        assert rc == EXIT_IO


class TestPlumbing:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--version"])
        assert e.value.code == 0
        assert "soctwin" in capsys.readouterr().out

    def test_bad_bind_address(self, small_cohort):
        cohort_dir, _ = small_cohort
        rc = main(["serve", "--cohort", cohort_dir, "--bind", "nonsense"])
        assert rc == EXIT_VALIDATION

    def test_bad_threads(self, small_cohort, tmp_path):
        cohort_dir, _ = small_cohort
        rc = main(["--threads", "0", "simulate", "--patient", _patient_path(cohort_dir),
                   "--out", str(tmp_path / "x")])
        assert rc == EXIT_VALIDATION

    def test_error_line_is_single_machine_parsable(self, tmp_path, capsys):
        rc = main(["simulate", "--patient", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "x")])
        assert rc == EXIT_IO
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith("error code=io message=")
