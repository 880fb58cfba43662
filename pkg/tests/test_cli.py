import json
import time

import numpy as np
import pytest
from oracles import conformal_order_statistic

from aacrc.cli import EXIT_CERTIFICATE, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from aacrc.formats import (
    SEG_HEADER,
    read_embedding,
    read_regression_csv,
    read_thresholds,
    write_regression_csv,
    write_segmentation_bin,
)
from aacrc.tasks import SegmentationSample


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def reg_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("reg")
    code = run("simulate", "--task", "regression", "--n-residual", 300, "--n-calibration", 100, "--n-test", 50, "--seed", 1, "--out", out)
    assert code == EXIT_OK
    return out


class TestSimulate:
    def test_regression_line_count(self, reg_dir):
        assert len((reg_dir / "calibration.csv").read_text().splitlines()) == 101
        assert (reg_dir / "residual.csv").exists()

    def test_manifest_records_seed(self, reg_dir):
        doc = json.loads((reg_dir / "manifest.json").read_text())
        assert all(e["seed"] == 1 for e in doc["files"].values())

    def test_same_seed_is_byte_identical(self, reg_dir, tmp_path):
        run("simulate", "--task", "regression", "--n-residual", 300, "--n-calibration", 100, "--n-test", 50, "--seed", 1, "--out", tmp_path)
        for name in ("residual.csv", "calibration.csv", "test.csv"):
            assert (tmp_path / name).read_bytes() == (reg_dir / name).read_bytes()

    def test_other_seed_differs(self, reg_dir, tmp_path):
        run("simulate", "--task", "regression", "--n-residual", 0, "--n-calibration", 100, "--n-test", 50, "--seed", 2, "--out", tmp_path)
        assert (tmp_path / "calibration.csv").read_bytes() != (reg_dir / "calibration.csv").read_bytes()
        assert not (tmp_path / "residual.csv").exists()

    def test_segmentation_container(self, tmp_path):
        code = run(
            "simulate", "--task", "segmentation", "--count", 6, "--d1", 16, "--d2", 16,
            "--n-residual", 0, "--n-calibration", 4, "--n-test", 2, "--out", tmp_path,
        )
        assert code == EXIT_OK
        raw = (tmp_path / "calibration.bin").read_bytes()
        _, version, d1, d2, count, _ = SEG_HEADER.unpack_from(raw)
        assert (version, d1, d2, count) == (1, 16, 16, 4)
        ids, E = read_embedding(tmp_path / "calibration.emb")
        assert ids.tolist() == [0, 1, 2, 3] and E.shape == (4, 8)


class TestRfEmbed:
    def test_one_leaf_per_tree(self, reg_dir, tmp_path):
        code = run("rf-embed", "--residual", reg_dir / "residual.csv", "--inputs", reg_dir / "test.csv", "--trees", 20, "--seed", 1, "--out", tmp_path)
        assert code == EXIT_OK
        _, E = read_embedding(tmp_path / "test.leaf.emb")
        assert E.shape[0] == 50 and np.all(E.sum(axis=1) == 20)

    def test_reloaded_model_gives_identical_file(self, reg_dir, tmp_path):
        run("rf-embed", "--residual", reg_dir / "residual.csv", "--inputs", reg_dir / "test.csv", "--trees", 5, "--out", tmp_path / "a")
        run("rf-embed", "--model", tmp_path / "a" / "forest.json", "--inputs", reg_dir / "test.csv", "--out", tmp_path / "b")
        assert (tmp_path / "a" / "test.leaf.emb").read_bytes() == (tmp_path / "b" / "test.leaf.emb").read_bytes()

    def test_depth_zero_rows_identical(self, reg_dir, tmp_path):
        run("rf-embed", "--residual", reg_dir / "residual.csv", "--inputs", reg_dir / "test.csv", "--trees", 3, "--max-depth", 0, "--out", tmp_path)
        _, E = read_embedding(tmp_path / "test.leaf.emb")
        assert np.all(E == E[0])

    def test_needs_source(self, tmp_path):
        assert run("rf-embed", "--out", tmp_path) == EXIT_CONFIG


class TestCalibrate:
    def test_intercept_is_order_statistic(self, reg_dir, tmp_path):
        code = run(
            "calibrate", "--task", "regression", "--function-class", "intercept", "--alpha", 0.1,
            "--calibration", reg_dir / "calibration.csv", "--test", reg_dir / "test.csv", "--baseline", "crc", "--out", tmp_path,
        )
        assert code == EXIT_OK
        _, t, base = read_thresholds(tmp_path / "thresholds.csv")
        cal = read_regression_csv(reg_dir / "calibration.csv")
        q = conformal_order_statistic(list(np.abs(cal.y - cal.f_hat)), 0.1)
        assert np.all(t == t[0])
        assert t[0] == pytest.approx(q, abs=1e-9)
        assert base[0] == pytest.approx(q, abs=1e-9)

    def test_groups_and_rf_leaf(self, reg_dir, tmp_path):
        for fc in ("groups", "rf-leaf"):
            extra = []
            if fc == "rf-leaf":
                run("rf-embed", "--residual", reg_dir / "residual.csv", "--trees", 5, "--out", tmp_path / "m")
                extra = ["--model", tmp_path / "m" / "forest.json"]
            code = run(
                "calibrate", "--function-class", fc, "--calibration", reg_dir / "calibration.csv",
                "--test", reg_dir / "test.csv", "--out", tmp_path / fc, *extra,
            )
            assert code == EXIT_OK
            assert len((tmp_path / fc / "certificate.csv").read_text().splitlines()) == 51

    def test_duplicate_test_ids(self, reg_dir, tmp_path):
        write_regression_csv(tmp_path / "dup.csv", [0, 0], [1.0, 2.0], [1.0, 1.0], [1.0, 1.0])
        code = run("calibrate", "--function-class", "intercept", "--calibration", reg_dir / "calibration.csv", "--test", tmp_path / "dup.csv", "--out", tmp_path)
        assert code == EXIT_DATA

    def test_embedding_needs_features(self, tmp_path):
        seg = tmp_path / "seg"
        run("simulate", "--task", "segmentation", "--count", 8, "--d1", 16, "--d2", 16, "--n-residual", 0, "--n-calibration", 5, "--n-test", 3, "--out", seg)
        base = ["calibrate", "--task", "segmentation", "--function-class", "embedding", "--calibration", seg / "calibration.bin", "--test", seg / "test.bin"]
        assert run(*base, "--out", tmp_path / "a") == EXIT_CONFIG
        code = run(*base, "--cal-features", seg / "calibration.emb", "--test-features", seg / "test.emb", "--out", tmp_path / "b")
        assert code == EXIT_OK


class TestEvaluate:
    def test_perfect_scores_full_recall(self, tmp_path):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:5, 2:5] = True
        samples = [SegmentationSample(mask.astype(float), mask) for _ in range(3)]
        write_segmentation_bin(tmp_path / "test.bin", samples, seed=0)
        (tmp_path / "t.csv").write_text("id,threshold\n0,0.5\n1,0.5\n2,0.5\n")
        code = run("evaluate", "--task", "segmentation", "--test", tmp_path / "test.bin", "--thresholds", tmp_path / "t.csv", "--out", tmp_path / "o")
        assert code == EXIT_OK
        rec = json.loads((tmp_path / "o" / "report.json").read_text())["records"][0]
        assert rec["recall_mean"] == 1.0 and rec["precision_mean"] == 1.0

    def test_regression_rerun_identical(self, reg_dir, tmp_path):
        run("calibrate", "--function-class", "intercept", "--calibration", reg_dir / "calibration.csv", "--test", reg_dir / "test.csv", "--baseline", "crc", "--out", tmp_path / "c")
        for sub in ("e1", "e2"):
            assert run("evaluate", "--test", reg_dir / "test.csv", "--thresholds", tmp_path / "c" / "thresholds.csv", "--out", tmp_path / sub) == EXIT_OK
        for name in ("report.json", "report.csv", "pairs.csv"):
            assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
        header = (tmp_path / "e1" / "pairs.csv").read_text().splitlines()[0]
        assert header == "id,threshold,miscovered,crc_threshold,crc_miscovered"

    def test_empty_test_set(self, tmp_path):
        (tmp_path / "empty.csv").write_text("id,x,y,f_hat\n")
        (tmp_path / "t.csv").write_text("id,threshold\n")
        assert run("evaluate", "--test", tmp_path / "empty.csv", "--thresholds", tmp_path / "t.csv", "--out", tmp_path / "o") == EXIT_DATA

    def test_missing_thresholds(self, reg_dir, tmp_path):
        (tmp_path / "t.csv").write_text("id,threshold\n0,1.0\n")
        assert run("evaluate", "--test", reg_dir / "test.csv", "--thresholds", tmp_path / "t.csv", "--out", tmp_path / "o") == EXIT_DATA


class TestExitCodes:
    def test_bad_alpha(self, reg_dir, tmp_path):
        assert run("calibrate", "--alpha", 0, "--calibration", reg_dir / "calibration.csv", "--test", reg_dir / "test.csv", "--out", tmp_path) == EXIT_CONFIG

    def test_wrong_file_kind(self, reg_dir, tmp_path):
        code = run("calibrate", "--function-class", "intercept", "--calibration", reg_dir / "residual.csv", "--test", reg_dir / "test.csv", "--out", tmp_path)
        assert code == EXIT_DATA

    def test_missing_file(self, tmp_path):
        assert run("calibrate", "--function-class", "intercept", "--calibration", tmp_path / "nope.csv", "--test", tmp_path / "nope.csv", "--out", tmp_path) == EXIT_DATA

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text('{"bogus": 1}')
        assert run("config", "validate", "--config", tmp_path / "c.json") == EXIT_CONFIG

    def test_certificate_failure(self, reg_dir, tmp_path, monkeypatch):
        import aacrc.cli as cli

        real = cli.calibrate_batch

        def broken(*a, **kw):
            from dataclasses import replace

            return [replace(f, converged=False, status="optimal") for f in real(*a, **kw)]

        monkeypatch.setattr(cli, "calibrate_batch", broken)
        code = run("calibrate", "--function-class", "intercept", "--calibration", reg_dir / "calibration.csv", "--test", reg_dir / "test.csv", "--out", tmp_path)
        assert code == EXIT_CERTIFICATE


class TestConfigCommand:
    def test_dump_defaults_round_trip(self, capsys, tmp_path):
        assert run("config", "dump-defaults", "--task", "segmentation") == EXIT_OK
        text = capsys.readouterr().out
        doc = json.loads(text)
        assert doc["task"] == "segmentation" and doc["split"]["calibration"] == 400
        (tmp_path / "c.json").write_text(text)
        assert run("config", "validate", "--config", tmp_path / "c.json") == EXIT_OK


def test_experiment_command(tmp_path):
    code = run(
        "experiment", "--task", "regression", "--function-class", "intercept", "--repetitions", 1,
        "--n-calibration", 200, "--n-test", 200, "--out", tmp_path,
    )
    assert code == EXIT_OK
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["records"]) == 1


class TestRoundTrip:
    """simulate -> rf-embed -> calibrate -> evaluate at desk scale on defaults."""

    def test_regression(self, tmp_path):
        t0 = time.perf_counter()
        d = tmp_path
        assert run("simulate", "--task", "regression", "--out", d) == EXIT_OK
        assert run("rf-embed", "--residual", d / "residual.csv", "--inputs", d / "calibration.csv", d / "test.csv", "--out", d) == EXIT_OK
        code = run(
            "calibrate", "--function-class", "rf-leaf", "--calibration", d / "calibration.csv", "--test", d / "test.csv",
            "--cal-features", d / "calibration.leaf.emb", "--test-features", d / "test.leaf.emb", "--baseline", "crc", "--out", d,
        )
        assert code == EXIT_OK
        assert run("evaluate", "--test", d / "test.csv", "--thresholds", d / "thresholds.csv", "--out", d) == EXIT_OK
        assert time.perf_counter() - t0 < 300
        rec = json.loads((d / "report.json").read_text())["records"][0]
        assert abs(rec["marginal_risk"] - 0.1) < 0.03

    def test_segmentation(self, tmp_path):
        t0 = time.perf_counter()
        d = tmp_path
        assert run("simulate", "--task", "segmentation", "--n-residual", 0, "--out", d) == EXIT_OK
        code = run(
            "calibrate", "--task", "segmentation", "--calibration", d / "calibration.bin", "--test", d / "test.bin",
            "--cal-features", d / "calibration.emb", "--test-features", d / "test.emb", "--baseline", "crc", "--out", d,
        )
        assert code == EXIT_OK
        assert run("evaluate", "--task", "segmentation", "--test", d / "test.bin", "--thresholds", d / "thresholds.csv", "--out", d) == EXIT_OK
        assert time.perf_counter() - t0 < 300
        doc = json.loads((d / "report.json").read_text())
        assert len(doc["recall_bins"]) == 10
        assert "crc_precision" in (d / "pairs.csv").read_text().splitlines()[0]
