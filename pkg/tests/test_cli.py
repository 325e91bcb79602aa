import csv
import io
import json

import numpy as np
import pytest

from flowcast import cli
from flowcast.dataio import NSL_KDD_COLUMNS, make_windows
from flowcast.detect import ThresholdModel, detect_batch
from flowcast.nn import HybridNetwork, init_network
from flowcast.synthetic import write_flow_csv

FAST = ["--indrnn-widths", "6", "--lstm-width", "5", "--epochs", "2", "--batch-size", "32"]


@pytest.fixture(scope="module")
def flows(tmp_path_factory):
    return write_flow_csv(tmp_path_factory.mktemp("data") / "flows.csv", n_rows=160, seed=3)


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(out, data, *extra, method="none"):
    common = ["--out", out]
    assert run("prep", *common, "--data", data, "--columns", "nsl-kdd", *FAST, *extra) == 0
    assert run("select", *common, "--method", method) == 0
    assert run("train", *common) == 0
    assert run("eval", *common) == 0


class TestPrep:
    def test_nsl_layout(self, tmp_path, flows):
        assert run("prep", "--out", tmp_path / "r", "--data", flows, "--columns", "nsl-kdd") == 0
        meta = json.loads((tmp_path / "r" / "dataset.json").read_text())
        assert len(meta["feature_names"]) == 41
        assert "label" not in meta["feature_names"] and "difficulty" not in meta["feature_names"]
        assert meta["target"] == "src_bytes"
        assert meta["feature_names"][meta["target_index"]] == "src_bytes"
        enc = json.loads((tmp_path / "r" / "encoding.json").read_text())
        cats = {meta["feature_names"][int(j)] for j in enc["category_maps"]}
        assert cats == {"protocol_type", "service", "flag"}
        norm = json.loads((tmp_path / "r" / "normalization.json").read_text())
        assert set(norm) == {"mean", "min", "max"}
        config = json.loads((tmp_path / "r" / "config.json").read_text())
        assert config["window_length"] == 10 and config["target"] == "src_bytes"
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert set(manifest["artifacts"]) >= {"matrix.npy", "encoding.json"}
        assert len(manifest["commands"]["prep"]["input_sha256"]) == 64

    def test_rerun_is_byte_identical(self, tmp_path, flows):
        for name in ("a", "b"):
            assert run("prep", "--out", tmp_path / name, "--data", flows, "--columns", "nsl-kdd") == 0
        for artifact in ("config.json", "encoding.json", "normalization.json", "dataset.json", "matrix.npy"):
            assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()

    def test_run_directory_is_append_only(self, tmp_path, flows, capsys):
        args = ["prep", "--out", tmp_path / "r", "--data", flows, "--columns", "nsl-kdd"]
        assert run(*args) == 0
        before = (tmp_path / "r" / "matrix.npy").read_bytes()
        assert run(*args, "--window", "5") == 1
        assert "already exist" in capsys.readouterr().err
        assert (tmp_path / "r" / "matrix.npy").read_bytes() == before
        assert run(*args, "--window", "5", "--overwrite") == 0

    def test_missing_target_fails_before_work(self, tmp_path, flows):
        out = tmp_path / "r"
        assert run("prep", "--out", out, "--data", flows, "--columns", "nsl-kdd", "--target", "nope") == 1
        assert not out.exists()

    def test_header_file_needs_target(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("a,b\n" + "".join(f"{i},{i * 2}\n" for i in range(30)))
        assert run("prep", "--out", tmp_path / "r", "--data", path) == 1
        assert run("prep", "--out", tmp_path / "r", "--data", path, "--target", "b") == 0

    def test_bad_cell_is_a_data_error(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n" + "".join(f"{i},{i}\n" for i in range(20)) + "x,oops\n")
        assert run("prep", "--out", tmp_path / "r", "--data", path, "--target", "b") == 2
        assert "line 22" in capsys.readouterr().err

    def test_config_errors(self, tmp_path, flows):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus_key": 1}))
        assert run("prep", "--out", tmp_path / "r", "--data", flows, "--config", cfg) == 1
        assert run("prep", "--out", tmp_path / "r", "--data", flows, "--columns", "nsl-kdd",
                   "--train-fraction", "0.9") == 1
        assert run("prep", "--out", tmp_path / "r", "--data", tmp_path / "missing.csv") == 1
        assert run("train", "--out", tmp_path / "empty") == 1

    def test_flags_override_config_file(self, tmp_path, flows):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"window_length": 4, "seed": 9}))
        assert run("prep", "--out", tmp_path / "r", "--data", flows, "--columns", "nsl-kdd",
                   "--config", cfg, "--window", "6") == 0
        config = json.loads((tmp_path / "r" / "config.json").read_text())
        assert config["window_length"] == 6 and config["seed"] == 9


class TestPipeline:
    def test_full_run(self, tmp_path, flows, capsys):
        out = tmp_path / "r"
        pipeline(out, flows)
        metrics = json.loads((out / "metrics.json").read_text())
        assert {"hybrid", "persistence"} <= set(metrics)
        assert set(metrics["hybrid"]) == {"mae", "rmse", "n"}
        assert metrics["raw_units"]["hybrid"]["n"] == metrics["hybrid"]["n"]
        lines = (out / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,seconds" and len(lines) == 3
        selection = json.loads((out / "selection.json").read_text())
        assert selection["method"] == "none" and selection["selected"] == list(range(41))
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["commands"]) == {"prep", "select", "train", "eval"}

    def test_same_seed_same_bytes(self, tmp_path, flows):
        for name in ("a", "b"):
            pipeline(tmp_path / name, flows, method="filter")
        for artifact in ("loss.csv", "metrics.json", "selection.json", "checkpoint.json"):
            assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()

    def test_filter_with_k_equal_f(self, tmp_path, flows):
        out = tmp_path / "r"
        assert run("prep", "--out", out, "--data", flows, "--columns", "nsl-kdd") == 0
        assert run("select", "--out", out, "--method", "filter", "--k", "41") == 0
        assert sorted(json.loads((out / "selection.json").read_text())["selected"]) == list(range(41))

    def test_selection_keeps_target_and_k(self, tmp_path, flows):
        out = tmp_path / "r"
        assert run("prep", "--out", out, "--data", flows, "--columns", "nsl-kdd") == 0
        assert run("select", "--out", out, "--method", "wrapper", "--k", "5") == 0
        report = json.loads((out / "selection.json").read_text())
        meta = json.loads((out / "dataset.json").read_text())
        assert report["k"] == 5 and meta["target_index"] in report["selected"]

    def test_zero_epochs_keeps_initialization(self, tmp_path, flows):
        out = tmp_path / "r"
        assert run("prep", "--out", out, "--data", flows, "--columns", "nsl-kdd", *FAST) == 0
        assert run("train", "--out", out, "--epochs", "0") == 0
        saved = HybridNetwork.from_json(json.loads((out / "checkpoint.json").read_text()))
        cfg = cli.RunConfig.from_dict(json.loads((out / "config.json").read_text()))
        fresh = init_network(cfg.architecture(41))
        for p, q in zip(saved.parameters().values(), fresh.parameters().values()):
            assert p.tobytes() == q.tobytes()
        assert (out / "loss.csv").read_text() == "epoch,train_loss,val_loss,seconds\n"

    def test_record_timing_fills_seconds(self, tmp_path, flows):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"record_timing": True}))
        out = tmp_path / "r"
        assert run("prep", "--out", out, "--data", flows, "--columns", "nsl-kdd", *FAST, "--config", cfg) == 0
        assert run("train", "--out", out) == 0
        row = (out / "loss.csv").read_text().splitlines()[1].split(",")
        assert float(row[3]) > 0


class TestDetect:
    @pytest.fixture
    def trained(self, tmp_path, flows):
        out = tmp_path / "r"
        pipeline(out, flows, method="filter", *["--k", "6"])
        return out

    def detect(self, out, source, capsys):
        code = run("detect", "--out", out, "--input", source)
        captured = capsys.readouterr()
        lines = [json.loads(line) for line in captured.out.splitlines()]
        return code, lines, json.loads(captured.err.splitlines()[-1])["summary"]

    def test_matches_batch_detection(self, trained, flows, capsys):
        code, lines, summary = self.detect(trained, flows, capsys)
        assert code == 0 and summary["count"] == len(lines) == 150 and summary["errors"] == 0
        net, selected, _ = cli.load_checkpoint(cli.RunDir(trained))
        matrix, meta = cli._load_prepared(cli.RunDir(trained))
        ds = make_windows(matrix.select_features(selected), meta["window_length"])
        threshold = ThresholdModel.from_json(json.loads((trained / "threshold.json").read_text()))
        batch = detect_batch(net, threshold, ds)
        for line, verdict in zip(lines, batch):
            assert set(line) == {"step", "predicted", "actual", "abs_error", "threshold",
                                 "is_anomaly", "latency_micros"}
            assert line["step"] == verdict.step
            assert line["predicted"] == verdict.predicted and line["actual"] == verdict.actual
            assert line["is_anomaly"] == verdict.is_anomaly

    def test_empty_input(self, trained, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        code, lines, summary = self.detect(trained, empty, capsys)
        assert code == 0 and lines == [] and summary["count"] == 0

    def test_malformed_lines_are_reported_inline(self, trained, flows, tmp_path, capsys):
        rows = flows.read_text().splitlines()
        cells = rows[12].split(",")
        cells[4] = "oops"  # src_bytes must be numeric
        broken = rows[:12] + ["1,2,3", ",".join(cells)] + rows[12:20]
        path = tmp_path / "broken.csv"
        path.write_text("\n".join(broken) + "\n")
        code, lines, summary = self.detect(trained, path, capsys)
        errors = [line for line in lines if "error" in line]
        assert code == 0 and summary["errors"] == 2
        assert [e["line"] for e in errors] == [13, 14]
        assert summary["count"] == len(lines) - 2 == 20 - 10

    def test_stdin(self, trained, flows, capsys, monkeypatch):
        monkeypatch.setattr("sys.stdin", io.StringIO(flows.read_text()))
        code, lines, _ = self.detect(trained, "-", capsys)
        assert code == 0 and len(lines) == 150

    def test_detect_needs_threshold(self, tmp_path, flows):
        out = tmp_path / "r"
        assert run("prep", "--out", out, "--data", flows, "--columns", "nsl-kdd") == 0
        assert run("detect", "--out", out, "--input", flows) == 1


class TestGradcheck:
    def test_pass(self, capsys):
        assert run("gradcheck") == 0
        report = json.loads(capsys.readouterr().out)
        assert report["passed"] and report["max_relative_error"] < 1e-4
        assert report["worst_tensor"] in report["per_tensor"]

    def test_corrupted_gradient_fails(self, capsys):
        assert run("gradcheck", "--corrupt", "lstm.Wf") == 3
        report = json.loads(capsys.readouterr().out)
        assert report["worst_tensor"] == "lstm.Wf"
        assert report["max_relative_error"] == pytest.approx(0.5, abs=1e-3)

    def test_unknown_tensor(self):
        assert run("gradcheck", "--corrupt", "nope") == 1


def test_sweep_table(tmp_path, flows, capsys):
    assert run("sweep", "--out", tmp_path / "s", "--data", flows, "--columns", "nsl-kdd", *FAST,
               "--k", "5", "--epochs", "1") == 0
    rows = list(csv.reader((tmp_path / "s" / "table.csv").read_text().splitlines()))
    assert rows[0] == ["model", "feature_selection", "mae", "rmse"]
    methods = ["none", "filter", "wrapper", "embedded", "autoencoder"]
    assert [r[:2] for r in rows[1:]] == [[m, s] for m in ("IndRNN-LSTM", "persistence") for s in methods]
    assert all(float(r[3]) >= float(r[2]) for r in rows[1:])
    for method in methods:
        assert (tmp_path / "s" / method / "metrics.json").exists()


def test_nsl_column_list():
    assert len(NSL_KDD_COLUMNS) == 43 and NSL_KDD_COLUMNS[-2:] == ["label", "difficulty"]


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "flowcast", "gradcheck"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["passed"]
