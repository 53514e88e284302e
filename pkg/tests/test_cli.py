"""End-to-end CLI flows, exit codes, and run manifests."""

import json
import struct

import numpy as np
import pytest

from tapdetect.cli import EXIT_DATA, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from tapdetect.featurestore import FeatureDataset, make_record, write_feature_file


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture()
def synth_files(tmp_path):
    train = tmp_path / "train.tfrb"
    test = tmp_path / "test.tfrb"
    common = ["--d", "8", "--n", "12", "--k", "2", "--alpha", "5.0",
              "--direction-seed", "40"]
    assert run_cli("synth", "--out", str(train), "--n-real", "120", "--n-fake", "120",
                   "--seed", "41", *common) == EXIT_OK
    assert run_cli("synth", "--out", str(test), "--n-real", "60", "--n-fake", "60",
                   "--seed", "42", *common) == EXIT_OK
    return train, test


class TestSynthAndInspect:
    def test_synth_writes_dataset_sidecar_manifest(self, tmp_path):
        out = tmp_path / "d.tfrb"
        assert run_cli("synth", "--out", str(out), "--d", "8", "--n", "6",
                       "--k", "1", "--n-real", "5", "--n-fake", "5") == EXIT_OK
        assert out.exists()
        assert out.with_suffix(".oracle.json").exists()
        manifest = json.loads((tmp_path / "d.tfrb.manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["tool_version"]
        assert str(out) in manifest["outputs"]

    def test_inspect_zero_record_file(self, tmp_path, capsys):
        path = tmp_path / "empty.tfrb"
        write_feature_file(FeatureDataset(dim=5, records=[]), path)
        assert run_cli("inspect", str(path)) == EXIT_OK
        out = capsys.readouterr().out
        assert "dim:      5" in out
        assert "records:  0" in out

    def test_inspect_reports_tags_and_counts(self, synth_files, capsys):
        train, _ = synth_files
        assert run_cli("inspect", str(train)) == EXIT_OK
        out = capsys.readouterr().out
        assert "records:  240" in out
        assert "synth" in out


class TestTrainEvalReport:
    def test_full_pipeline(self, synth_files, tmp_path, capsys):
        train, test = synth_files
        ckpt = tmp_path / "head.tapc"
        assert run_cli(
            "train", "--train", str(train), "--head", "tap",
            "--out", str(ckpt), "--iterations", "60", "--batch", "32",
            "--lr", "2e-3", "--heads", "2", "--mlp-hidden", "16", "--proj-dim", "8",
        ) == EXIT_OK
        assert ckpt.exists()
        assert (tmp_path / "head.tapc.history.jsonl").exists()
        manifest = json.loads((tmp_path / "head.tapc.manifest.json").read_text())
        assert str(train) in manifest["inputs"]

        report_json = tmp_path / "eval.json"
        assert run_cli("eval", "--ckpt", str(ckpt), "--data", str(test),
                       "--out", str(report_json), "--name", "pooled") == EXIT_OK
        payload = json.loads(report_json.read_text())
        assert payload["name"] == "pooled"
        assert "synth" in payload["per_tag"]
        csv_text = report_json.with_suffix(".csv").read_text()
        assert csv_text.splitlines()[0] == "tag,f1,acc,f_acc,r_acc,n"

        merged = tmp_path / "table.md"
        assert run_cli("report", "--inputs", str(report_json),
                       "--out", str(merged)) == EXIT_OK
        table = (tmp_path / "table.md").read_text()
        assert "synth_f1" in table and "pooled" in table
        assert (tmp_path / "table.csv").exists()
        assert (tmp_path / "table.json").exists()

    def test_linear_head_training(self, synth_files, tmp_path):
        train, test = synth_files
        ckpt = tmp_path / "probe.tapc"
        assert run_cli("train", "--train", str(train), "--head", "linear",
                       "--out", str(ckpt), "--iterations", "20", "--batch", "64") == EXIT_OK
        assert run_cli("eval", "--ckpt", str(ckpt), "--data", str(test)) == EXIT_OK

    def test_train_rerun_is_byte_identical(self, synth_files, tmp_path):
        train, _ = synth_files
        blobs = []
        for name in ("r1", "r2"):
            ckpt = tmp_path / f"{name}.tapc"
            assert run_cli("train", "--train", str(train), "--out", str(ckpt),
                           "--iterations", "25", "--batch", "32",
                           "--heads", "2", "--seed", "5", "--init-seed", "6") == EXIT_OK
            blobs.append((ckpt.read_bytes(),
                          (tmp_path / f"{name}.tapc.history.jsonl").read_bytes()))
        assert blobs[0] == blobs[1]


class TestExitCodes:
    def test_missing_file_is_io_error(self, tmp_path):
        assert run_cli("inspect", str(tmp_path / "nope.tfrb")) == EXIT_IO

    def test_corrupt_magic_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.tfrb"
        bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
        assert run_cli("inspect", str(bad)) == EXIT_DATA

    def test_truncated_file_is_data_error(self, tmp_path, synth_files):
        train, _ = synth_files
        cut = tmp_path / "cut.tfrb"
        cut.write_bytes(train.read_bytes()[:-7])
        assert run_cli("inspect", str(cut)) == EXIT_DATA

    def test_dim_mismatch_is_data_error(self, synth_files, tmp_path):
        train, _ = synth_files
        other = tmp_path / "other.tfrb"
        ds = FeatureDataset(
            dim=6, records=[make_record(0, "x", np.zeros((2, 6), np.float32))]
        )
        write_feature_file(ds, other)
        ckpt = tmp_path / "h.tapc"
        assert run_cli("train", "--train", str(train), "--out", str(ckpt),
                       "--iterations", "5", "--batch", "16", "--heads", "2") == EXIT_OK
        assert run_cli("eval", "--ckpt", str(ckpt), "--data", str(other)) == EXIT_DATA

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("train")  # missing required flags
        assert exc.value.code == 2

    def test_gradcheck_pass_and_fail_codes(self, capsys):
        assert run_cli("gradcheck", "--d", "8", "--n", "9", "--heads", "2",
                       "--seed", "7") == EXIT_OK
        out = capsys.readouterr().out
        assert "max rel err" in out and "PASS" in out
        # an impossible tolerance must flip the exit code
        assert run_cli("gradcheck", "--d", "8", "--n", "5", "--heads", "2",
                       "--seed", "7", "--tol", "1e-18") == EXIT_NUMERIC


class TestReproducibility:
    def test_synth_rerun_byte_identical(self, tmp_path):
        blobs = []
        for name in ("s1", "s2"):
            out = tmp_path / f"{name}.tfrb"
            assert run_cli("synth", "--out", str(out), "--d", "8", "--n", "6",
                           "--k", "1", "--n-real", "10", "--n-fake", "10",
                           "--seed", "11") == EXIT_OK
            blobs.append((out.read_bytes(),
                          out.with_suffix(".oracle.json").read_bytes()))
        assert blobs[0] == blobs[1]

    def test_eval_and_report_rerun_byte_identical(self, synth_files, tmp_path):
        train, test = synth_files
        ckpt = tmp_path / "h.tapc"
        assert run_cli("train", "--train", str(train), "--out", str(ckpt),
                       "--iterations", "10", "--batch", "32", "--heads", "2") == EXIT_OK
        blobs = []
        for name in ("e1", "e2"):
            ej = tmp_path / f"{name}.json"
            assert run_cli("eval", "--ckpt", str(ckpt), "--data", str(test),
                           "--out", str(ej), "--name", "m") == EXIT_OK
            assert run_cli("report", "--inputs", str(ej),
                           "--out", str(tmp_path / f"{name}_table")) == EXIT_OK
            blobs.append((ej.read_bytes(), ej.with_suffix(".csv").read_bytes(),
                          (tmp_path / f"{name}_table.csv").read_bytes(),
                          (tmp_path / f"{name}_table.md").read_bytes()))
        assert blobs[0] == blobs[1]

    def test_thread_env_var(self, synth_files, tmp_path, monkeypatch):
        train, test = synth_files
        ckpt = tmp_path / "h.tapc"
        assert run_cli("train", "--train", str(train), "--out", str(ckpt),
                       "--iterations", "5", "--batch", "32", "--heads", "2") == EXIT_OK
        out_serial = tmp_path / "serial.json"
        assert run_cli("eval", "--ckpt", str(ckpt), "--data", str(test),
                       "--out", str(out_serial), "--name", "m") == EXIT_OK
        monkeypatch.setenv("TAPDETECT_THREADS", "4")
        out_threaded = tmp_path / "threaded.json"
        assert run_cli("eval", "--ckpt", str(ckpt), "--data", str(test),
                       "--out", str(out_threaded), "--name", "m") == EXIT_OK
        assert out_serial.read_bytes() == out_threaded.read_bytes()
        monkeypatch.setenv("TAPDETECT_THREADS", "zero")
        assert run_cli("eval", "--ckpt", str(ckpt), "--data", str(test)) == EXIT_DATA


class TestManifest:
    def test_digests_match_inputs(self, synth_files, tmp_path):
        import hashlib

        train, _ = synth_files
        ckpt = tmp_path / "m.tapc"
        assert run_cli("train", "--train", str(train), "--out", str(ckpt),
                       "--iterations", "5", "--batch", "16", "--heads", "2") == EXIT_OK
        manifest = json.loads((tmp_path / "m.tapc.manifest.json").read_text())
        digest = hashlib.sha256(train.read_bytes()).hexdigest()
        assert manifest["inputs"][str(train)] == digest
        assert manifest["seeds"]["seed"] == 0
        assert manifest["resolved_config"]["iterations"] == 5
