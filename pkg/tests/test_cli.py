import json

import pytest

from semlink import cli, codec


def run(argv):
    return cli.main(argv)


@pytest.fixture()
def pipeline_dirs(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)  # manifests for output-less runs land here
    return tmp_path


class TestBasics:
    def test_help_exits_zero(self, capsys):
        assert run(["sweep", "--help"]) == 0
        assert "snr-list" in capsys.readouterr().out

    def test_top_level_help(self, capsys):
        assert run(["--help"]) == 0

    def test_unknown_flag_exits_one(self, capsys):
        assert run(["build-kb", "--input", "x", "--output", "y", "--bogus"]) == 1

    def test_missing_subcommand_exits_one(self):
        assert run([]) == 1

    def test_version(self, capsys):
        assert run(["--version"]) == 0
        out = capsys.readouterr().out
        assert "semlink" in out and "build" in out

    def test_missing_input_is_data_error(self, tmp_path):
        assert run(["build-kb", "--input", str(tmp_path / "nope.semb"),
                    "--output", str(tmp_path / "out.semb")]) == 2

    def test_garbage_input_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.semb"
        bad.write_bytes(b"garbage bytes here")
        assert run(["build-kb", "--input", str(bad), "--output", str(tmp_path / "o.semb")]) == 2

    def test_nan_loss_maps_to_exit_three(self, tmp_path, monkeypatch):
        data = tmp_path / "d.semb"
        assert run(["gen-synthetic", "--classes", "3", "--per-class", "4",
                    "--output", str(data), "--seed", "1"]) == 0

        def explode(*args, **kwargs):
            raise codec.NanLossError(7)

        monkeypatch.setattr(cli.codec, "train", explode)
        code = run(["train", "--train", str(data), "--val-transmit", str(data),
                    "--val-kb", str(data), "--k", "8", "--epochs", "1",
                    "--output", str(tmp_path / "m.scdc")])
        assert code == 3


class TestPipeline:
    def test_full_synthetic_pipeline(self, pipeline_dirs, capsys):
        d = pipeline_dirs
        assert run(["gen-synthetic", "--classes", "5", "--per-class", "8",
                    "--spread", "0.05", "--seed", "11", "--output", str(d / "all.semb")]) == 0
        assert run(["split", "--input", str(d / "all.semb"), "--kind", "train-val",
                    "--seed", "1", "--train-fraction", "0.8",
                    "--out-a", str(d / "train.semb"), "--out-b", str(d / "val.semb")]) == 0
        assert run(["split", "--input", str(d / "val.semb"), "--kind", "transmit-kb",
                    "--seed", "2", "--out-a", str(d / "tx.semb"),
                    "--out-b", str(d / "kbd.semb")]) == 0
        assert run(["build-kb", "--input", str(d / "kbd.semb"),
                    "--output", str(d / "kb.semb")]) == 0
        capsys.readouterr()
        assert run(["train", "--train", str(d / "train.semb"),
                    "--val-transmit", str(d / "tx.semb"), "--val-kb", str(d / "kb.semb"),
                    "--k", "8", "--epochs", "2", "--batch-size", "8", "--seed", "3",
                    "--snr-grid=-4,0,4", "--output", str(d / "model.scdc"),
                    "--report", str(d / "report.json")]) == 0
        report = json.loads((d / "report.json").read_text())
        assert len(report["train_loss"]) == 2
        assert (d / "model.scdc.manifest.json").exists()

        assert run(["eval", "--model", str(d / "model.scdc"), "--transmit", str(d / "tx.semb"),
                    "--kb", str(d / "kb.semb"), "--snr-db", "10", "--trials", "2",
                    "--seed", "4"]) == 0
        accuracy = float(capsys.readouterr().out.strip())
        assert 0.0 <= accuracy <= 1.0

        assert run(["bench", "--model", str(d / "model.scdc"), "--kb", str(d / "kb.semb"),
                    "--queries", "100", "--seed", "5",
                    "--output", str(d / "bench.json")]) == 0
        bench = json.loads((d / "bench.json").read_text())
        assert bench["clip_median_ms"] is None
        assert bench["kb_median_ms"] > 0

    def test_eval_baseline_noiseless(self, pipeline_dirs, capsys):
        d = pipeline_dirs
        run(["gen-synthetic", "--classes", "4", "--per-class", "4", "--seed", "9",
             "--output", str(d / "data.semb")])
        run(["build-kb", "--input", str(d / "data.semb"), "--output", str(d / "kb.semb")])
        capsys.readouterr()
        assert run(["eval", "--model", "baseline", "--transmit", str(d / "data.semb"),
                    "--kb", str(d / "kb.semb"), "--snr-db", "inf", "--trials", "1"]) == 0
        assert float(capsys.readouterr().out.strip()) == 1.0

    def test_sweep_writes_manifest_and_csv(self, pipeline_dirs):
        d = pipeline_dirs
        run(["gen-synthetic", "--classes", "4", "--per-class", "6", "--seed", "21",
             "--output", str(d / "data.semb")])
        run(["split", "--input", str(d / "data.semb"), "--kind", "transmit-kb",
             "--seed", "1", "--out-a", str(d / "tx.semb"), "--out-b", str(d / "kbd.semb")])
        codec.save_params(codec.init_params(8, seed=0), d / "m8.scdc")
        assert run(["sweep", "--model", str(d / "m8.scdc"), "--transmit", str(d / "tx.semb"),
                    "--kb", str(d / "kbd.semb"), "--snr-list=-2,2", "--channels", "awgn",
                    "--trials", "1", "--seed", "6", "--output", str(d / "sweep.csv")]) == 0
        lines = (d / "sweep.csv").read_text().strip().split("\n")
        assert len(lines) == 5  # header + (model + baseline) x 2 SNRs
        manifest = json.loads((d / "sweep.csv.manifest.json").read_text())
        assert manifest["subcommand"] == "sweep"
        assert manifest["seed"] == 6
        assert len(manifest["inputs"]) == 3
        assert "tool_version" in manifest

    def test_sweep_rerun_is_byte_identical(self, pipeline_dirs):
        d = pipeline_dirs
        run(["gen-synthetic", "--classes", "3", "--per-class", "6", "--seed", "2",
             "--output", str(d / "data.semb")])
        codec.save_params(codec.init_params(8, seed=0), d / "m.scdc")
        argv = ["sweep", "--model", str(d / "m.scdc"), "--transmit", str(d / "data.semb"),
                "--kb", str(d / "data.semb"), "--snr-list=0", "--channels", "rayleigh",
                "--trials", "2", "--seed", "3"]
        assert run(argv + ["--output", str(d / "a.csv")]) == 0
        assert run(argv + ["--output", str(d / "b.csv")]) == 0
        assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()


class TestConfigFile:
    def test_config_supplies_defaults_and_flags_override(self, pipeline_dirs, capsys):
        d = pipeline_dirs
        run(["gen-synthetic", "--classes", "3", "--per-class", "4", "--seed", "1",
             "--output", str(d / "data.semb")])
        cfg = d / "eval.cfg"
        cfg.write_text("trials = 3\nsnr-db = inf\n# comment line\n")
        capsys.readouterr()
        out_csv = d / "acc.csv"
        assert run(["eval", "--config", str(cfg), "--model", "baseline",
                    "--transmit", str(d / "data.semb"), "--kb", str(d / "data.semb"),
                    "--output", str(out_csv)]) == 0
        manifest = json.loads((out_csv.read_text() and (d / "acc.csv.manifest.json").read_text()))
        assert manifest["config"]["trials"] == 3
        assert manifest["config"]["snr_db"] == "inf"

        assert run(["eval", "--config", str(cfg), "--model", "baseline",
                    "--transmit", str(d / "data.semb"), "--kb", str(d / "data.semb"),
                    "--trials", "5", "--output", str(out_csv)]) == 0
        manifest = json.loads((d / "acc.csv.manifest.json").read_text())
        assert manifest["config"]["trials"] == 5  # explicit flag wins

    def test_unknown_config_key_is_usage_error(self, pipeline_dirs):
        d = pipeline_dirs
        cfg = d / "bad.cfg"
        cfg.write_text("not-a-flag = 1\n")
        assert run(["eval", "--config", str(cfg), "--model", "baseline",
                    "--transmit", "x", "--kb", "y", "--snr-db", "0"]) == 1

    def test_missing_config_file(self, pipeline_dirs):
        assert run(["eval", "--config", "/nonexistent.cfg", "--model", "baseline",
                    "--transmit", "x", "--kb", "y", "--snr-db", "0"]) == 1
