"""Exit codes, artifact emission, and determinism of the command surface."""

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from audiotrim import cli, harness


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    doc = {
        "model": {"arch": "sing_ae", "conv_channels": 8, "n_conv_layers": 2,
                  "sing_kernel": 5, "spec_windows": [32, 64]},
        "dataset": {"n_items": 12, "duration": 0.25},
        "training": {"epochs": 2, "batch_size": 8},
        "imp": {"iterations": 2, "criterion": "magnitude"},
        "output_dir": str(d / "run"),
        "seed": 3,
        "emit_samples": False,
    }
    cfg = d / "config.json"
    cfg.write_text(json.dumps(doc))
    assert cli.main(["imp", "--config", str(cfg)]) == 0
    return d


class TestExitCodes:
    def test_missing_config_is_usage_error_naming_path(self, tmp_path, capsys):
        rc = cli.main(["imp", "--config", str(tmp_path / "absent.json")])
        assert rc == 1
        assert "absent.json" in capsys.readouterr().err

    def test_unknown_flag_prints_usage(self, workspace, capsys):
        rc = cli.main(["imp", "--config", str(workspace / "config.json"),
                       "--turbo"])
        assert rc == 1
        err = capsys.readouterr().err
        assert "usage:" in err and "--turbo" in err

    def test_no_subcommand_is_usage_error(self, capsys):
        assert cli.main([]) == 1
        assert "usage:" in capsys.readouterr().err

    def test_runtime_failure_returns_two(self, tmp_path, capsys):
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"not a checkpoint at all")
        rc = cli.main(["embed-check", "--model", str(junk)])
        assert rc == 2
        assert capsys.readouterr().err.strip()


class TestGenData:
    def test_writes_wavs_and_conditioning(self, tmp_path, capsys):
        rc = cli.main(["gen-data", "--out", str(tmp_path / "ds"), "--n", "10",
                       "--sr", "16000", "--seed", "4"])
        assert rc == 0
        files = sorted((tmp_path / "ds").glob("*.wav"))
        assert len(files) == 10
        assert (tmp_path / "ds" / "conditioning.json").exists()
        items = harness.load_wav_dir(tmp_path / "ds", 16000)
        assert all("f0" in it for it in items)

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            cli.main(["gen-data", "--out", str(tmp_path / name), "--n", "6",
                      "--seed", "9"])
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


class TestImp:
    def test_emits_trace_and_checkpoints(self, workspace):
        run = workspace / "run"
        assert (run / "trace.csv").exists()
        assert (run / "iter_02.ckpt").exists()
        assert (run / "MANIFEST.txt").read_text().startswith("status: complete")

    def test_same_config_seed_identical_trace(self, workspace, tmp_path):
        doc = json.loads((workspace / "config.json").read_text())
        traces = []
        for name in ("r1", "r2"):
            doc["output_dir"] = str(tmp_path / name)
            cfg = tmp_path / f"{name}.json"
            cfg.write_text(json.dumps(doc))
            assert cli.main(["imp", "--config", str(cfg), "--seed", "7"]) == 0
            traces.append((tmp_path / name / "trace.csv").read_bytes())
        assert traces[0] == traces[1]

    def test_paired_flag(self, workspace, tmp_path):
        doc = json.loads((workspace / "config.json").read_text())
        doc["output_dir"] = str(tmp_path / "paired")
        doc["imp"]["iterations"] = 1
        cfg = tmp_path / "p.json"
        cfg.write_text(json.dumps(doc))
        assert cli.main(["imp", "--config", str(cfg), "--paired"]) == 0
        assert (tmp_path / "paired" / "paired.csv").exists()
        assert (tmp_path / "paired" / "trim" / "trace.csv").exists()
        assert (tmp_path / "paired" / "mask" / "trace.csv").exists()


class TestTrain:
    def test_saves_model_and_metrics(self, workspace, tmp_path):
        rc = cli.main(["train", "--config", str(workspace / "config.json"),
                       "--out", str(tmp_path / "dense")])
        assert rc == 0
        assert (tmp_path / "dense" / "model.ckpt").exists()
        metrics = json.loads((tmp_path / "dense" / "metrics.json").read_text())
        assert set(metrics) == {"valid", "test"}
        assert all(np.isfinite(v) for v in metrics.values())


class TestAnalyze:
    def test_magnitude_scores_csv(self, workspace, tmp_path, capsys):
        out = tmp_path / "scores.csv"
        rc = cli.main(["analyze", "--model",
                       str(workspace / "run" / "iter_02.ckpt"),
                       "--out", str(out)])
        assert rc == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "pool,unit,score"
        assert len(rows) > 1
        assert "weakest" in capsys.readouterr().out

    def test_data_driven_criterion_needs_config(self, workspace, capsys):
        rc = cli.main(["analyze", "--model",
                       str(workspace / "run" / "iter_02.ckpt"),
                       "--criterion", "gradient"])
        assert rc == 1
        assert "--config" in capsys.readouterr().err

    def test_gradient_scores_with_config(self, workspace, tmp_path):
        out = tmp_path / "grad.csv"
        rc = cli.main(["analyze", "--model",
                       str(workspace / "run" / "iter_02.ckpt"),
                       "--criterion", "gradient",
                       "--config", str(workspace / "config.json"),
                       "--out", str(out)])
        assert rc == 0
        assert len(out.read_text().splitlines()) > 1


class TestEmbedCheck:
    def test_lists_all_reference_platforms(self, workspace, capsys):
        rc = cli.main(["embed-check", "--model",
                       str(workspace / "run" / "iter_00.ckpt")])
        assert rc == 0
        out = capsys.readouterr().out
        for name in ("ATMega1280", "ATMega2560", "RPi 1B", "RPi 2B"):
            assert name in out


class TestSynth:
    def test_renders_loadable_wav(self, workspace, tmp_path):
        out = tmp_path / "sample.wav"
        rc = cli.main(["synth", "--model",
                       str(workspace / "run" / "iter_02.ckpt"),
                       "--out", str(out)])
        assert rc == 0
        wave = harness.read_wav(out, 16000)
        assert len(wave) > 0
        assert np.all(np.isfinite(wave))


class TestEntryPoint:
    def test_console_script_or_module_runs(self, tmp_path):
        if shutil.which("audiotrim"):
            argv = ["audiotrim"]
        else:
            argv = [sys.executable, "-m", "audiotrim.cli"]
        proc = subprocess.run(argv + ["gen-data", "--out",
                                      str(tmp_path / "ds"), "--n", "10"],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert len(list((tmp_path / "ds").glob("*.wav"))) == 10
