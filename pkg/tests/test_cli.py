import json

import pytest

from talklora.cli import main


def write_config(tmp_path, name="config.json", **overrides):
    doc = {
        "method": "talklora",
        "seed": 11,
        "output_dir": str(tmp_path / "out"),
        "adapter": {"total_rank": 4, "experts": 2, "lora_alpha": 8.0},
        "task": {
            "clusters": 2,
            "input_dim": 8,
            "output_dim": 8,
            "samples_per_cluster": 60,
            "noise_std": 0.2,
        },
        "model_depth": 2,
        "train": {"epochs": 2, "batch_size": 16, "lr": 1e-3, "warmup_steps": 10,
                  "eval_every": 4},
    }
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestParams:
    def _params_config(self, tmp_path, **kw):
        base = {
            "geometry": "llama3-8b",
            "targets": ["Q", "K", "V", "Up", "Down"],
            "adapter": {"total_rank": 16, "experts": 4, "lora_alpha": 16.0},
        }
        base.update(kw)
        return write_config(tmp_path, **base)

    def test_llama3_talklora_r16(self, tmp_path, capsys):
        cfg = self._params_config(tmp_path)
        code, out, _ = run(capsys, "params", "--config", str(cfg))
        assert code == 0
        doc = json.loads(out)
        assert abs(doc["percent"] - 0.2) <= 0.05
        assert (tmp_path / "out" / "param_budget.json").is_file()

    def test_llama2_lora_r32(self, tmp_path, capsys):
        cfg = self._params_config(
            tmp_path,
            method="lora",
            adapter={"total_rank": 32, "experts": 1, "lora_alpha": 32.0},
            geometry="llama2-7b",
        )
        code, out, _ = run(capsys, "params", "--config", str(cfg))
        assert code == 0
        assert abs(json.loads(out)["percent"] - 0.8) <= 0.05

    def test_toy_geometry_fixture_file(self, tmp_path, capsys):
        geom_path = tmp_path / "toy.json"
        geom_path.write_text(json.dumps({
            "name": "toy", "total_params": 10000, "layers": 2,
            "projections": [{"tag": "X", "d_in": 8, "d_out": 8}],
        }))
        cfg = self._params_config(
            tmp_path,
            geometry=str(geom_path),
            targets=["X"],
            adapter={"total_rank": 4, "experts": 2, "lora_alpha": 8.0},
        )
        code, out, _ = run(capsys, "params", "--config", str(cfg))
        assert code == 0
        assert json.loads(out)["trainable"] == 136

    def test_missing_fixture_exits_2_with_path(self, tmp_path, capsys):
        cfg = self._params_config(tmp_path, geometry="does/not/exist.json")
        code, _, err = run(capsys, "params", "--config", str(cfg))
        assert code == 2
        assert "does/not/exist.json" in err

    def test_unknown_config_key_exits_2_with_field(self, tmp_path, capsys):
        cfg = self._params_config(tmp_path, bogus_field=1)
        code, _, err = run(capsys, "params", "--config", str(cfg))
        assert code == 2
        assert "bogus_field" in err

    def test_seed_override_is_echoed(self, tmp_path, capsys):
        cfg = self._params_config(tmp_path)
        code, out, _ = run(capsys, "params", "--config", str(cfg), "--seed", "99")
        assert code == 0
        assert json.loads(out)["config"]["seed"] == 99


class TestTrain:
    def test_outputs_and_determinism(self, tmp_path, capsys):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        cfg_a = write_config(tmp_path, name="a.json", output_dir=str(out_a))
        cfg_b = write_config(tmp_path, name="b.json", output_dir=str(out_b))
        assert run(capsys, "train", "--config", str(cfg_a))[0] == 0
        assert run(capsys, "train", "--config", str(cfg_b))[0] == 0
        for fname in ("loss.csv", "routing.csv"):
            assert (out_a / fname).read_bytes() == (out_b / fname).read_bytes()
        assert (out_a / "checkpoint.tlkl").is_file()

    def test_zero_lr_constant_loss_csv(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path,
            train={"epochs": 2, "batch_size": 27, "lr": 0.0, "warmup_steps": 10,
                   "eval_every": 4, "dropout": 0.0},
            task={"clusters": 1, "input_dim": 8, "output_dim": 8,
                  "samples_per_cluster": 60, "noise_std": 0.0},
        )
        code, _, _ = run(capsys, "train", "--config", str(cfg))
        assert code == 0
        lines = (tmp_path / "out" / "loss.csv").read_text().splitlines()
        losses = {line.split(",")[2] for line in lines[2:]}
        assert len(losses) == 1

    def test_divergence_exits_3(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path,
            task={"clusters": 1, "input_dim": 8, "output_dim": 8,
                  "samples_per_cluster": 60, "noise_std": 1e300},
        )
        code, _, err = run(capsys, "train", "--config", str(cfg))
        assert code == 3
        assert "step" in err


class TestAnalyze:
    @pytest.fixture()
    def checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path, adapter={
            "total_rank": 4, "experts": 2, "lora_alpha": 8.0,
            "spectral_clip_c": 1.0,
        })
        assert run(capsys, "train", "--config", str(cfg))[0] == 0
        return tmp_path / "out" / "checkpoint.tlkl"

    @pytest.mark.parametrize(
        "report,artifact",
        [
            ("stability", "stability.json"),
            ("nonexpansive", "nonexpansive.csv"),
            ("routing", "routing_load.csv"),
            ("heatmap", "heatmap.csv"),
            ("degeneracy", "degeneracy.json"),
        ],
    )
    def test_reports_run(self, checkpoint, capsys, report, artifact, tmp_path):
        out = tmp_path / f"reports_{report}"
        code, stdout, _ = run(
            capsys, "analyze", "--checkpoint", str(checkpoint),
            "--report", report, "--out", str(out), "--trials", "200",
        )
        assert code == 0
        assert (out / artifact).is_file()
        json.loads(stdout)

    def test_stability_on_clipped_checkpoint_passes(self, checkpoint, capsys, tmp_path):
        code, stdout, _ = run(
            capsys, "analyze", "--checkpoint", str(checkpoint),
            "--report", "stability", "--out", str(tmp_path / "s"),
        )
        assert code == 0
        assert json.loads(stdout)["all_verdicts_pass"] is True

    def test_corrupt_checkpoint_exits_4(self, checkpoint, capsys):
        raw = bytearray(checkpoint.read_bytes())
        raw[-3] ^= 0x42
        checkpoint.write_bytes(bytes(raw))
        code, _, err = run(
            capsys, "analyze", "--checkpoint", str(checkpoint),
            "--report", "nonexpansive",
        )
        assert code == 4
        assert "corrupt" in err.lower() or "checksum" in err.lower()


class TestGradcheckCommand:
    def test_small_config_passes(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        code, out, _ = run(capsys, "gradcheck", "--config", str(cfg))
        assert code == 0
        doc = json.loads(out)
        assert doc["passed"] is True
        assert doc["max_relative_error"] < 1e-6
        report = json.loads((tmp_path / "out" / "gradcheck.json").read_text())
        assert len(report["combinations"]) == 12

    def test_single_expert_collapse_config_passes(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path, adapter={"total_rank": 4, "experts": 1, "lora_alpha": 8.0}
        )
        code, out, _ = run(capsys, "gradcheck", "--config", str(cfg))
        assert code == 0
        assert json.loads(out)["passed"] is True

    def test_dim_cap_enforced(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path,
            task={"clusters": 2, "input_dim": 64, "output_dim": 64,
                  "samples_per_cluster": 40},
            adapter={"total_rank": 4, "experts": 2, "lora_alpha": 8.0},
        )
        code, _, err = run(capsys, "gradcheck", "--config", str(cfg))
        assert code == 2
        assert "32" in err


class TestCkptCommand:
    def test_roundtrip_and_inspect(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert run(capsys, "train", "--config", str(cfg))[0] == 0
        ckpt = tmp_path / "out" / "checkpoint.tlkl"
        code, out, _ = run(capsys, "ckpt", "roundtrip", "--checkpoint", str(ckpt))
        assert code == 0
        assert json.loads(out)["roundtrip_bit_identical"] is True
        code, out, _ = run(capsys, "ckpt", "inspect", "--checkpoint", str(ckpt))
        assert code == 0
        doc = json.loads(out)
        assert doc["method"] == "talklora"
        assert doc["shared_tensors"] == 2
