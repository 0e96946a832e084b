# tests/test_cli.py
import json

import pytest
from click.testing import CliRunner

from clims import synthgen
from clims.cli import cli
from clims.config import BACKGROUND_SETS_VERSION
from clims.evalkit import evaluate_run
from clims.exceptions import SceneSpecError
from clims.pipeline.checkpoint import load_checkpoint, model_from_state, parameter_checksum
from clims.synthgen import SceneDataset
from clims.utils.audit import read_log


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def spec_file(tmp_path, small_spec):
    path = tmp_path / "spec.json"
    path.write_text(small_spec.model_dump_json())
    return path


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"batch_size": 4, "crop_size": 32, "epochs": 1, "learning_rate": 0.001}))
    return path


@pytest.fixture
def data_dir(tmp_path, runner, spec_file):
    out = tmp_path / "data"
    result = runner.invoke(cli, ["synth-data", "--spec", str(spec_file), "--n", "8", "--eval-n", "4", "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


class TestSynthData:
    def test_default_spec(self, runner, tmp_path):
        out = tmp_path / "d"
        result = runner.invoke(cli, ["synth-data", "--spec", "default", "--n", "10", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert len(list((out / "images").glob("*.png"))) == 10
        assert len(list((out / "masks").glob("*.png"))) == 10
        assert json.loads((out / "manifest.json").read_text())["count"] == 10

    def test_missing_out(self, runner):
        result = runner.invoke(cli, ["synth-data", "--n", "3"])
        assert result.exit_code == 1
        assert "--out" in result.output

    def test_bad_spec(self, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"canvas_size": [4, 4], "concepts": []}))
        result = runner.invoke(cli, ["synth-data", "--spec", str(bad), "--n", "1", "--out", str(tmp_path / "d")])
        assert result.exit_code == 1

    def test_failed_eval_scene_writes_nothing(self, runner, tmp_path, spec_file, monkeypatch):
        original = synthgen.generate_scene

        def flaky(spec, index):
            if index >= 5:
                raise SceneSpecError("no room for the objects")
            return original(spec, index)

        monkeypatch.setattr(synthgen, "generate_scene", flaky)
        out = tmp_path / "d"
        result = runner.invoke(cli, ["synth-data", "--spec", str(spec_file), "--n", "4", "--eval-n", "2",
                                     "--out", str(out)])
        assert result.exit_code == 1
        assert not out.exists()

    def test_rerun_is_byte_identical(self, runner, tmp_path, spec_file):
        for name in ("a", "b"):
            args = ["synth-data", "--spec", str(spec_file), "--n", "3", "--out", str(tmp_path / name)]
            assert runner.invoke(cli, args).exit_code == 0
        for path in sorted((tmp_path / "a").rglob("*.*")):
            assert path.read_bytes() == (tmp_path / "b" / path.relative_to(tmp_path / "a")).read_bytes()


class TestTrain:
    def test_run_directory(self, runner, tmp_path, data_dir, config_file):
        run = tmp_path / "run"
        result = runner.invoke(cli, ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(run)])
        assert result.exit_code == 0, result.output
        assert (run / "checkpoints" / "epoch_001.ckpt").exists()
        assert (run / "train_log.jsonl").exists()
        assert (run / "prompts.json").exists()

    def test_losses_flag(self, runner, tmp_path, data_dir, config_file):
        run = tmp_path / "run"
        args = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(run), "--losses", "otm"]
        assert runner.invoke(cli, args).exit_code == 0
        steps = [r for r in read_log(run / "train_log.jsonl") if r["event"] == "step"]
        assert steps
        assert all(r["btm"] == 0.0 and r["cbs"] == 0.0 for r in steps)

    def test_same_seed_twice(self, runner, tmp_path, data_dir, config_file):
        checksums = []
        for name in ("a", "b"):
            args = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(tmp_path / name),
                    "--seed", "1"]
            assert runner.invoke(cli, args).exit_code == 0
            checksums.append(parameter_checksum(load_checkpoint(tmp_path / name / "checkpoints" / "epoch_001.ckpt")))
        assert checksums[0] == checksums[1]

    def test_invalid_config(self, runner, tmp_path, data_dir):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"learning_rate": -1}))
        result = runner.invoke(cli, ["train", "--config", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "r")])
        assert result.exit_code == 1
        assert "learning_rate" in result.output

    def test_crop_larger_than_images_writes_nothing(self, runner, tmp_path, data_dir):
        config = tmp_path / "big.json"
        config.write_text(json.dumps({"crop_size": 64, "epochs": 1}))
        run = tmp_path / "run"
        result = runner.invoke(cli, ["train", "--config", str(config), "--data", str(data_dir), "--out", str(run)])
        assert result.exit_code == 1
        assert "64" in result.output
        assert not run.exists()

    def test_published_prompt_book(self, runner, tmp_path, data_dir, config_file):
        run = tmp_path / "run"
        result = runner.invoke(cli, ["train", "--config", str(config_file), "--data", str(data_dir),
                                     "--out", str(run), "--prompts", "published"])
        assert result.exit_code == 0, result.output
        saved = json.loads((run / "prompts.json").read_text())
        assert saved["background_sets_version"] == BACKGROUND_SETS_VERSION
        assert saved["backgrounds"] == {}

    def test_prompt_book_mismatch(self, runner, tmp_path, data_dir, config_file):
        prompts = tmp_path / "p.json"
        prompts.write_text(json.dumps({"classes": ["cat"]}))
        run = tmp_path / "run"
        result = runner.invoke(cli, ["train", "--config", str(config_file), "--data", str(data_dir),
                                     "--out", str(run), "--prompts", str(prompts)])
        assert result.exit_code == 1
        assert not (run / "checkpoints").exists()


class TestEval:
    @pytest.fixture
    def checkpoint(self, runner, tmp_path, data_dir, config_file):
        run = tmp_path / "run"
        assert runner.invoke(cli, ["train", "--config", str(config_file), "--data", str(data_dir),
                                   "--out", str(run)]).exit_code == 0
        return run / "checkpoints" / "epoch_001.ckpt"

    def test_report(self, runner, tmp_path, data_dir, checkpoint):
        out = tmp_path / "eval"
        result = runner.invoke(cli, ["eval", "--checkpoint", str(checkpoint), "--data", str(data_dir / "eval"),
                                     "--out", str(out), "--threshold", "0.4", "--export-cams", "2"])
        assert result.exit_code == 0, result.output
        report = json.loads((out / "eval.json").read_text())
        assert report["threshold"] == 0.4
        assert set(report["per_class_iou"]) == {"background", "toy-train", "toy-boat"}
        assert report["miou"] is not None
        assert (out / "cams" / "00001_toy-boat.png").exists()
        assert (out / "cams" / "00000.json").exists()
        assert "mIoU" in result.output

    def test_miou_matches_library_evaluation(self, runner, tmp_path, data_dir, checkpoint):
        out = tmp_path / "eval"
        result = runner.invoke(cli, ["eval", "--checkpoint", str(checkpoint), "--data", str(data_dir / "eval"),
                                     "--out", str(out), "--export-cams", "0"])
        assert result.exit_code == 0, result.output
        report = json.loads((out / "eval.json").read_text())

        model = model_from_state(load_checkpoint(checkpoint))
        summary = evaluate_run(model, SceneDataset.load(data_dir / "eval", mode="eval"))
        assert report["threshold"] == summary.threshold
        assert report["miou"] == pytest.approx(summary.miou, abs=1e-12)

    def test_missing_masks(self, runner, tmp_path, data_dir, checkpoint):
        for mask in (data_dir / "eval" / "masks").iterdir():
            mask.unlink()
        result = runner.invoke(cli, ["eval", "--checkpoint", str(checkpoint), "--data", str(data_dir / "eval"),
                                     "--out", str(tmp_path / "e")])
        assert result.exit_code == 1

    def test_corrupt_checkpoint(self, runner, tmp_path, data_dir):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage" * 10)
        result = runner.invoke(cli, ["eval", "--checkpoint", str(bad), "--data", str(data_dir / "eval"),
                                     "--out", str(tmp_path / "e")])
        assert result.exit_code == 2


class TestExperiments:
    def test_ablate_single_variant(self, runner, tmp_path, data_dir, config_file):
        out = tmp_path / "abl"
        result = runner.invoke(cli, ["ablate", "--config", str(config_file), "--data", str(data_dir),
                                     "--eval-data", str(data_dir / "eval"), "--out", str(out), "--variants", "OTM"])
        assert result.exit_code == 0, result.output
        table = json.loads((out / "ablation.json").read_text())
        assert [r["variant"] for r in table["rows"]] == ["OTM"]
        assert (out / "ablation.txt").exists()

    def test_default_ablation_is_six_rows_and_repeatable(self, runner, tmp_path, data_dir, config_file):
        tables = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(cli, ["ablate", "--config", str(config_file), "--data", str(data_dir),
                                         "--eval-data", str(data_dir / "eval"), "--out", str(out)])
            assert result.exit_code == 0, result.output
            tables.append(json.loads((out / "ablation.json").read_text()))
        assert [r["variant"] for r in tables[0]["rows"]] == [
            "CLS-baseline", "OTM", "OTM+BTM", "OTM+BTM+REG", "OTM+BTM+CBS", "OTM+BTM+REG+CBS",
        ]
        assert tables[0] == tables[1]

    def test_unknown_variant(self, runner, tmp_path, data_dir, config_file):
        result = runner.invoke(cli, ["ablate", "--config", str(config_file), "--data", str(data_dir),
                                     "--out", str(tmp_path / "abl"), "--variants", "OTM+FOO"])
        assert result.exit_code == 1

    def test_sensitivity(self, runner, tmp_path, data_dir, config_file):
        out = tmp_path / "sens"
        result = runner.invoke(cli, ["sensitivity", "--config", str(config_file), "--data", str(data_dir),
                                     "--eval-data", str(data_dir / "eval"), "--out", str(out),
                                     "--param", "delta", "--values", "1.0"])
        assert result.exit_code == 0, result.output
        table = json.loads((out / "sensitivity_delta.json").read_text())
        assert [r["value"] for r in table["rows"]] == [1.0]
        assert table["published_stable_range"] == [1.0, 1.3]
