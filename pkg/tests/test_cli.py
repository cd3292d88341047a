import json
from pathlib import Path

import numpy as np
import pytest

from rulcast import store
from rulcast.cli import main, read_prediction_file
from rulcast.config import load_config
from rulcast.synth import default_spec, generate, suggested_config


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Synthetic fixture + one full featurize/train/predict/evaluate run."""
    root = tmp_path_factory.mktemp("pipeline")
    fixture_dir = root / "fixture"
    manifest = generate(fixture_dir, default_spec(snapshots=60, samples=512), seed=7)
    config = suggested_config(fixture_dir, manifest, out_dir=str(root / "out"))
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2, sort_keys=True))

    assert main(["featurize", "--config", str(config_path)]) == 0
    assert main(["train", "--config", str(config_path)]) == 0
    assert main(["predict", "--config", str(config_path)]) == 0
    assert main(["evaluate", "--config", str(config_path)]) == 0
    return {
        "root": root,
        "fixture": fixture_dir,
        "config_path": config_path,
        "config": config,
        "out": root / "out",
        "manifest": manifest,
    }


class TestSynthFixture:
    def test_layout_and_manifest(self, pipeline):
        manifest = pipeline["manifest"]
        assert len(manifest["bearings"]) == 8
        conditions = {v["condition"] for v in manifest["bearings"].values()}
        assert conditions == {"A", "B"}
        assert (pipeline["fixture"] / "fixture.json").exists()
        some_bearing = next(iter(manifest["bearings"]))
        files = sorted((pipeline["fixture"] / some_bearing).glob("acc_*.csv"))
        assert len(files) == manifest["bearings"][some_bearing]["life"]

    def test_generation_is_seed_deterministic(self, tmp_path):
        spec = default_spec(snapshots=12, samples=64)
        m1 = generate(tmp_path / "a", spec, seed=3)
        m2 = generate(tmp_path / "b", spec, seed=3)
        assert m1["bearings"] == m2["bearings"]
        f1 = (tmp_path / "a" / "A/a1" / "acc_00001.csv").read_bytes()
        f2 = (tmp_path / "b" / "A/a1" / "acc_00001.csv").read_bytes()
        assert f1 == f2


class TestFeaturize:
    def test_caches_and_manifests_written(self, pipeline):
        cfg = load_config(pipeline["config_path"])
        feature_dir = pipeline["out"] / "features"
        for key in cfg.task.all_bearings():
            stem = feature_dir / f"{key[0]}__{key[1].replace('/', '_')}"
            rows = store.read_matrix(Path(str(stem) + ".features.bin"))
            labels = store.read_matrix(Path(str(stem) + ".labels.bin"))
            manifest = store.read_manifest(Path(str(stem) + ".manifest"))
            assert rows.shape[1] == cfg.features.d_out
            assert int(manifest["feature_rows"]) == rows.shape[0]
            assert int(manifest["total_life"]) == labels.shape[0]
            assert manifest["config_digest"] == cfg.digest
            # onset truncation: features cover the life past the onset index
            assert rows.shape[0] == labels.shape[0] - int(manifest["fpt_offset"])

    def test_rerun_skips_up_to_date_caches(self, pipeline, capsys):
        assert main(["featurize", "--config", str(pipeline["config_path"])]) == 0
        out = capsys.readouterr().out
        assert out.count("skipping") == 8

    def test_three_snapshot_bearing_yields_three_rows(self, tmp_path):
        rng = np.random.default_rng(0)
        bearing = tmp_path / "data" / "solo"
        bearing.mkdir(parents=True)
        for i in range(3):
            np.savetxt(bearing / f"acc_{i+1}.csv", rng.normal(size=(512, 2)),
                       fmt="%.6f", delimiter=",")
        config = {
            "seed": 0,
            "out_dir": str(tmp_path / "out"),
            "datasets": {"synth": {"root": str(tmp_path / "data"), "schema": "synth"}},
            "features": {"d_out": 8, "fpt_enabled": False},
            "model": {"hidden": 8, "heads": 2, "blocks": 1, "patch": 2, "patch_stride": 1},
            "task": {
                "name": "solo",
                "sft_bearings": [["synth", "solo"]],
                "prompt_bearings": [],
                "test_bearings": [],
                "lookback": 2,
                "horizon": 2,
            },
        }
        config_path = tmp_path / "c.json"
        config_path.write_text(json.dumps(config))
        assert main(["featurize", "--config", str(config_path)]) == 0
        rows = store.read_matrix(tmp_path / "out" / "features" / "synth__solo.features.bin")
        assert rows.shape == (3, 8)


class TestTrain:
    def test_two_checkpoints_and_manifest(self, pipeline):
        ckpt = pipeline["out"] / "checkpoints"
        assert (ckpt / "sft.bin").exists()
        assert (ckpt / "pt.bin").exists()
        manifest = store.read_manifest(pipeline["out"] / "run.manifest")
        cfg = load_config(pipeline["config_path"])
        assert manifest["config_digest"] == cfg.digest
        assert len(manifest["sft_losses"].split(",")) == cfg.sft_plan.epochs
        assert len(manifest["pt_losses"].split(",")) == cfg.pt_plan.epochs

    def test_checkpoints_carry_stage_tags(self, pipeline):
        from rulcast.archive import load_checkpoint

        assert load_checkpoint(pipeline["out"] / "checkpoints" / "sft.bin").stage == "sft"
        assert load_checkpoint(pipeline["out"] / "checkpoints" / "pt.bin").stage == "pt"


class TestPredictEvaluate:
    def test_prediction_file_format_and_provenance(self, pipeline):
        cfg = load_config(pipeline["config_path"])
        key = cfg.task.test_bearings[0]
        path = pipeline["out"] / "predictions" / f"{key[0]}__{key[1].replace('/', '_')}.tsv"
        text = path.read_text()
        assert f"# config_digest={cfg.digest}" in text
        assert f"# seed={cfg.seed}" in text
        preds, labels = read_prediction_file(path)
        assert preds.size == labels.size > 0
        assert np.all((labels >= 0) & (labels <= 1))

    def test_metrics_file_written_with_digest(self, pipeline):
        cfg = load_config(pipeline["config_path"])
        key = cfg.task.test_bearings[0]
        stem = pipeline["out"] / "metrics" / f"{key[0]}__{key[1].replace('/', '_')}"
        assert "mean absolute error" in (stem.with_suffix(".txt")).read_text()
        path = stem.with_suffix(".kv")
        lines = path.read_text().splitlines()
        assert f"# config_digest={cfg.digest}" in lines
        values = dict(
            line.split("=", 1) for line in lines if line and not line.startswith("#")
        )
        assert set(values) == {"mae", "rmse", "mape", "score", "sample_count"}
        assert float(values["rmse"]) >= float(values["mae"])

    def test_trained_model_beats_trivial_half_guess(self, pipeline):
        cfg = load_config(pipeline["config_path"])
        key = cfg.task.test_bearings[0]
        path = pipeline["out"] / "predictions" / f"{key[0]}__{key[1].replace('/', '_')}.tsv"
        preds, labels = read_prediction_file(path)
        model_mae = np.mean(np.abs(preds - labels))
        constant_mae = np.mean(np.abs(0.5 - labels))
        assert model_mae < constant_mae

    def test_perfect_predictions_give_zero_errors(self, pipeline, tmp_path):
        cfg = load_config(pipeline["config_path"])
        key = cfg.task.test_bearings[0]
        name = f"{key[0]}__{key[1].replace('/', '_')}"
        out = tmp_path / "perfect"
        (out / "predictions").mkdir(parents=True)
        lines = ["# synthetic perfect predictions"]
        for i, value in enumerate(np.linspace(1.0, 0.1, 20)):
            lines.append(f"{i}\t{value:.17g}\t{value:.17g}")
        (out / "predictions" / f"{name}.tsv").write_text("\n".join(lines) + "\n")
        assert main(
            ["evaluate", "--config", str(pipeline["config_path"]), "--out", str(out)]
        ) == 0
        values = dict(
            line.split("=", 1)
            for line in (out / "metrics" / f"{name}.kv").read_text().splitlines()
            if line and not line.startswith("#")
        )
        assert float(values["mae"]) == 0.0
        assert float(values["rmse"]) == 0.0
        assert float(values["mape"]) == 0.0
        assert float(values["score"]) == 0.0


class TestAblateCommand:
    def test_block_count_sweep_writes_plot_data(self, pipeline, tmp_path):
        config = dict(pipeline["config"])
        config["ablation"] = {"axis": "block_count", "values": [1, 2]}
        config["training"] = {
            "sft": {"epochs": 2, "learning_rate": 1e-3, "batch_size": 32},
            "pt": {"epochs": 1, "learning_rate": 1e-3, "batch_size": 16},
        }
        path = tmp_path / "ablate.json"
        path.write_text(json.dumps(config))
        assert main(["ablate", "--config", str(path)]) == 0
        sweep = (pipeline["out"] / "analysis" / "sweep_block_count.tsv").read_text()
        rows = [l for l in sweep.splitlines() if l and not l.startswith("#")]
        assert rows[0].split("\t")[0] == "block_count"
        assert len(rows) == 3


class TestExitCodes:
    def test_missing_config_file_is_user_error(self, capsys):
        assert main(["train", "--config", "/nonexistent/config.json"]) == 1
        assert "error" in capsys.readouterr().err

    def test_malformed_config_is_user_error(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{\"datasets\": {}}")
        assert main(["featurize", "--config", str(path)]) == 1
        assert "task" in capsys.readouterr().err

    def test_missing_data_directory_is_data_error(self, tmp_path, capsys):
        config = {
            "seed": 0,
            "out_dir": str(tmp_path / "out"),
            "datasets": {"synth": {"root": str(tmp_path / "nowhere"), "schema": "synth"}},
            "model": {"hidden": 8, "heads": 2, "blocks": 1, "patch": 2, "patch_stride": 1},
            "task": {
                "name": "t",
                "sft_bearings": [["synth", "missing"]],
                "prompt_bearings": [],
                "test_bearings": [],
                "lookback": 4,
                "horizon": 2,
            },
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(config))
        assert main(["featurize", "--config", str(path)]) == 2

    def test_predict_before_train_is_data_error(self, pipeline, tmp_path):
        assert main(
            ["predict", "--config", str(pipeline["config_path"]), "--out", str(tmp_path / "x")]
        ) == 2

    def test_evaluate_before_predict_is_data_error(self, pipeline, tmp_path):
        assert main(
            ["evaluate", "--config", str(pipeline["config_path"]), "--out", str(tmp_path / "y")]
        ) == 2


class TestConfigOverrides:
    def test_seed_override_changes_digested_seed_not_config_digest(self, pipeline):
        cfg_a = load_config(pipeline["config_path"])
        cfg_b = load_config(pipeline["config_path"], seed_override=123)
        assert cfg_b.seed == 123
        assert cfg_a.digest == cfg_b.digest

    def test_unknown_schema_preset_rejected(self, tmp_path):
        from rulcast.errors import ConfigError

        config = {
            "datasets": {"d": {"root": ".", "schema": "mystery"}},
            "task": {
                "name": "t",
                "sft_bearings": [["d", "b"]],
                "prompt_bearings": [],
                "test_bearings": [],
            },
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(config))
        with pytest.raises(ConfigError, match="mystery"):
            load_config(path)
