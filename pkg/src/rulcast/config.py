"""Declarative run configuration: one JSON file drives every command.

Every hyperparameter has a default matching the shipped model
configuration (hidden 768, 6 blocks, 12 heads, patch 6 stride 4, dropout
0.2, Adam at 1e-5, batch 50, 64 supervised epochs + 16 prompt epochs,
lookback 75). Dataset column schemas and transfer tasks ship as editable
presets; the FEMTO presets use a 25-step horizon, the XJTU presets a
20-step horizon.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .features import FeatureConfig, StftConfig
from .ingest import ColumnSchema, TaskSpec
from .model import ModelConfig
from .training import StagePlan

SCHEMA_PRESETS: dict[str, ColumnSchema] = {
    # FEMTO acc files: h, m, s, microseconds, horizontal accel, vertical accel
    "femto": ColumnSchema(delimiter=",", skip_rows=0, channels={"horizontal": 4, "vertical": 5}),
    # XJTU csv files carry a one-line header over two acceleration columns
    "xjtu": ColumnSchema(delimiter=",", skip_rows=1, channels={"horizontal": 0, "vertical": 1}),
    "synth": ColumnSchema(delimiter=",", skip_rows=0, channels={"horizontal": 0, "vertical": 1}),
}


def _femto_task(n, sft, prompt, test):
    return {
        "name": f"femto-task{n}",
        "sft_bearings": [["femto", b] for b in sft],
        "prompt_bearings": [["femto", prompt]],
        "test_bearings": [["femto", test]],
        "lookback": 75,
        "horizon": 25,
    }


def _xjtu_task(n, sft, prompt, test):
    return {
        "name": f"xjtu-task{n}",
        "sft_bearings": [["xjtu", b] for b in sft],
        "prompt_bearings": [["xjtu", b] for b in prompt],
        "test_bearings": [["xjtu", b] for b in test],
        "lookback": 75,
        "horizon": 20,
    }


TASK_PRESETS: dict[str, dict] = {
    "femto-task1": _femto_task(1, ["Bearing1_1", "Bearing1_2"], "Bearing3_2", "Bearing3_3"),
    "femto-task2": _femto_task(2, ["Bearing2_1", "Bearing2_2"], "Bearing3_2", "Bearing3_3"),
    "femto-task3": _femto_task(3, ["Bearing3_1", "Bearing3_2"], "Bearing1_1", "Bearing1_3"),
    "femto-task4": _femto_task(4, ["Bearing2_1", "Bearing2_2"], "Bearing1_1", "Bearing1_3"),
    "femto-task5": _femto_task(5, ["Bearing3_1", "Bearing3_2"], "Bearing2_1", "Bearing2_3"),
    "femto-task6": _femto_task(6, ["Bearing1_1", "Bearing1_2"], "Bearing2_1", "Bearing2_3"),
    "xjtu-task1": _xjtu_task(
        1,
        ["Bearing2_1", "Bearing2_2", "Bearing2_3", "Bearing3_1"],
        ["Bearing1_2", "Bearing1_3"],
        ["Bearing1_4", "Bearing1_5"],
    ),
    "xjtu-task2": _xjtu_task(
        2,
        ["Bearing1_1", "Bearing1_2", "Bearing1_3", "Bearing3_1", "Bearing3_2", "Bearing3_3"],
        ["Bearing2_2", "Bearing2_3"],
        ["Bearing2_4", "Bearing2_5"],
    ),
    "xjtu-task3": _xjtu_task(
        3,
        ["Bearing1_1", "Bearing1_2", "Bearing1_3", "Bearing2_1", "Bearing2_2", "Bearing2_3"],
        ["Bearing3_2", "Bearing3_3"],
        ["Bearing3_4", "Bearing3_5"],
    ),
}


@dataclass(frozen=True)
class DatasetConfig:
    root: str
    schema: ColumnSchema
    sampling_rate: float = 25600.0
    snapshot_interval: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    datasets: dict[str, DatasetConfig]
    features: FeatureConfig
    task: TaskSpec
    model: ModelConfig
    sft_plan: StagePlan
    pt_plan: StagePlan
    pretrained_archive: str | None
    ablation: tuple[str, tuple] | None
    mape_denominator: str
    digest: str


def config_digest(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()


def _require(raw: dict, key: str, where: str):
    if key not in raw:
        raise ConfigError(f"{where}: missing required field {key!r}")
    return raw[key]


def _schema_from(value, schemas: dict[str, ColumnSchema], where: str) -> ColumnSchema:
    if isinstance(value, str):
        if value not in schemas:
            raise ConfigError(f"{where}: unknown schema preset {value!r}")
        return schemas[value]
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: schema must be a preset name or an object")
    try:
        return ColumnSchema(
            delimiter=value.get("delimiter", ","),
            skip_rows=int(value.get("skip_rows", 0)),
            channels={str(k): int(v) for k, v in _require(value, "channels", where).items()},
            pattern=value.get("pattern", "*.csv"),
            expected_samples=(
                int(value["expected_samples"]) if value.get("expected_samples") else None
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad schema field ({exc})") from None


def _bearing_list(value, where: str) -> tuple:
    out = []
    for item in value:
        if not (isinstance(item, (list, tuple)) and len(item) == 2):
            raise ConfigError(f"{where}: each bearing must be a [dataset, bearing_id] pair")
        out.append((str(item[0]), str(item[1])))
    return tuple(out)


def parse_config(raw: dict, *, seed_override=None, out_override=None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    digest = config_digest(raw)

    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    out_dir = str(raw.get("out_dir", "runs/out")) if out_override is None else str(out_override)

    schemas = dict(SCHEMA_PRESETS)
    for name, value in raw.get("schemas", {}).items():
        schemas[name] = _schema_from(value, schemas, f"schemas.{name}")

    datasets: dict[str, DatasetConfig] = {}
    for name, value in _require(raw, "datasets", "config").items():
        where = f"datasets.{name}"
        datasets[name] = DatasetConfig(
            root=str(_require(value, "root", where)),
            schema=_schema_from(value.get("schema", name), schemas, where),
            sampling_rate=float(value.get("sampling_rate", 25600.0)),
            snapshot_interval=float(value.get("snapshot_interval", 10.0)),
        )

    feat_raw = raw.get("features", {})
    features = FeatureConfig(
        stft=StftConfig(
            frame_width_s=float(feat_raw.get("frame_width_s", 0.020)),
            frame_stride_s=float(feat_raw.get("frame_stride_s", 0.010)),
            window=str(feat_raw.get("window", "hann")),
        ),
        d_out=int(feat_raw.get("d_out", 64)),
        fpt_enabled=bool(feat_raw.get("fpt_enabled", True)),
        fpt_channel=str(feat_raw.get("fpt_channel", "horizontal")),
        feature_channels=tuple(feat_raw.get("feature_channels", ["horizontal"])),
    )

    task_raw = _require(raw, "task", "config")
    if isinstance(task_raw, str) or "preset" in task_raw:
        preset_name = task_raw if isinstance(task_raw, str) else task_raw["preset"]
        if preset_name not in TASK_PRESETS:
            raise ConfigError(f"task: unknown preset {preset_name!r}")
        merged = dict(TASK_PRESETS[preset_name])
        if isinstance(task_raw, dict):
            merged.update({k: v for k, v in task_raw.items() if k != "preset"})
        task_raw = merged
    task = TaskSpec(
        name=str(_require(task_raw, "name", "task")),
        sft_bearings=_bearing_list(_require(task_raw, "sft_bearings", "task"), "task.sft_bearings"),
        prompt_bearings=_bearing_list(
            _require(task_raw, "prompt_bearings", "task"), "task.prompt_bearings"
        ),
        test_bearings=_bearing_list(
            _require(task_raw, "test_bearings", "task"), "task.test_bearings"
        ),
        lookback=int(task_raw.get("lookback", 75)),
        horizon=int(task_raw.get("horizon", 25)),
    )
    for ds, bearing in task.all_bearings():
        if ds not in datasets:
            raise ConfigError(f"task references unknown dataset {ds!r} (bearing {bearing})")

    model_raw = raw.get("model", {})
    model = ModelConfig(
        feature_dim=features.d_out * len(features.feature_channels),
        lookback=task.lookback,
        horizon=task.horizon,
        hidden=int(model_raw.get("hidden", 768)),
        blocks=int(model_raw.get("blocks", 6)),
        heads=int(model_raw.get("heads", 12)),
        patch=int(model_raw.get("patch", 6)),
        patch_stride=int(model_raw.get("patch_stride", 4)),
        dropout=float(model_raw.get("dropout", 0.2)),
        epsilon=float(model_raw.get("epsilon", 1e-5)),
        denormalize_output=bool(model_raw.get("denormalize_output", False)),
    )

    train_raw = raw.get("training", {})
    sft_raw = train_raw.get("sft", {})
    pt_raw = train_raw.get("pt", {})
    sft_plan = StagePlan(
        stage="sft",
        epochs=int(sft_raw.get("epochs", 64)),
        learning_rate=float(sft_raw.get("learning_rate", 1e-5)),
        batch_size=int(sft_raw.get("batch_size", 50)),
        tunable_groups=(
            tuple(sft_raw["tunable_groups"]) if "tunable_groups" in sft_raw else None
        ),
    )
    pt_plan = StagePlan(
        stage="pt",
        epochs=int(pt_raw.get("epochs", 16)),
        learning_rate=float(pt_raw.get("learning_rate", 1e-5)),
        batch_size=int(pt_raw.get("batch_size", 50)),
        tunable_groups=(
            tuple(pt_raw["tunable_groups"]) if "tunable_groups" in pt_raw else None
        ),
    )

    ablation = None
    if raw.get("ablation"):
        abl = raw["ablation"]
        axis = str(_require(abl, "axis", "ablation"))
        values = _require(abl, "values", "ablation")
        if axis == "patch":
            values = tuple((int(v[0]), int(v[1])) for v in values)
        else:
            values = tuple(int(v) for v in values)
        ablation = (axis, values)

    mape_denominator = str(raw.get("mape_denominator", "predicted"))
    if mape_denominator not in ("predicted", "actual"):
        raise ConfigError(f"mape_denominator must be 'predicted' or 'actual', got {mape_denominator!r}")

    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        datasets=datasets,
        features=features,
        task=task,
        model=model,
        sft_plan=sft_plan,
        pt_plan=pt_plan,
        pretrained_archive=raw.get("pretrained_archive"),
        ablation=ablation,
        mape_denominator=mape_denominator,
        digest=digest,
    )


def load_config(path, *, seed_override=None, out_override=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, seed_override=seed_override, out_override=out_override)
