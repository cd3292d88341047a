"""Command-line pipeline: synth, featurize, train, predict, evaluate, ablate.

Every command except ``synth`` is driven by one JSON run config (see
``config.py``); ``--seed`` and ``--out`` override the config in place.
Artifacts land under the config's output directory and every artifact
records the config digest and seed, so outputs can be traced back to the
exact configuration that produced them.

Exit codes: 0 success, 1 user/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, store, synth
from .archive import import_pretrained, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .errors import DataError, RulcastError
from .features import FeatureMap, featurize_snapshots
from .ingest import (
    RulSeries,
    TaskData,
    bearing_windows,
    build_task,
    load_snapshot_dir,
    normalize_rul,
    serialize_series,
    stack_samples,
)
from .metrics import evaluate as evaluate_metrics
from .metrics import write_report
from .model import init_state, predict_batch
from .training import prompt_tune, sft


def _safe_name(key) -> str:
    ds, bearing = key
    return f"{ds}__{bearing.replace('/', '_')}"


def _feature_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / "features"


def _provenance(cfg: RunConfig) -> dict[str, str]:
    return {"config_digest": cfg.digest, "seed": str(cfg.seed)}


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------


def _input_digest(bearing_dir: Path, pattern: str) -> str:
    files = sorted(bearing_dir.glob(pattern), key=lambda p: p.name)
    parts = [f"{f.name}:{store.digest_file(f)}" for f in files]
    return store.digest_bytes("\n".join(parts).encode())


def cmd_featurize(cfg: RunConfig, force: bool = False) -> int:
    feature_dir = _feature_dir(cfg)
    feature_dir.mkdir(parents=True, exist_ok=True)
    for key in cfg.task.all_bearings():
        ds_name, bearing = key
        dataset = cfg.datasets[ds_name]
        bearing_dir = Path(dataset.root) / bearing
        stem = feature_dir / _safe_name(key)
        manifest_path = Path(str(stem) + ".manifest")

        input_digest = None
        if manifest_path.exists() and not force:
            manifest = store.read_manifest(manifest_path)
            input_digest = _input_digest(bearing_dir, dataset.schema.pattern)
            if (
                manifest.get("config_digest") == cfg.digest
                and manifest.get("input_digest") == input_digest
            ):
                print(f"featurize: {key} up to date, skipping")
                continue

        series = load_snapshot_dir(
            bearing_dir,
            dataset.schema,
            bearing_id=bearing,
            sampling_rate=dataset.sampling_rate,
            snapshot_interval=dataset.snapshot_interval,
        )
        fmap, fpt, rms_vals = featurize_snapshots(
            series.channel_windows(), dataset.sampling_rate, cfg.features
        )
        labels = normalize_rul(series)

        store.write_matrix(Path(str(stem) + ".features.bin"), fmap.rows)
        store.write_matrix(Path(str(stem) + ".labels.bin"), labels.values[:, None])
        store.write_matrix(Path(str(stem) + ".rms.bin"), rms_vals.values[:, None])
        if input_digest is None:
            input_digest = _input_digest(bearing_dir, dataset.schema.pattern)
        store.write_manifest(
            manifest_path,
            {
                **_provenance(cfg),
                "dataset": ds_name,
                "bearing": bearing,
                "input_digest": input_digest,
                "series_digest": store.digest_bytes(serialize_series(series)),
                "frame_width_s": repr(cfg.features.stft.frame_width_s),
                "frame_stride_s": repr(cfg.features.stft.frame_stride_s),
                "window": cfg.features.stft.window,
                "d_out": str(cfg.features.d_out),
                "feature_channels": ",".join(cfg.features.feature_channels),
                "fpt_enabled": str(cfg.features.fpt_enabled),
                "fpt_index": "" if fpt is None or fpt.fpt_index is None else str(fpt.fpt_index),
                "fpt_offset": str(fmap.fpt_offset),
                "total_life": str(labels.total_life),
                "feature_rows": str(fmap.rows.shape[0]),
                "feature_dim": str(fmap.rows.shape[1]),
            },
        )
        print(f"featurize: {key} -> {fmap.rows.shape[0]} rows x {fmap.rows.shape[1]} features")
    return 0


def _load_cached(cfg: RunConfig, key) -> tuple[FeatureMap, RulSeries]:
    stem = _feature_dir(cfg) / _safe_name(key)
    manifest_path = Path(str(stem) + ".manifest")
    if not manifest_path.exists():
        raise DataError(f"no feature cache for bearing {key}; run `rulcast featurize` first")
    manifest = store.read_manifest(manifest_path)
    rows = store.read_matrix(Path(str(stem) + ".features.bin"))
    label_values = store.read_matrix(Path(str(stem) + ".labels.bin"))[:, 0]
    fmap = FeatureMap(rows=rows, fpt_offset=int(manifest["fpt_offset"]))
    labels = RulSeries(values=label_values, total_life=int(manifest["total_life"]))
    return fmap, labels


def _load_task(cfg: RunConfig) -> TaskData:
    features = {}
    labels = {}
    for key in cfg.task.all_bearings():
        fmap, rul = _load_cached(cfg, key)
        features[key] = fmap
        labels[key] = rul
    return build_task(cfg.task, features, labels)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    task = _load_task(cfg)
    ckpt_dir = Path(cfg.out_dir) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    state = init_state(cfg.model, seed=cfg.seed)
    if cfg.pretrained_archive:
        state = import_pretrained(state, cfg.pretrained_archive)
        print(f"train: imported backbone weights from {cfg.pretrained_archive}")

    started = time.perf_counter()
    state, sft_report = sft(state, task.sft_samples, cfg.sft_plan, seed=cfg.seed)
    save_checkpoint(ckpt_dir / "sft.bin", state)
    state, pt_report = prompt_tune(state, task.prompt_samples, cfg.pt_plan, seed=cfg.seed)
    save_checkpoint(ckpt_dir / "pt.bin", state)
    wall = time.perf_counter() - started

    sft_x, sft_y = stack_samples(task.sft_samples)
    pt_x, pt_y = stack_samples(task.prompt_samples)
    store.write_manifest(
        Path(cfg.out_dir) / "run.manifest",
        {
            **_provenance(cfg),
            "task": cfg.task.name,
            "sft_plan": json.dumps(
                {"epochs": cfg.sft_plan.epochs, "learning_rate": cfg.sft_plan.learning_rate,
                 "batch_size": cfg.sft_plan.batch_size}
            ),
            "pt_plan": json.dumps(
                {"epochs": cfg.pt_plan.epochs, "learning_rate": cfg.pt_plan.learning_rate,
                 "batch_size": cfg.pt_plan.batch_size}
            ),
            "sft_samples": str(task.n_sft),
            "pt_samples": str(task.n_prompt),
            "sft_data_digest": store.digest_array(sft_x) + ":" + store.digest_array(sft_y),
            "pt_data_digest": store.digest_array(pt_x) + ":" + store.digest_array(pt_y),
            "sft_losses": ",".join(f"{v:.12g}" for v in sft_report.losses),
            "pt_losses": ",".join(f"{v:.12g}" for v in pt_report.losses),
            "frozen_digest": pt_report.frozen_digest,
            "wall_time_s": f"{wall:.3f}",
        },
    )
    print(
        f"train: sft {task.n_sft} samples x {cfg.sft_plan.epochs} epochs, "
        f"pt {task.n_prompt} samples x {cfg.pt_plan.epochs} epochs "
        f"({wall:.1f}s); checkpoints in {ckpt_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# predict / evaluate
# ---------------------------------------------------------------------------


def _prediction_path(cfg: RunConfig, key) -> Path:
    return Path(cfg.out_dir) / "predictions" / (_safe_name(key) + ".tsv")


def cmd_predict(cfg: RunConfig, checkpoint: str | None = None) -> int:
    ckpt_path = Path(checkpoint) if checkpoint else Path(cfg.out_dir) / "checkpoints" / "pt.bin"
    if not ckpt_path.exists():
        raise DataError(f"checkpoint {ckpt_path} not found; run `rulcast train` first")
    state = load_checkpoint(ckpt_path)
    pred_dir = Path(cfg.out_dir) / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)

    for key in cfg.task.test_bearings:
        fmap, labels = _load_cached(cfg, key)
        samples = bearing_windows(fmap, labels, cfg.task.lookback, cfg.task.horizon, key)
        xs, ys = stack_samples(samples)
        preds = predict_batch(state, xs)

        lines = [
            f"# config_digest={cfg.digest}",
            f"# seed={cfg.seed}",
            f"# checkpoint={ckpt_path.name}",
            f"# bearing={key[0]}:{key[1]}",
            "# columns=index\tpredicted\tlabel",
        ]
        for w in range(preds.shape[0]):
            for k in range(preds.shape[1]):
                idx = fmap.fpt_offset + w + cfg.task.lookback + k
                lines.append(f"{idx}\t{preds[w, k]:.17g}\t{ys[w, k]:.17g}")
        _prediction_path(cfg, key).write_text("\n".join(lines) + "\n")
        print(f"predict: {key} -> {preds.shape[0]} windows x {preds.shape[1]} steps")
    return 0


def read_prediction_file(path) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = [], []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        cells = line.split("\t")
        preds.append(float(cells[1]))
        labels.append(float(cells[2]))
    return np.array(preds), np.array(labels)


def cmd_evaluate(cfg: RunConfig) -> int:
    metrics_dir = Path(cfg.out_dir) / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    for key in cfg.task.test_bearings:
        pred_path = _prediction_path(cfg, key)
        if not pred_path.exists():
            raise DataError(f"no predictions for {key}; run `rulcast predict` first")
        preds, labels = read_prediction_file(pred_path)
        report = evaluate_metrics(preds, labels, mape_denominator=cfg.mape_denominator)
        out_path = metrics_dir / (_safe_name(key) + ".kv")
        write_report(out_path, report, header={**_provenance(cfg), "bearing": f"{key[0]}:{key[1]}"})
        summary = (
            f"bearing {key[0]}:{key[1]} over {report.sample_count} prediction steps\n"
            f"  mean absolute error        {report.mae:.6f}\n"
            f"  root mean square error     {report.rmse:.6f}\n"
            f"  mean absolute pct error    {report.mape:.4f}%  "
            f"(denominator: {cfg.mape_denominator})\n"
            f"  asymmetric score           {report.score:.6f}\n"
            f"  config digest              {cfg.digest}\n"
            f"  seed                       {cfg.seed}\n"
        )
        (metrics_dir / (_safe_name(key) + ".txt")).write_text(summary)
        print(
            f"evaluate: {key} mae={report.mae:.4f} rmse={report.rmse:.4f} "
            f"mape={report.mape:.2f}% score={report.score:.4f} (n={report.sample_count})"
        )
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(cfg: RunConfig) -> int:
    if cfg.ablation is None:
        raise DataError("config has no `ablation` section")
    axis, values = cfg.ablation
    task = _load_task(cfg)
    sweep = analysis.ablate(
        init_state, cfg.model, task, axis, values, cfg.sft_plan, cfg.pt_plan, seed=cfg.seed
    )
    out_dir = Path(cfg.out_dir) / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"sweep_{axis}.tsv"
    analysis.write_sweep(out_path, sweep, header=_provenance(cfg))
    print(f"ablate: {len(sweep.values)} cells -> {out_path}")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(out: str, seed: int, snapshots: int, samples: int) -> int:
    spec = synth.default_spec(snapshots=snapshots, samples=samples)
    manifest = synth.generate(out, spec, seed=seed)
    config = synth.suggested_config(out, manifest, out_dir=str(Path(out) / "runs"))
    config_path = Path(out) / "config.json"
    config_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    n = len(manifest["bearings"])
    print(f"synth: {n} bearings under {out}; suggested config at {config_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rulcast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth_p = sub.add_parser("synth", help="generate the synthetic run-to-failure fixture")
    synth_p.add_argument("--out", required=True, help="fixture output directory")
    synth_p.add_argument("--seed", type=int, default=0)
    synth_p.add_argument("--snapshots", type=int, default=100, help="nominal life per bearing")
    synth_p.add_argument("--samples", type=int, default=512, help="samples per snapshot")

    for name, help_text in [
        ("featurize", "compute and cache feature maps and labels"),
        ("train", "run two-stage fine-tuning and write checkpoints"),
        ("predict", "write RUL trajectory files for the test bearings"),
        ("evaluate", "score prediction files against labels"),
        ("ablate", "run the configured hyperparameter sweep"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the config output directory")
        if name == "featurize":
            p.add_argument("--force", action="store_true", help="recompute even if caches match")
        if name == "predict":
            p.add_argument("--checkpoint", default=None, help="checkpoint to predict with")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args.out, args.seed, args.snapshots, args.samples)
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        if args.command == "featurize":
            return cmd_featurize(cfg, force=args.force)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, checkpoint=args.checkpoint)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except RulcastError as exc:
        print(f"rulcast {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
