"""Run-to-failure dataset loading, RUL labels and transfer-task assembly.

Snapshot files are delimiter-separated text, one file per acquisition,
described by a ColumnSchema (delimiter, rows to skip, channel -> column
mapping). Files are ordered by a natural sort key so both zero-padded and
unpadded numeric names load in acquisition order. Missing or non-numeric
samples are hard errors, never imputed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import store
from .errors import ConfigError, DataError
from .features import FeatureMap


@dataclass(frozen=True)
class ColumnSchema:
    """How to parse one dataset's snapshot files."""

    delimiter: str = ","
    skip_rows: int = 0
    channels: dict[str, int] = field(default_factory=lambda: {"horizontal": 0})
    pattern: str = "*.csv"
    expected_samples: int | None = None

    def __post_init__(self):
        if not self.channels:
            raise ConfigError("schema must map at least one channel to a column")
        if self.skip_rows < 0:
            raise ConfigError("skip_rows cannot be negative")


@dataclass(frozen=True)
class Snapshot:
    channels: dict[str, np.ndarray]
    index: int

    def __post_init__(self):
        lengths = {c: v.size for c, v in self.channels.items()}
        if min(lengths.values(), default=0) == 0:
            raise DataError(f"snapshot {self.index}: empty channel")
        if len(set(lengths.values())) > 1:
            raise DataError(f"snapshot {self.index}: ragged channel lengths {lengths}")


@dataclass(frozen=True)
class SnapshotSeries:
    bearing_id: str
    snapshots: list[Snapshot]
    sampling_rate: float
    snapshot_interval: float
    condition_id: str = ""

    def __post_init__(self):
        if self.sampling_rate <= 0:
            raise ConfigError(f"sampling rate must be positive, got {self.sampling_rate}")
        counts = {len(next(iter(s.channels.values()))) for s in self.snapshots}
        if len(counts) > 1:
            raise DataError(
                f"bearing {self.bearing_id}: snapshots have unequal sample counts {sorted(counts)}"
            )

    def __len__(self) -> int:
        return len(self.snapshots)

    def channel_windows(self) -> dict[str, list[np.ndarray]]:
        names = list(self.snapshots[0].channels)
        return {n: [s.channels[n] for s in self.snapshots] for n in names}


@dataclass(frozen=True)
class RulSeries:
    """Normalized remaining-life fractions, aligned with the snapshots."""

    values: np.ndarray
    total_life: int

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        v = self.values
        if v.size == 0:
            raise DataError("empty RUL series")
        if np.any(v < 0) or np.any(v > 1):
            raise DataError("RUL fractions must lie in [0, 1]")
        if np.any(np.diff(v) > 0):
            raise DataError("RUL series must be non-increasing")
        if v[-1] != 0.0:
            raise DataError("RUL series must end at 0")


BearingKey = tuple[str, str]


@dataclass(frozen=True)
class TaskSpec:
    """One transfer task: source-domain training set, target prompting and test sets."""

    name: str
    sft_bearings: tuple[BearingKey, ...]
    prompt_bearings: tuple[BearingKey, ...]
    test_bearings: tuple[BearingKey, ...]
    lookback: int
    horizon: int

    def __post_init__(self):
        groups = [set(self.sft_bearings), set(self.prompt_bearings), set(self.test_bearings)]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = groups[i] & groups[j]
                if overlap:
                    raise ConfigError(f"task {self.name}: bearing sets overlap on {sorted(overlap)}")
        if self.lookback < 1:
            raise ConfigError(f"lookback must be >= 1, got {self.lookback}")
        if self.horizon < 2:
            raise ConfigError(
                f"horizon must be >= 2 for multi-step extrapolation, got {self.horizon}"
            )

    def all_bearings(self) -> tuple[BearingKey, ...]:
        return self.sft_bearings + self.prompt_bearings + self.test_bearings


Sample = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class TaskData:
    sft_samples: list[Sample]
    prompt_samples: list[Sample]
    test_samples: list[Sample]

    @property
    def n_sft(self) -> int:
        return len(self.sft_samples)

    @property
    def n_prompt(self) -> int:
        return len(self.prompt_samples)


def stack_samples(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack (window, label) pairs into (n, L, D) and (n, T) arrays."""
    if not samples:
        raise DataError("no samples to stack")
    xs = np.stack([s[0] for s in samples])
    ys = np.stack([s[1] for s in samples])
    return xs, ys


def natural_key(name: str) -> tuple:
    """Sort key ordering embedded integers numerically: acc_2 < acc_10."""
    parts = re.split(r"(\d+)", name)
    return tuple(int(p) if p.isdigit() else p for p in parts)


def _parse_snapshot_file(path: Path, schema: ColumnSchema) -> dict[str, np.ndarray]:
    channels: dict[str, list[float]] = {name: [] for name in schema.channels}
    max_col = max(schema.channels.values())
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno <= schema.skip_rows:
                continue
            line = line.strip()
            if not line:
                continue
            cells = line.split(schema.delimiter)
            if len(cells) <= max_col:
                raise DataError(
                    f"{path}:{lineno}: expected at least {max_col + 1} columns, found {len(cells)}"
                )
            for name, col in schema.channels.items():
                cell = cells[col].strip()
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric cell {cell!r}") from None
                if not np.isfinite(value):
                    raise DataError(f"{path}:{lineno}: non-finite sample {cell!r}")
                channels[name].append(value)
    return {name: np.array(vals, dtype=np.float64) for name, vals in channels.items()}


def load_snapshot_dir(
    path,
    schema: ColumnSchema,
    *,
    bearing_id: str | None = None,
    sampling_rate: float = 25600.0,
    snapshot_interval: float = 10.0,
    condition_id: str = "",
) -> SnapshotSeries:
    """Load every snapshot file in a directory, ordered by natural filename sort."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    files = sorted(root.glob(schema.pattern), key=lambda p: natural_key(p.name))
    if not files:
        raise DataError(f"{root}: no snapshot files matching {schema.pattern!r}")

    snapshots = []
    for idx, file in enumerate(files):
        channels = _parse_snapshot_file(file, schema)
        lengths = {v.size for v in channels.values()}
        if 0 in lengths:
            raise DataError(f"{file}: no samples after skipping {schema.skip_rows} header rows")
        if schema.expected_samples is not None and lengths != {schema.expected_samples}:
            raise DataError(
                f"{file}: expected {schema.expected_samples} samples per channel, found {sorted(lengths)}"
            )
        snapshots.append(Snapshot(channels=channels, index=idx))

    return SnapshotSeries(
        bearing_id=bearing_id if bearing_id is not None else root.name,
        snapshots=snapshots,
        sampling_rate=sampling_rate,
        snapshot_interval=snapshot_interval,
        condition_id=condition_id,
    )


def serialize_series(series: SnapshotSeries) -> bytes:
    """Canonical byte serialization (used for determinism checks and digests)."""
    head = (
        f"{series.bearing_id}|{series.condition_id}|{series.sampling_rate!r}"
        f"|{series.snapshot_interval!r}|{len(series)}\n"
    ).encode()
    chunks = [head]
    for snap in series.snapshots:
        for name in sorted(snap.channels):
            chunks.append(name.encode() + b"\0")
            chunks.append(np.ascontiguousarray(snap.channels[name], dtype="<f8").tobytes())
    return b"".join(chunks)


def normalize_rul(series: SnapshotSeries | int) -> RulSeries:
    """Linear life fraction: value at index i is (n-1-i) / (n-1) over n snapshots."""
    n = series if isinstance(series, int) else len(series)
    if n < 2:
        raise DataError(f"RUL normalization needs at least 2 snapshots, got {n}")
    idx = np.arange(n, dtype=np.float64)
    return RulSeries(values=(n - 1 - idx) / (n - 1), total_life=n)


def bearing_windows(
    fmap: FeatureMap,
    labels: RulSeries,
    lookback: int,
    horizon: int,
    key: BearingKey | str = "",
) -> list[Sample]:
    """Stride-1 (window, label) samples for one bearing.

    Labels are full-life RUL fractions; rows past the feature map's onset
    offset align one-to-one with the feature rows.
    """
    rows = fmap.rows
    aligned = labels.values[fmap.fpt_offset :]
    if aligned.size != rows.shape[0]:
        raise DataError(
            f"bearing {key}: {rows.shape[0]} feature rows but {aligned.size} labels after "
            f"onset alignment (offset {fmap.fpt_offset})"
        )
    m = rows.shape[0]
    if m < lookback + horizon:
        raise DataError(
            f"bearing {key}: only {m} usable steps, need at least lookback+horizon="
            f"{lookback + horizon}"
        )
    samples = []
    for s in range(m - lookback - horizon + 1):
        x = rows[s : s + lookback]
        y = aligned[s + lookback : s + lookback + horizon]
        samples.append((x, y))
    return samples


def build_task(
    spec: TaskSpec,
    features: dict[BearingKey, FeatureMap],
    labels: dict[BearingKey, RulSeries],
) -> TaskData:
    """Slice per-bearing feature maps into stride-1 (window, label) samples.

    Windows never span bearing boundaries; labels are the full-life RUL
    fractions aligned past each feature map's onset offset.
    """
    for key in spec.all_bearings():
        if key not in features:
            raise DataError(f"task {spec.name}: missing features for bearing {key}")
        if key not in labels:
            raise DataError(f"task {spec.name}: missing labels for bearing {key}")

    def collect(keys):
        out = []
        for key in keys:
            out.extend(
                bearing_windows(features[key], labels[key], spec.lookback, spec.horizon, key)
            )
        return out

    return TaskData(
        sft_samples=collect(spec.sft_bearings),
        prompt_samples=collect(spec.prompt_bearings),
        test_samples=collect(spec.test_bearings),
    )


def write_series_cache(cache_dir, series: SnapshotSeries, extra: dict[str, str] | None = None):
    """Persist a loaded series as per-channel columnar caches plus a manifest."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(series.snapshots[0].channels)
    for name in names:
        matrix = np.stack([s.channels[name] for s in series.snapshots])
        store.write_matrix(cache_dir / f"{series.bearing_id}__{name}.bin", matrix)
    manifest = {
        "bearing_id": series.bearing_id,
        "condition_id": series.condition_id,
        "sampling_rate": repr(series.sampling_rate),
        "snapshot_interval": repr(series.snapshot_interval),
        "channels": ",".join(names),
        "snapshots": str(len(series)),
        "series_digest": store.digest_bytes(serialize_series(series)),
    }
    manifest.update(extra or {})
    store.write_manifest(cache_dir / f"{series.bearing_id}.manifest", manifest)


def read_series_cache(cache_dir, bearing_id: str) -> SnapshotSeries:
    cache_dir = Path(cache_dir)
    manifest = store.read_manifest(cache_dir / f"{bearing_id}.manifest")
    names = manifest["channels"].split(",")
    matrices = {n: store.read_matrix(cache_dir / f"{bearing_id}__{n}.bin") for n in names}
    n_snapshots = int(manifest["snapshots"])
    snapshots = [
        Snapshot(channels={n: matrices[n][i] for n in names}, index=i)
        for i in range(n_snapshots)
    ]
    return SnapshotSeries(
        bearing_id=bearing_id,
        snapshots=snapshots,
        sampling_rate=float(manifest["sampling_rate"]),
        snapshot_interval=float(manifest["snapshot_interval"]),
        condition_id=manifest["condition_id"],
    )
