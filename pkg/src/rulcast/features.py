"""Vibration signal featurization.

Pipeline: per-snapshot RMS drives degradation-onset detection; each snapshot
is turned into a short-time Fourier energy spectrogram, compressed to a
fixed-width feature vector; vectors from onset onward stack into the
feature map consumed by the model; each feature channel is finally cut into
overlapping patches.

Framing convention for the spectrogram: frames of ``frame_width`` samples
every ``frame_stride`` samples, centred at multiples of the stride, with
edge-replication padding at both ends; frame count is
``floor(n / stride) + 1``. The transform keeps the one-sided spectrum with
the DC bin dropped, giving ``frame_width // 2`` frequency bins. A
2560-sample snapshot at 25.6 kHz with 20 ms / 10 ms framing therefore
yields an 11 x 256 energy matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class RmsSeries:
    """Per-snapshot RMS values, one per snapshot, in acquisition order."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if np.any(self.values < 0):
            raise DataError("RMS values cannot be negative")


@dataclass(frozen=True)
class FptResult:
    """Degradation onset index (None if never triggered) plus the threshold trace."""

    fpt_index: int | None
    threshold_trace: np.ndarray


@dataclass(frozen=True)
class Spectrogram:
    """Energy matrix, rows = time frames, columns = frequency bins."""

    energies: np.ndarray
    frame_width: float
    frame_stride: float


@dataclass(frozen=True)
class FeatureMap:
    """Stacked per-snapshot feature vectors from degradation onset onward.

    ``fpt_offset`` is the index of the first row within the original life.
    """

    rows: np.ndarray
    fpt_offset: int


@dataclass(frozen=True)
class PatchSet:
    """Channel-independent patch tensor of shape (channels, patches, patch_size)."""

    patches: np.ndarray
    patch_size: int
    stride: int


@dataclass(frozen=True)
class StftConfig:
    frame_width_s: float = 0.020
    frame_stride_s: float = 0.010
    window: str = "hann"


@dataclass(frozen=True)
class FeatureConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    d_out: int = 64
    fpt_enabled: bool = True
    fpt_channel: str = "horizontal"
    feature_channels: tuple[str, ...] = ("horizontal",)


def rms(window) -> float:
    """Root mean square of one vibration window."""
    arr = np.asarray(window, dtype=np.float64)
    if arr.size == 0:
        raise DataError("cannot take RMS of an empty window")
    return float(np.sqrt(np.mean(arr**2)))


def rms_series(windows) -> RmsSeries:
    return RmsSeries(np.array([rms(w) for w in windows], dtype=np.float64))


def detect_fpt(series: RmsSeries) -> FptResult:
    """Find the first index whose RMS persistently exceeds the running 3-sigma bound.

    At candidate index t the bound is mean + 3*std of all RMS values before
    t (population std; zero while fewer than two history points exist, and
    triggering is skipped until three history points exist). The trigger
    requires values at t, t+1 and t+2 to all strictly exceed the bound, so
    a lone spike never fires.
    """
    values = series.values
    n = values.size
    if n < 4:
        raise DataError(f"FPT detection needs at least 4 RMS values, got {n}")

    trace = np.full(n, np.nan)
    fpt: int | None = None
    for t in range(1, n):
        hist = values[:t]
        mu = float(np.mean(hist))
        sigma = float(np.sqrt(np.mean((hist - mu) ** 2))) if t >= 2 else 0.0
        cv = mu + 3.0 * sigma
        trace[t] = cv
        if fpt is None and t >= 3 and t + 2 < n:
            if values[t] > cv and values[t + 1] > cv and values[t + 2] > cv:
                fpt = t
    return FptResult(fpt_index=fpt, threshold_trace=trace)


def _window_taper(name: str, width: int) -> np.ndarray:
    if name == "hann":
        if width == 1:
            return np.ones(1)
        k = np.arange(width)
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (width - 1)))
    if name == "rect":
        return np.ones(width)
    raise ConfigError(f"unknown window function {name!r} (expected 'hann' or 'rect')")


def stft_energy(window, sampling_rate: float, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Short-time Fourier energy spectrogram of one snapshot."""
    x = np.asarray(window, dtype=np.float64).ravel()
    width = round(cfg.frame_width_s * sampling_rate)
    stride = round(cfg.frame_stride_s * sampling_rate)
    if stride < 1:
        raise ConfigError(f"frame stride must be >= 1 sample, got {stride}")
    if width < 2:
        raise ConfigError(f"frame width must be >= 2 samples, got {width}")
    if width > x.size:
        raise DataError(f"frame width {width} exceeds signal length {x.size}")

    n_frames = x.size // stride + 1
    pad_left = width // 2
    needed = (n_frames - 1) * stride + width
    pad_right = max(0, needed - x.size - pad_left)
    padded = np.concatenate([np.full(pad_left, x[0]), x, np.full(pad_right, x[-1])])

    taper = _window_taper(cfg.window, width)
    offsets = np.arange(n_frames) * stride
    frames = np.stack([padded[o : o + width] for o in offsets])
    spectrum = np.fft.rfft(frames * taper, n=width, axis=1)
    energies = np.abs(spectrum[:, 1 : width // 2 + 1]) ** 2
    return Spectrogram(
        energies=energies,
        frame_width=cfg.frame_width_s,
        frame_stride=cfg.frame_stride_s,
    )


def compress_features(spec: Spectrogram, d_out: int) -> np.ndarray:
    """Reduce a spectrogram to ``d_out`` band-averaged energies.

    Frequency bins split into ``d_out`` contiguous bands (as equal as
    possible); each output is the mean energy over that band across all
    frames.
    """
    energies = spec.energies
    n_bins = energies.shape[1]
    if d_out < 1:
        raise ConfigError(f"d_out must be positive, got {d_out}")
    if d_out > n_bins:
        raise DataError(f"d_out={d_out} larger than the {n_bins} available bins")
    bands = np.array_split(np.arange(n_bins), d_out)
    return np.array([float(np.mean(energies[:, band])) for band in bands])


def assemble_feature_map(vectors, fpt: FptResult | None = None) -> FeatureMap:
    """Stack per-snapshot feature vectors, truncated at the detected onset."""
    arrays = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    if not arrays:
        raise DataError("no feature vectors to assemble")
    dim = arrays[0].size
    for i, arr in enumerate(arrays):
        if arr.size != dim:
            raise DataError(f"feature vector {i} has dimension {arr.size}, expected {dim}")
    start = 0
    if fpt is not None and fpt.fpt_index is not None:
        if fpt.fpt_index >= len(arrays):
            raise DataError(
                f"FPT index {fpt.fpt_index} out of range for {len(arrays)} snapshots"
            )
        start = fpt.fpt_index
    rows = np.stack(arrays[start:])
    if not np.all(np.isfinite(rows)):
        raise DataError("feature map contains non-finite values")
    return FeatureMap(rows=rows, fpt_offset=start)


def patch(channel, patch_size: int, stride: int) -> np.ndarray:
    """Cut one channel sequence into patches.

    The last value is repeated ``stride`` times at the end, then windows of
    ``patch_size`` are taken at offsets 0, stride, 2*stride, ...; the count
    is floor((L - P) / S) + 2.
    """
    seq = np.asarray(channel, dtype=np.float64).ravel()
    length = seq.size
    if stride < 1:
        raise ConfigError(f"patch stride must be >= 1, got {stride}")
    if patch_size < 1 or patch_size > length:
        raise ConfigError(
            f"patch size must be in [1, {length}] for a length-{length} sequence, got {patch_size}"
        )
    padded = np.concatenate([seq, np.full(stride, seq[-1])])
    n_patches = (length - patch_size) // stride + 2
    return np.stack([padded[k * stride : k * stride + patch_size] for k in range(n_patches)])


def patch_channels(feature_map, patch_size: int, stride: int) -> PatchSet:
    """Patch every feature channel independently; output (D, N, P)."""
    rows = feature_map.rows if isinstance(feature_map, FeatureMap) else np.asarray(feature_map)
    patches = np.stack([patch(rows[:, j], patch_size, stride) for j in range(rows.shape[1])])
    return PatchSet(patches=patches, patch_size=patch_size, stride=stride)


def featurize_snapshots(
    channel_windows: dict[str, list[np.ndarray]],
    sampling_rate: float,
    cfg: FeatureConfig,
) -> tuple[FeatureMap, FptResult | None, RmsSeries]:
    """Full featurization of one bearing's snapshots.

    ``channel_windows`` maps channel name to the per-snapshot raw windows.
    RMS on ``cfg.fpt_channel`` drives onset detection (when enabled); the
    feature vector per snapshot concatenates compressed spectrograms of
    ``cfg.feature_channels``.
    """
    if cfg.fpt_channel not in channel_windows:
        raise ConfigError(f"FPT channel {cfg.fpt_channel!r} not present in data")
    for name in cfg.feature_channels:
        if name not in channel_windows:
            raise ConfigError(f"feature channel {name!r} not present in data")

    rms_vals = rms_series(channel_windows[cfg.fpt_channel])
    fpt = detect_fpt(rms_vals) if cfg.fpt_enabled else None

    n_snapshots = len(channel_windows[cfg.fpt_channel])
    vectors = []
    for i in range(n_snapshots):
        parts = [
            compress_features(
                stft_energy(channel_windows[name][i], sampling_rate, cfg.stft), cfg.d_out
            )
            for name in cfg.feature_channels
        ]
        vectors.append(np.concatenate(parts))
    return assemble_feature_map(vectors, fpt), fpt, rms_vals
