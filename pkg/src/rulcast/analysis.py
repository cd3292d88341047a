"""Interpretability and ablation experiments.

Covers: swapping each block's attention sub-layer for a fixed PCA projector
fitted on calibration activations; cosine-similarity histograms between two
models' per-layer feature maps; sweeping how much of the frozen attention
weights get randomly re-initialized; and hyperparameter grids over block
count, patch geometry and forecast horizon. Results are plain plot-data
rows so any plotting tool can consume them.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ConfigError, DataError
from .ingest import TaskData, stack_samples
from .metrics import phm_score
from .model import ModelConfig, ModelState, forward_windows, predict_batch
from .training import StagePlan, prompt_tune, sft

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityHistogram:
    layer_index: int
    bin_edges: np.ndarray
    counts: np.ndarray
    comparison_label: str


@dataclass(frozen=True)
class SweepResult:
    axis: str
    values: tuple
    metric_label: str
    metrics: tuple[float, ...]
    wall_times: tuple[float, ...]


def derive_seed(master: int, index: int) -> int:
    """Deterministic per-cell seed from (master seed, cell index)."""
    digest = hashlib.sha256(f"{master}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


# ---------------------------------------------------------------------------
# PCA.
# ---------------------------------------------------------------------------


def pca_fit(samples: np.ndarray, n_components: int | None = None):
    """Principal directions of a sample matrix (rows = observations).

    Returns (mean, directions, eigenvalues); directions are columns ordered
    by descending eigenvalue, each sign-fixed so its largest-magnitude
    entry is positive.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D sample matrix, got shape {arr.shape}")
    n, dim = arr.shape
    k = dim if n_components is None else n_components
    if k > dim:
        raise DataError(f"cannot extract {k} components from dimension {dim}")
    if n < k:
        raise DataError(f"rank-deficient calibration: {n} samples for {k} components")
    mean = arr.mean(axis=0)
    centered = arr - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    values = eigvals[order]
    directions = eigvecs[:, order].copy()
    for j in range(directions.shape[1]):
        col = directions[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            directions[:, j] = -col
    return mean, directions, values


def pca_project_2d(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project feature rows to their top-2 principal plane (plot data)."""
    arr = np.asarray(features, dtype=np.float64)
    mean, directions, values = pca_fit(arr, n_components=2)
    coords = (arr - mean) @ directions
    denom = float(pca_fit(arr)[2].sum())
    explained = values / denom if denom > 0 else np.zeros_like(values)
    return coords, explained


def pooled_features(state: ModelState, windows) -> np.ndarray:
    """Final pooled hidden features (pre-head) for a batch of windows."""
    arr = np.asarray(windows, dtype=np.float64)
    capture: dict = {}
    with torch.no_grad():
        forward_windows(state, torch.from_numpy(arr.copy()), capture=capture)
    return capture["pooled"][0].numpy()


def pca_substitute(state: ModelState, calibration) -> ModelState:
    """Replace every block's attention sub-layer with a fixed PCA projector.

    The projector for block b maps x to (x - mean_b) @ V_b, where mean_b and
    the eigenvector columns V_b come from that block's attention inputs on
    the calibration batch under the original model. Layer norms, feed-forward
    paths and residual links are untouched; attention weights are no longer
    consulted.
    """
    arr = np.asarray(calibration, dtype=np.float64)
    capture: dict = {}
    with torch.no_grad():
        forward_windows(state, torch.from_numpy(arr.copy()), capture=capture)

    out = state.clone()
    overrides = {}
    for idx in range(state.config.blocks):
        inputs = capture["block_inputs"][idx][0].reshape(-1, state.config.hidden).numpy()
        mean, directions, _ = pca_fit(inputs)
        overrides[idx] = (
            torch.from_numpy(mean.copy()),
            torch.from_numpy(directions.copy()),
        )
    out.attn_override = overrides
    return out


# ---------------------------------------------------------------------------
# Feature similarity.
# ---------------------------------------------------------------------------


def feature_similarity(
    state_a: ModelState,
    state_b: ModelState,
    data,
    layers,
    bins: int = 20,
    comparison_label: str = "a-vs-b",
) -> list[SimilarityHistogram]:
    """Cosine similarity between per-sample layer outputs of two models.

    Layers are 1-based block numbers. Each sample's (channels, patches,
    hidden) output is flattened before comparison; similarities are binned
    over [-1, 1].
    """
    if state_a.config != state_b.config:
        raise ConfigError("feature similarity requires both models to share a config")
    blocks = state_a.config.blocks
    for layer in layers:
        if not 1 <= layer <= blocks:
            raise ConfigError(f"layer {layer} out of range 1..{blocks}")

    arr = np.asarray(data, dtype=np.float64)
    captures = []
    for st in (state_a, state_b):
        cap: dict = {}
        with torch.no_grad():
            forward_windows(st, torch.from_numpy(arr.copy()), capture=cap)
        captures.append(cap)

    out = []
    edges = np.linspace(-1.0, 1.0, bins + 1)
    for layer in layers:
        fa = captures[0]["block_outputs"][layer - 1][0].reshape(arr.shape[0], -1).numpy()
        fb = captures[1]["block_outputs"][layer - 1][0].reshape(arr.shape[0], -1).numpy()
        na = np.maximum(np.linalg.norm(fa, axis=1), 1e-300)
        nb = np.maximum(np.linalg.norm(fb, axis=1), 1e-300)
        sims = np.clip(np.sum(fa * fb, axis=1) / (na * nb), -1.0, 1.0)
        counts, _ = np.histogram(sims, bins=edges)
        out.append(
            SimilarityHistogram(
                layer_index=layer,
                bin_edges=edges,
                counts=counts,
                comparison_label=comparison_label,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Sweeps.
# ---------------------------------------------------------------------------


def _two_stage(state, task: TaskData, sft_plan, pt_plan, seed):
    tuned, _ = sft(state, task.sft_samples, sft_plan, seed=seed)
    tuned, _ = prompt_tune(tuned, task.prompt_samples, pt_plan, seed=seed)
    return tuned


def _test_mae(state, task: TaskData, horizon: int | None = None) -> float:
    xs, ys = stack_samples(task.test_samples)
    if horizon is not None:
        ys = ys[:, :horizon]
    preds = predict_batch(state, xs)
    return float(np.mean(np.abs(preds - ys)))


def _test_score(state, task: TaskData, horizon: int | None = None) -> float:
    xs, ys = stack_samples(task.test_samples)
    if horizon is not None:
        ys = ys[:, :horizon]
    preds = predict_batch(state, xs)
    return phm_score(preds.ravel(), ys.ravel())


def freeze_ratio_sweep(
    state: ModelState,
    task: TaskData,
    ratios,
    sft_plan: StagePlan,
    pt_plan: StagePlan,
    seed: int = 0,
) -> SweepResult:
    """Re-initialize a growing fraction of the frozen attention scalars.

    For each ratio, that fraction of attention weight/bias entries (chosen
    by a seeded permutation) is redrawn from Gaussian(0, 0.02); the
    two-stage pipeline then runs and the test MAE is recorded.
    """
    for rho in ratios:
        if not 0.0 <= rho <= 1.0:
            raise ConfigError(f"freeze ratio {rho} outside [0, 1]")

    attn_names = [n for n in sorted(state.parameters()) if "attn_" in n]
    sizes = [int(state.parameters()[n].numel()) for n in attn_names]
    total = sum(sizes)

    metrics, times = [], []
    for idx, rho in enumerate(ratios):
        started = time.perf_counter()
        cell_seed = derive_seed(seed, idx)
        work = state.clone()
        k = round(rho * total)
        if k > 0:
            gen = torch.Generator().manual_seed(cell_seed)
            chosen = torch.randperm(total, generator=gen)[:k]
            fresh = torch.normal(0.0, 0.02, size=(k,), generator=gen, dtype=torch.float64)
            flat = torch.cat([work.parameters()[n].detach().reshape(-1) for n in attn_names])
            flat[chosen] = fresh
            with torch.no_grad():
                offset = 0
                for name, size in zip(attn_names, sizes):
                    p = work.parameters()[name]
                    p.copy_(flat[offset : offset + size].reshape(p.shape))
                    offset += size
        tuned = _two_stage(work, task, sft_plan, pt_plan, cell_seed)
        metrics.append(_test_mae(tuned, task))
        times.append(time.perf_counter() - started)

    return SweepResult(
        axis="freeze_ratio",
        values=tuple(ratios),
        metric_label="mae",
        metrics=tuple(metrics),
        wall_times=tuple(times),
    )


ABLATION_AXES = ("block_count", "patch", "horizon")


def ablate(
    state_factory,
    base_config: ModelConfig,
    task: TaskData,
    axis: str,
    values,
    sft_plan: StagePlan,
    pt_plan: StagePlan,
    seed: int = 0,
) -> SweepResult:
    """Train and score one model per grid value along a single axis.

    ``state_factory(config, seed)`` builds a fresh model (normally
    ``model.init_state``). Axis is one of block_count, patch (values are
    (patch_size, patch_stride) pairs) or horizon (values must not exceed the
    task's built label width). Infeasible cells are skipped with a logged
    reason.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    label_width = task.test_samples[0][1].shape[0] if task.test_samples else 0

    kept_values, metrics, times = [], [], []
    for idx, value in enumerate(values):
        if axis == "block_count":
            cfg = replace(base_config, blocks=int(value))
            horizon = None
        elif axis == "patch":
            p, s = value
            if p > base_config.lookback:
                logger.warning(
                    "skipping patch cell (P=%d, S=%d): patch exceeds lookback %d",
                    p, s, base_config.lookback,
                )
                continue
            cfg = replace(base_config, patch=int(p), patch_stride=int(s))
            horizon = None
        else:
            horizon = int(value)
            if horizon > label_width:
                logger.warning(
                    "skipping horizon cell %d: task labels only cover %d steps",
                    horizon, label_width,
                )
                continue
            cfg = replace(base_config, horizon=horizon)

        started = time.perf_counter()
        cell_seed = derive_seed(seed, idx)
        state = state_factory(cfg, cell_seed)
        sliced = task if horizon is None else _slice_horizon(task, horizon)
        tuned = _two_stage(state, sliced, sft_plan, pt_plan, cell_seed)
        metrics.append(_test_score(tuned, sliced))
        times.append(time.perf_counter() - started)
        kept_values.append(value)

    return SweepResult(
        axis=axis,
        values=tuple(kept_values),
        metric_label="score",
        metrics=tuple(metrics),
        wall_times=tuple(times),
    )


def _slice_horizon(task: TaskData, horizon: int) -> TaskData:
    def cut(samples):
        return [(x, y[:horizon]) for x, y in samples]

    return TaskData(
        sft_samples=cut(task.sft_samples),
        prompt_samples=cut(task.prompt_samples),
        test_samples=cut(task.test_samples),
    )


# ---------------------------------------------------------------------------
# Plot-data writers.
# ---------------------------------------------------------------------------


def write_sweep(path, sweep: SweepResult, header: dict[str, str] | None = None) -> None:
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines.append(f"{sweep.axis}\t{sweep.metric_label}\twall_time_s")
    for value, metric, wall in zip(sweep.values, sweep.metrics, sweep.wall_times):
        cell = ",".join(str(v) for v in value) if isinstance(value, (tuple, list)) else str(value)
        lines.append(f"{cell}\t{metric:.10g}\t{wall:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_histogram(path, hist: SimilarityHistogram, header: dict[str, str] | None = None) -> None:
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines.append(f"# layer={hist.layer_index} comparison={hist.comparison_label}")
    lines.append("bin_low\tbin_high\tcount")
    for lo, hi, count in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
        lines.append(f"{lo:.6f}\t{hi:.6f}\t{int(count)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
