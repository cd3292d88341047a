"""Two-stage fine-tuning with a frozen backbone.

Stage one (supervised fine-tuning, on source-domain samples) updates the
instance-norm affine, token convolution, rotary projections, every layer
norm and the head. Stage two (prompt tuning, on the scarce target-domain
samples) updates only the layer norms and the head, and refuses to run on
a state that has not been through stage one. Attention and feed-forward
tensors never change in either stage.

The loss is mean squared error over predicted steps: per sample the mean
over the horizon, averaged over samples, exactly what the per-epoch trace
records. Optimization is Adam (betas 0.9/0.999, eps 1e-8) over explicit
tensors with fresh moments per stage; batches are seeded permutations with
the short final batch kept.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericalError
from .model import ModelState, digest_parameters, forward_windows, parameter_group

SFT_GROUPS = ("rin", "token_embed", "rotary", "layer_norm", "head")
PT_GROUPS = ("layer_norm", "head")


@dataclass(frozen=True)
class StagePlan:
    """One fine-tuning stage; tunable_groups=None means the stage default,
    an explicit empty tuple trains nothing."""

    stage: str
    epochs: int
    learning_rate: float
    batch_size: int
    tunable_groups: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.stage not in ("sft", "pt"):
            raise ConfigError(f"stage must be 'sft' or 'pt', got {self.stage!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs cannot be negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        groups = self.tunable_groups
        if groups is None:
            groups = SFT_GROUPS if self.stage == "sft" else PT_GROUPS
        bad = set(groups) - set(SFT_GROUPS)
        if bad:
            raise ConfigError(f"tunable groups {sorted(bad)} are not tunable parameter groups")
        object.__setattr__(self, "tunable_groups", tuple(groups))


def default_plan(stage: str, **overrides) -> StagePlan:
    """Stage plans with the package's default hyperparameters."""
    base = {
        "sft": {"epochs": 64, "learning_rate": 1e-5, "batch_size": 50},
        "pt": {"epochs": 16, "learning_rate": 1e-5, "batch_size": 50},
    }
    if stage not in base:
        raise ConfigError(f"unknown stage {stage!r}")
    kwargs = {**base[stage], **overrides}
    return StagePlan(stage=stage, **kwargs)


@dataclass(frozen=True)
class TrainReport:
    losses: tuple[float, ...]
    tuned_digest: str
    frozen_digest: str
    n_samples: int
    wall_time: float


class Adam:
    """Adaptive moment estimation over explicit parameter tensors."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        with torch.no_grad():
            for i, p in enumerate(self.params):
                g = p.grad if p.grad is not None else torch.zeros_like(p)
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
                m_hat = self.m[i] / (1.0 - self.beta1**self.t)
                v_hat = self.v[i] / (1.0 - self.beta2**self.t)
                p -= self.lr * m_hat / (torch.sqrt(v_hat) + self.eps)


def partition_parameters(state: ModelState, stage) -> tuple[list[str], list[str]]:
    """Split parameter names into (frozen, tunable) for a stage or plan."""
    if isinstance(stage, StagePlan):
        groups = stage.tunable_groups
    elif stage == "sft":
        groups = SFT_GROUPS
    elif stage == "pt":
        groups = PT_GROUPS
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    frozen, tunable = [], []
    for name in sorted(state.parameters()):
        if state.freeze_mask.get(name, False) or parameter_group(name) not in groups:
            frozen.append(name)
        else:
            tunable.append(name)
    return frozen, tunable


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple) and len(data) == 2:
        xs, ys = data
    else:
        if len(data) == 0:
            raise DataError("training data is empty")
        xs = np.stack([s[0] for s in data])
        ys = np.stack([s[1] for s in data])
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape[0] == 0:
        raise DataError("training data is empty")
    if xs.shape[0] != ys.shape[0]:
        raise DataError(f"{xs.shape[0]} windows but {ys.shape[0]} label rows")
    return xs, ys


def _run_stage(state: ModelState, data, plan: StagePlan, seed: int) -> tuple[ModelState, TrainReport]:
    xs, ys = _as_arrays(data)
    n = xs.shape[0]
    started = time.perf_counter()

    out = state.clone()
    params = out.parameters()
    _, tunable = partition_parameters(out, plan)
    tunable_set = set(tunable)
    for name, p in params.items():
        p.requires_grad_(name in tunable_set)

    optimizer = Adam([params[name] for name in tunable], lr=plan.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    xt = torch.from_numpy(xs.copy())
    yt = torch.from_numpy(ys.copy())

    losses = []
    for epoch in range(plan.epochs):
        order = torch.randperm(n, generator=gen)
        epoch_sq = 0.0
        for start in range(0, n, plan.batch_size):
            idx = order[start : start + plan.batch_size]
            pred = forward_windows(out, xt[idx], training=True, generator=gen)
            per_sample = ((pred - yt[idx]) ** 2).mean(dim=1)
            loss = per_sample.mean()
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"{plan.stage} loss became non-finite at epoch {epoch}, "
                    f"batch starting {start}"
                )
            epoch_sq += float(per_sample.detach().sum())
            if tunable:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
        losses.append(epoch_sq / n)

    for name, p in params.items():
        p.requires_grad_(not out.freeze_mask.get(name, False))

    frozen_now = [name for name in sorted(params) if name not in tunable_set]
    report = TrainReport(
        losses=tuple(losses),
        tuned_digest=digest_parameters(out, tunable),
        frozen_digest=digest_parameters(out, frozen_now),
        n_samples=n,
        wall_time=time.perf_counter() - started,
    )
    return out, report


def sft(state: ModelState, data, plan: StagePlan, seed: int = 0) -> tuple[ModelState, TrainReport]:
    """Supervised fine-tuning on source-domain samples."""
    if plan.stage != "sft":
        raise ConfigError(f"sft() requires an sft plan, got stage {plan.stage!r}")
    out, report = _run_stage(state, data, plan, seed)
    out.stage = "sft"
    return out, report


def prompt_tune(
    state: ModelState, data, plan: StagePlan, seed: int = 0
) -> tuple[ModelState, TrainReport]:
    """Prompt tuning on target-domain samples; requires a post-SFT state."""
    if plan.stage != "pt":
        raise ConfigError(f"prompt_tune() requires a pt plan, got stage {plan.stage!r}")
    if state.stage != "sft":
        raise ConfigError(
            f"prompt tuning requires a supervised-fine-tuned state, got stage {state.stage!r}"
        )
    out, report = _run_stage(state, data, plan, seed)
    out.stage = "pt"
    return out, report


# ---------------------------------------------------------------------------
# Gradient verification.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    frozen: bool
    max_rel_error: float
    mean_rel_error: float
    analytic_norm: float


@dataclass(frozen=True)
class GradCheckReport:
    entries: tuple[GradCheckEntry, ...]
    max_rel_error: float
    mean_rel_error: float


def gradient_check(
    state: ModelState, data, h: float = 1e-5, rel_floor: float = 1e-6
) -> GradCheckReport:
    """Compare analytic gradients of the training loss to central differences.

    Every non-frozen scalar is perturbed by +-h with dropout disabled;
    relative error is |analytic - numeric| / max(|analytic|, |numeric|,
    rel_floor). Frozen tensors are reported with analytic gradient exactly
    zero and are not differenced.
    """
    xs, ys = _as_arrays(data)
    work = state.clone()
    params = work.parameters()
    tunable = [name for name in sorted(params) if not work.freeze_mask.get(name, False)]
    tunable_set = set(tunable)
    for name, p in params.items():
        p.requires_grad_(name in tunable_set)

    xt = torch.from_numpy(xs.copy())
    yt = torch.from_numpy(ys.copy())

    def loss_tensor() -> torch.Tensor:
        pred = forward_windows(work, xt, training=False)
        return ((pred - yt) ** 2).mean(dim=1).mean()

    loss = loss_tensor()
    if not torch.isfinite(loss):
        raise NumericalError("loss is non-finite at the evaluation point")
    loss.backward()
    analytic = {
        name: (params[name].grad.detach().clone() if params[name].grad is not None
               else torch.zeros_like(params[name]))
        for name in tunable
    }

    entries = []
    all_rels = []
    with torch.no_grad():
        for name in sorted(params):
            p = params[name]
            if name not in tunable_set:
                entries.append(
                    GradCheckEntry(
                        name=name, frozen=True, max_rel_error=0.0, mean_rel_error=0.0,
                        analytic_norm=0.0,
                    )
                )
                continue
            flat = p.data.view(-1)
            grad_flat = analytic[name].view(-1)
            rels = []
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(loss_tensor())
                flat[i] = orig - h
                f_minus = float(loss_tensor())
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericalError(f"non-finite loss while differencing {name}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * h)
                ana = grad_flat[i].item()
                rel = abs(ana - numeric) / max(abs(ana), abs(numeric), rel_floor)
                rels.append(rel)
            all_rels.extend(rels)
            entries.append(
                GradCheckEntry(
                    name=name,
                    frozen=False,
                    max_rel_error=max(rels),
                    mean_rel_error=float(np.mean(rels)),
                    analytic_norm=float(torch.linalg.vector_norm(analytic[name])),
                )
            )

    for name, p in params.items():
        p.requires_grad_(not work.freeze_mask.get(name, False))
    return GradCheckReport(
        entries=tuple(entries),
        max_rel_error=max(all_rels) if all_rels else 0.0,
        mean_rel_error=float(np.mean(all_rels)) if all_rels else 0.0,
    )
