"""Frozen-backbone transformer for multi-step RUL regression.

Architecture, per input window of shape (lookback L, channels D):

1. reversible instance normalization per channel (learnable affine, exact
   inverse available);
2. channel-independent patching of each normalized channel into N patches
   of width P;
3. triple embedding summed per patch: width-3 token convolution, fixed
   sinusoidal position table, and a rotary relative-position attention pass
   over the raw patches;
4. B transformer blocks (post-norm: attention residual -> layer norm ->
   feed-forward with tanh-GELU -> residual -> layer norm) whose attention
   and feed-forward weights are frozen during fine-tuning;
5. final layer norm, channel-mean of the flattened hidden state, and one
   linear head to the T-step RUL forecast.

Attention scores are scaled by 1/sqrt(hidden) in every block and in the
rotary encoder, matching the block-diagonal head-equivalence this module
guarantees. All parameters are float64; channels share every weight.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericalError

DTYPE = torch.float64

PARAM_GROUPS = ("rin", "token_embed", "rotary", "layer_norm", "head")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    lookback: int
    horizon: int
    hidden: int = 768
    blocks: int = 6
    heads: int = 12
    patch: int = 6
    patch_stride: int = 4
    dropout: float = 0.2
    epsilon: float = 1e-5
    denormalize_output: bool = False

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.hidden % 2 != 0:
            raise ConfigError(f"hidden must be even for rotary pairs, got {self.hidden}")
        if self.blocks < 1:
            raise ConfigError(f"need at least one block, got {self.blocks}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.lookback < 2:
            raise ConfigError(f"lookback must be >= 2, got {self.lookback}")
        if not 1 <= self.patch <= self.lookback:
            raise ConfigError(
                f"patch size must be in [1, lookback={self.lookback}], got {self.patch}"
            )
        if self.patch_stride < 1:
            raise ConfigError(f"patch stride must be >= 1, got {self.patch_stride}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")

    @property
    def n_patches(self) -> int:
        return (self.lookback - self.patch) // self.patch_stride + 2


# ---------------------------------------------------------------------------
# Reversible instance normalization, standalone functional form.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RinParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        if np.any(self.gamma == 0):
            raise ConfigError("RIN gamma must be nonzero everywhere")


@dataclass(frozen=True)
class RinStats:
    mean: np.ndarray
    variance: np.ndarray


def rin_normalize(x, params: RinParams, epsilon: float = 1e-5) -> tuple[np.ndarray, RinStats]:
    """Standardize each channel over the window, then apply the learnable affine."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise DataError(f"expected a (L>=2, D) window, got shape {arr.shape}")
    mean = arr.mean(axis=0)
    var = arr.var(axis=0)
    xhat = params.gamma * (arr - mean) / np.sqrt(var + epsilon) + params.beta
    return xhat, RinStats(mean=mean, variance=var)


def rin_denormalize(y, params: RinParams, stats: RinStats, epsilon: float = 1e-5) -> np.ndarray:
    """Exact inverse of rin_normalize given the stats captured there."""
    arr = np.asarray(y, dtype=np.float64)
    return np.sqrt(stats.variance + epsilon) * (arr - params.beta) / params.gamma + stats.mean


# ---------------------------------------------------------------------------
# Position encodings.
# ---------------------------------------------------------------------------


def positional_encoding(n_positions: int, dim: int) -> np.ndarray:
    """Sinusoidal table: sin(n / 10000^(2j/d)) in even columns, cos in odd."""
    if dim % 2 != 0:
        raise ConfigError(f"positional encoding needs an even dimension, got {dim}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    j = np.arange(dim // 2, dtype=np.float64)
    angles = pos / (10000.0 ** (2.0 * j / dim))
    table = np.empty((n_positions, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def rotation_matrix(position: float, dim: int) -> np.ndarray:
    """Explicit block-diagonal rotation applied to queries/keys at a position."""
    if dim % 2 != 0:
        raise ConfigError(f"rotation needs an even dimension, got {dim}")
    out = np.zeros((dim, dim))
    for i in range(dim // 2):
        theta = 10000.0 ** (-2.0 * i / dim)
        c, s = math.cos(position * theta), math.sin(position * theta)
        out[2 * i, 2 * i] = c
        out[2 * i, 2 * i + 1] = -s
        out[2 * i + 1, 2 * i] = s
        out[2 * i + 1, 2 * i + 1] = c
    return out


def _rotary_cos_sin(n_positions: int, dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    pos = torch.arange(n_positions, dtype=DTYPE)[:, None]
    i = torch.arange(dim // 2, dtype=DTYPE)
    angles = pos * (10000.0 ** (-2.0 * i / dim))
    return torch.cos(angles), torch.sin(angles)


def _rotate_pairs(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    even, odd = x[..., 0::2], x[..., 1::2]
    rot_even = even * cos - odd * sin
    rot_odd = even * sin + odd * cos
    return torch.stack((rot_even, rot_odd), dim=-1).reshape(x.shape)


# ---------------------------------------------------------------------------
# Network modules.
# ---------------------------------------------------------------------------


def _gauss(gen: torch.Generator, *shape: int) -> torch.nn.Parameter:
    return torch.nn.Parameter(torch.normal(0.0, 0.02, size=shape, generator=gen, dtype=DTYPE))


def _zeros(*shape: int) -> torch.nn.Parameter:
    return torch.nn.Parameter(torch.zeros(*shape, dtype=DTYPE))


def _ones(*shape: int) -> torch.nn.Parameter:
    return torch.nn.Parameter(torch.ones(*shape, dtype=DTYPE))


class _Rin(torch.nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = _ones(dim)
        self.beta = _zeros(dim)


class _Embedding(torch.nn.Module):
    def __init__(self, patch: int, hidden: int, gen: torch.Generator):
        super().__init__()
        self.token_w = _gauss(gen, hidden, patch, 3)
        self.token_b = _zeros(hidden)
        self.rot_q = _gauss(gen, patch, hidden)
        self.rot_k = _gauss(gen, patch, hidden)
        self.rot_v = _gauss(gen, patch, hidden)


class _Block(torch.nn.Module):
    def __init__(self, hidden: int, gen: torch.Generator):
        super().__init__()
        d = hidden
        self.attn_q_w = _gauss(gen, d, d)
        self.attn_q_b = _zeros(d)
        self.attn_k_w = _gauss(gen, d, d)
        self.attn_k_b = _zeros(d)
        self.attn_v_w = _gauss(gen, d, d)
        self.attn_v_b = _zeros(d)
        self.attn_out_w = _gauss(gen, d, d)
        self.attn_out_b = _zeros(d)
        self.ffn_in_w = _gauss(gen, d, 4 * d)
        self.ffn_in_b = _zeros(4 * d)
        self.ffn_out_w = _gauss(gen, 4 * d, d)
        self.ffn_out_b = _zeros(d)
        self.ln1_g = _ones(d)
        self.ln1_b = _zeros(d)
        self.ln2_g = _ones(d)
        self.ln2_b = _zeros(d)


class RulNetwork(torch.nn.Module):
    def __init__(self, config: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.rin = _Rin(config.feature_dim)
        self.embed = _Embedding(config.patch, config.hidden, gen)
        self.blocks = torch.nn.ModuleList(
            _Block(config.hidden, gen) for _ in range(config.blocks)
        )
        self.final_ln_g = _ones(config.hidden)
        self.final_ln_b = _zeros(config.hidden)
        self.head_w = _gauss(gen, config.n_patches * config.hidden, config.horizon)
        self.head_b = _zeros(config.horizon)


def parameter_group(name: str) -> str:
    """Classify a parameter name into its tuning group ('backbone' = frozen)."""
    if "attn_" in name or "ffn_" in name:
        return "backbone"
    if name.startswith("rin."):
        return "rin"
    if name.startswith("embed.token_"):
        return "token_embed"
    if name.startswith("embed.rot_"):
        return "rotary"
    if "ln1_" in name or "ln2_" in name or name.startswith("final_ln_"):
        return "layer_norm"
    if name.startswith("head_"):
        return "head"
    raise ConfigError(f"parameter {name!r} belongs to no known group")


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor shapes implied by a config, without allocating the network."""
    d, p = config.hidden, config.patch
    shapes: dict[str, tuple[int, ...]] = {
        "rin.gamma": (config.feature_dim,),
        "rin.beta": (config.feature_dim,),
        "embed.token_w": (d, p, 3),
        "embed.token_b": (d,),
        "embed.rot_q": (p, d),
        "embed.rot_k": (p, d),
        "embed.rot_v": (p, d),
        "final_ln_g": (d,),
        "final_ln_b": (d,),
        "head_w": (config.n_patches * d, config.horizon),
        "head_b": (config.horizon,),
    }
    for b in range(config.blocks):
        prefix = f"blocks.{b}."
        shapes.update(
            {
                prefix + "attn_q_w": (d, d),
                prefix + "attn_q_b": (d,),
                prefix + "attn_k_w": (d, d),
                prefix + "attn_k_b": (d,),
                prefix + "attn_v_w": (d, d),
                prefix + "attn_v_b": (d,),
                prefix + "attn_out_w": (d, d),
                prefix + "attn_out_b": (d,),
                prefix + "ffn_in_w": (d, 4 * d),
                prefix + "ffn_in_b": (4 * d,),
                prefix + "ffn_out_w": (4 * d, d),
                prefix + "ffn_out_b": (d,),
                prefix + "ln1_g": (d,),
                prefix + "ln1_b": (d,),
                prefix + "ln2_g": (d,),
                prefix + "ln2_b": (d,),
            }
        )
    return shapes


@dataclass
class ModelState:
    """Config + network + per-tensor freeze mask + fine-tuning stage tag."""

    config: ModelConfig
    net: RulNetwork
    freeze_mask: dict[str, bool]
    stage: str = "init"
    attn_override: dict[int, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)

    def parameters(self) -> dict[str, torch.nn.Parameter]:
        return dict(self.net.named_parameters())

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)


def init_state(config: ModelConfig, seed: int = 0) -> ModelState:
    gen = torch.Generator().manual_seed(seed)
    net = RulNetwork(config, gen)
    mask = {name: parameter_group(name) == "backbone" for name, _ in net.named_parameters()}
    return ModelState(config=config, net=net, freeze_mask=mask)


def digest_parameters(state: ModelState, names=None) -> str:
    """SHA-256 over the named tensors' raw bytes, in sorted name order."""
    params = state.parameters()
    selected = sorted(params) if names is None else sorted(names)
    h = hashlib.sha256()
    for name in selected:
        h.update(name.encode())
        h.update(params[name].detach().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Forward pass.
# ---------------------------------------------------------------------------


def _layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor, eps: float) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * g + b


def _gelu_tanh(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _dropout(x: torch.Tensor, p: float, training: bool, gen: torch.Generator | None) -> torch.Tensor:
    if not training or p <= 0.0:
        return x
    keep = 1.0 - p
    mask = (torch.rand(x.shape, generator=gen, dtype=x.dtype) < keep).to(x.dtype)
    return x * mask / keep


def _patchify(seq: torch.Tensor, patch: int, stride: int) -> torch.Tensor:
    """(..., L) -> (..., N, P) with last-value padding of `stride` repeats."""
    pad = seq[..., -1:].expand(*seq.shape[:-1], stride)
    return torch.cat([seq, pad], dim=-1).unfold(-1, patch, stride)


def _rotary_encode(
    patches: torch.Tensor, embed: _Embedding, hidden: int, capture: dict | None = None
) -> torch.Tensor:
    """Relative-position attention over raw patches; patches shape (..., N, P)."""
    q = patches @ embed.rot_q
    k = patches @ embed.rot_k
    v = patches @ embed.rot_v
    cos, sin = _rotary_cos_sin(patches.shape[-2], hidden)
    scores = _rotate_pairs(q, cos, sin) @ _rotate_pairs(k, cos, sin).transpose(-1, -2)
    probs = torch.softmax(scores / math.sqrt(hidden), dim=-1)
    if capture is not None:
        capture.setdefault("attn_probs", []).append(probs.detach().clone())
    return probs @ v


def _attention(
    x: torch.Tensor, blk: _Block, heads: int, hidden: int, capture: dict | None = None
) -> torch.Tensor:
    dh = hidden // heads
    q = (x @ blk.attn_q_w + blk.attn_q_b).reshape(*x.shape[:-1], heads, dh).transpose(-3, -2)
    k = (x @ blk.attn_k_w + blk.attn_k_b).reshape(*x.shape[:-1], heads, dh).transpose(-3, -2)
    v = (x @ blk.attn_v_w + blk.attn_v_b).reshape(*x.shape[:-1], heads, dh).transpose(-3, -2)
    probs = torch.softmax((q @ k.transpose(-1, -2)) / math.sqrt(hidden), dim=-1)
    if capture is not None:
        capture.setdefault("attn_probs", []).append(probs.detach().clone())
    ctx = (probs @ v).transpose(-3, -2).reshape(*x.shape[:-1], hidden)
    return ctx @ blk.attn_out_w + blk.attn_out_b


def _block_forward(
    x: torch.Tensor,
    blk: _Block,
    cfg: ModelConfig,
    override: tuple[torch.Tensor, torch.Tensor] | None,
    training: bool,
    gen: torch.Generator | None,
    capture: dict | None = None,
) -> torch.Tensor:
    if override is not None:
        mean, directions = override
        attn = (x - mean) @ directions
    else:
        attn = _attention(x, blk, cfg.heads, cfg.hidden, capture)
    h1 = _layer_norm(x + attn, blk.ln1_g, blk.ln1_b, cfg.epsilon)
    f = _gelu_tanh(h1 @ blk.ffn_in_w + blk.ffn_in_b) @ blk.ffn_out_w + blk.ffn_out_b
    f = _dropout(f, cfg.dropout, training, gen)
    return _layer_norm(h1 + f, blk.ln2_g, blk.ln2_b, cfg.epsilon)


def forward_windows(
    state: ModelState,
    windows: torch.Tensor,
    *,
    training: bool = False,
    generator: torch.Generator | None = None,
    capture: dict | None = None,
) -> torch.Tensor:
    """Batched forward pass: (batch, L, D) float64 -> (batch, T)."""
    cfg = state.config
    net = state.net
    if windows.ndim != 3 or windows.shape[1:] != (cfg.lookback, cfg.feature_dim):
        raise DataError(
            f"window batch shape {tuple(windows.shape)} does not match "
            f"(*, {cfg.lookback}, {cfg.feature_dim})"
        )
    batch = windows.shape[0]

    mean = windows.mean(dim=1, keepdim=True)
    var = windows.var(dim=1, unbiased=False, keepdim=True)
    xhat = net.rin.gamma * (windows - mean) / torch.sqrt(var + cfg.epsilon) + net.rin.beta

    # (batch, D, N, P), each channel patched independently
    patches = _patchify(xhat.permute(0, 2, 1), cfg.patch, cfg.patch_stride)
    flat = patches.reshape(batch * cfg.feature_dim, cfg.n_patches, cfg.patch)

    conv_in = flat.transpose(1, 2)
    conv_in = torch.cat([conv_in[..., :1], conv_in, conv_in[..., -1:]], dim=-1)
    token = torch.nn.functional.conv1d(conv_in, net.embed.token_w, net.embed.token_b)
    token = token.transpose(1, 2)

    pos = torch.from_numpy(positional_encoding(cfg.n_patches, cfg.hidden))
    rel = _rotary_encode(flat, net.embed, cfg.hidden, capture)

    h = _dropout(token + pos + rel, cfg.dropout, training, generator)
    for idx, blk in enumerate(net.blocks):
        if capture is not None:
            capture.setdefault("block_inputs", {}).setdefault(idx, []).append(
                h.detach().reshape(batch, cfg.feature_dim, cfg.n_patches, cfg.hidden).clone()
            )
        h = _block_forward(h, blk, cfg, state.attn_override.get(idx), training, generator, capture)
        if capture is not None:
            capture.setdefault("block_outputs", {}).setdefault(idx, []).append(
                h.detach().reshape(batch, cfg.feature_dim, cfg.n_patches, cfg.hidden).clone()
            )
    h = _layer_norm(h, net.final_ln_g, net.final_ln_b, cfg.epsilon)

    pooled = h.reshape(batch, cfg.feature_dim, cfg.n_patches * cfg.hidden).mean(dim=1)
    if capture is not None:
        capture.setdefault("pooled", []).append(pooled.detach().clone())
    out = pooled @ net.head_w + net.head_b

    if cfg.denormalize_output:
        mu_bar = mean.squeeze(1).mean(dim=1, keepdim=True)
        var_bar = var.squeeze(1).mean(dim=1, keepdim=True)
        gamma_bar = net.rin.gamma.mean()
        beta_bar = net.rin.beta.mean()
        out = torch.sqrt(var_bar + cfg.epsilon) * (out - beta_bar) / gamma_bar + mu_bar
    return out


def _as_batch_tensor(windows: np.ndarray) -> torch.Tensor:
    arr = np.asarray(windows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("input window contains non-finite values")
    return torch.from_numpy(arr.copy())


def predict(state: ModelState, window, *, seed: int = 0, training: bool = False) -> np.ndarray:
    """T-step RUL forecast for one (L, D) window.

    Deterministic given (state, window, seed, training); dropout is active
    only in training mode, driven by the seed.
    """
    arr = np.asarray(window, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D window, got shape {arr.shape}")
    return predict_batch(state, arr[None], seed=seed, training=training)[0]


def predict_batch(
    state: ModelState, windows, *, seed: int = 0, training: bool = False
) -> np.ndarray:
    batch = _as_batch_tensor(windows)
    gen = torch.Generator().manual_seed(seed) if training else None
    with torch.no_grad():
        out = forward_windows(state, batch, training=training, generator=gen)
    result = out.numpy()
    if not np.all(np.isfinite(result)):
        raise NumericalError("prediction produced non-finite values")
    return result


# ---------------------------------------------------------------------------
# Single-component wrappers (numpy in / numpy out), mirroring the forward
# pass piece by piece; used by diagnostics and tests.
# ---------------------------------------------------------------------------


def token_embed(state: ModelState, patches) -> np.ndarray:
    """Width-3 convolution over the patch axis: (N, P) -> (N, hidden)."""
    arr = torch.from_numpy(np.asarray(patches, dtype=np.float64).copy())
    if arr.ndim != 2 or arr.shape[1] != state.config.patch:
        raise DataError(f"expected (N, {state.config.patch}) patches, got {tuple(arr.shape)}")
    with torch.no_grad():
        conv_in = arr.T[None]
        conv_in = torch.cat([conv_in[..., :1], conv_in, conv_in[..., -1:]], dim=-1)
        out = torch.nn.functional.conv1d(
            conv_in, state.net.embed.token_w, state.net.embed.token_b
        )
    return out[0].T.numpy()


def rotary_attention(state: ModelState, patches) -> np.ndarray:
    """Relative-position attention embedding: (N, P) -> (N, hidden)."""
    arr = torch.from_numpy(np.asarray(patches, dtype=np.float64).copy())
    if arr.ndim != 2 or arr.shape[1] != state.config.patch:
        raise DataError(f"expected (N, {state.config.patch}) patches, got {tuple(arr.shape)}")
    with torch.no_grad():
        out = _rotary_encode(arr[None], state.net.embed, state.config.hidden)
    return out[0].numpy()


def block_forward(state: ModelState, block_index: int, hidden) -> np.ndarray:
    """One transformer block applied to an (N, hidden) state, dropout off."""
    arr = torch.from_numpy(np.asarray(hidden, dtype=np.float64).copy())
    blk = state.net.blocks[block_index]
    with torch.no_grad():
        out = _block_forward(
            arr[None], blk, state.config, state.attn_override.get(block_index), False, None
        )
    return out[0].numpy()


def config_to_json(config: ModelConfig) -> str:
    return json.dumps(
        {
            "feature_dim": config.feature_dim,
            "lookback": config.lookback,
            "horizon": config.horizon,
            "hidden": config.hidden,
            "blocks": config.blocks,
            "heads": config.heads,
            "patch": config.patch,
            "patch_stride": config.patch_stride,
            "dropout": config.dropout,
            "epsilon": config.epsilon,
            "denormalize_output": config.denormalize_output,
        },
        sort_keys=True,
    )


def config_from_json(payload: str) -> ModelConfig:
    return ModelConfig(**json.loads(payload))
