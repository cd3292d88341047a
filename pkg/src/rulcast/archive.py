"""Named-tensor archive files, checkpoints, and pretrained backbone import.

Archive layout: a UTF-8 text header followed by raw tensor payloads.

    TENSORS1
    meta <key> <json string>          (zero or more)
    tensor <name> <dtype> <dim0> [<dim1> ...]
    ...
    END
    <payloads, little-endian, in index order>

Supported element types are f8 and f4; f4 payloads are widened to float64
on import. Checkpoints are the same format carrying the model config, the
freeze mask and the fine-tuning stage tag as metadata.

The backbone import maps GPT-2-style tensor names (combined QKV attention
weight/bias, attention output projection, feed-forward in/out, two block
layer norms, final layer norm) onto this package's per-projection slots,
splitting the combined QKV tensors.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .model import ModelConfig, ModelState, config_from_json, config_to_json

_MAGIC = "TENSORS1"
_DTYPES = {"f8": "<f8", "f4": "<f4"}


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None):
    names = list(tensors)
    arrays = [np.ascontiguousarray(tensors[n], dtype="<f8") for n in names]
    lines = [_MAGIC]
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {json.dumps(value)}")
    for name, arr in zip(names, arrays):
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} f8 {dims}".rstrip())
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for arr in arrays:
            fh.write(arr.tobytes())


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0 or raw[:newline].decode(errors="replace") != _MAGIC:
        raise DataError(f"{path}: not a tensor archive (bad magic)")

    meta: dict[str, str] = {}
    index: list[tuple[str, str, tuple[int, ...]]] = []
    offset = newline + 1
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise DataError(f"{path}: archive header not terminated")
        line = raw[offset:end].decode()
        offset = end + 1
        if line == "END":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = json.loads(value)
        elif kind == "tensor":
            fields = rest.split(" ")
            name, dtype = fields[0], fields[1]
            if dtype not in _DTYPES:
                raise DataError(f"{path}: unsupported element type {dtype!r} for {name}")
            index.append((name, dtype, tuple(int(d) for d in fields[2:])))
        else:
            raise DataError(f"{path}: unexpected header line {line!r}")

    tensors: dict[str, np.ndarray] = {}
    for name, dtype, shape in index:
        np_dtype = np.dtype(_DTYPES[dtype])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * np_dtype.itemsize
        if offset + nbytes > len(raw):
            raise DataError(f"{path}: payload truncated at tensor {name}")
        data = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset)
        tensors[name] = data.reshape(shape).astype(np.float64)
        offset += nbytes
    return tensors, meta


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: ModelState) -> None:
    tensors = {name: p.detach().numpy() for name, p in state.net.named_parameters()}
    meta = {
        "config": config_to_json(state.config),
        "freeze_mask": json.dumps(state.freeze_mask, sort_keys=True),
        "stage": state.stage,
    }
    write_tensors(path, tensors, meta)


def load_checkpoint(path) -> ModelState:
    from .model import init_state

    tensors, meta = read_tensors(path)
    for key in ("config", "freeze_mask", "stage"):
        if key not in meta:
            raise DataError(f"{path}: checkpoint missing {key!r} metadata")
    config = config_from_json(meta["config"])
    state = init_state(config, seed=0)
    params = state.parameters()
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise DataError(f"{path}: checkpoint missing tensors {missing[:5]}")
    with torch.no_grad():
        for name, param in params.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise DataError(
                    f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr.copy()))
    state.freeze_mask = json.loads(meta["freeze_mask"])
    state.stage = meta["stage"]
    return state


# ---------------------------------------------------------------------------
# Pretrained backbone import.
# ---------------------------------------------------------------------------


def backbone_tensor_names(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Archive tensor names the importer expects, with their shapes."""
    d = config.hidden
    names: dict[str, tuple[int, ...]] = {}
    for b in range(config.blocks):
        names[f"h.{b}.attn.c_attn.weight"] = (d, 3 * d)
        names[f"h.{b}.attn.c_attn.bias"] = (3 * d,)
        names[f"h.{b}.attn.c_proj.weight"] = (d, d)
        names[f"h.{b}.attn.c_proj.bias"] = (d,)
        names[f"h.{b}.mlp.c_fc.weight"] = (d, 4 * d)
        names[f"h.{b}.mlp.c_fc.bias"] = (4 * d,)
        names[f"h.{b}.mlp.c_proj.weight"] = (4 * d, d)
        names[f"h.{b}.mlp.c_proj.bias"] = (d,)
        names[f"h.{b}.ln_1.weight"] = (d,)
        names[f"h.{b}.ln_1.bias"] = (d,)
        names[f"h.{b}.ln_2.weight"] = (d,)
        names[f"h.{b}.ln_2.bias"] = (d,)
    names["ln_f.weight"] = (d,)
    names["ln_f.bias"] = (d,)
    return names


def import_pretrained(state: ModelState, archive, mapping=None) -> ModelState:
    """Load backbone weights into a copy of the state and freeze them.

    ``archive`` is a path or an already-read name->array dict. The mapping
    defaults to the shipped GPT-2-style table; pass a dict to rename archive
    tensors (archive name -> expected name) before the table is applied.
    Embedding, rotary, RIN and head parameters are left untouched.
    """
    if isinstance(archive, (str, Path)):
        tensors, _ = read_tensors(archive)
    else:
        tensors = {k: np.asarray(v, dtype=np.float64) for k, v in archive.items()}
    if mapping:
        tensors = {mapping.get(name, name): arr for name, arr in tensors.items()}

    expected = backbone_tensor_names(state.config)
    for name, shape in expected.items():
        if name not in tensors:
            raise DataError(f"pretrained archive missing tensor {name!r}")
        if tuple(tensors[name].shape) != shape:
            raise DataError(
                f"pretrained tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
            )

    out = state.clone()
    d = out.config.hidden
    with torch.no_grad():
        for b, blk in enumerate(out.net.blocks):
            qkv_w = tensors[f"h.{b}.attn.c_attn.weight"]
            qkv_b = tensors[f"h.{b}.attn.c_attn.bias"]
            blk.attn_q_w.copy_(torch.from_numpy(qkv_w[:, :d].copy()))
            blk.attn_k_w.copy_(torch.from_numpy(qkv_w[:, d : 2 * d].copy()))
            blk.attn_v_w.copy_(torch.from_numpy(qkv_w[:, 2 * d :].copy()))
            blk.attn_q_b.copy_(torch.from_numpy(qkv_b[:d].copy()))
            blk.attn_k_b.copy_(torch.from_numpy(qkv_b[d : 2 * d].copy()))
            blk.attn_v_b.copy_(torch.from_numpy(qkv_b[2 * d :].copy()))
            blk.attn_out_w.copy_(torch.from_numpy(tensors[f"h.{b}.attn.c_proj.weight"].copy()))
            blk.attn_out_b.copy_(torch.from_numpy(tensors[f"h.{b}.attn.c_proj.bias"].copy()))
            blk.ffn_in_w.copy_(torch.from_numpy(tensors[f"h.{b}.mlp.c_fc.weight"].copy()))
            blk.ffn_in_b.copy_(torch.from_numpy(tensors[f"h.{b}.mlp.c_fc.bias"].copy()))
            blk.ffn_out_w.copy_(torch.from_numpy(tensors[f"h.{b}.mlp.c_proj.weight"].copy()))
            blk.ffn_out_b.copy_(torch.from_numpy(tensors[f"h.{b}.mlp.c_proj.bias"].copy()))
            blk.ln1_g.copy_(torch.from_numpy(tensors[f"h.{b}.ln_1.weight"].copy()))
            blk.ln1_b.copy_(torch.from_numpy(tensors[f"h.{b}.ln_1.bias"].copy()))
            blk.ln2_g.copy_(torch.from_numpy(tensors[f"h.{b}.ln_2.weight"].copy()))
            blk.ln2_b.copy_(torch.from_numpy(tensors[f"h.{b}.ln_2.bias"].copy()))
        out.net.final_ln_g.copy_(torch.from_numpy(tensors["ln_f.weight"].copy()))
        out.net.final_ln_b.copy_(torch.from_numpy(tensors["ln_f.bias"].copy()))

    from .model import parameter_group

    out.freeze_mask = {
        name: parameter_group(name) == "backbone" for name in out.parameters()
    }
    return out
