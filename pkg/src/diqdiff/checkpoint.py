"""Single-file checkpoint container.

Layout::

    b"DQDFCKPT" | u32 version | u64 header length | JSON header | tensor data

The header holds run metadata and a tensor directory (name, shape, dtype,
offset, nbytes). Tensor data is little-endian float64 (int64 for counters).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .errors import CorruptCheckpointError, IncompatibleCheckpointError
from .svq import Codebook
from .training import ModelState, init_state, make_optimizer

MAGIC = b"DQDFCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"f64": ("<f8", torch.float64), "i64": ("<i8", torch.int64)}


def _tensors(state: ModelState) -> list[tuple[str, torch.Tensor]]:
    out = [(f"model.{n}", p.detach()) for n, p in state.model.named_parameters()]
    out.append(("codebook.codes", state.codebook.codes))
    out.append(("codebook.usage", state.codebook.usage))
    names = dict((p, n) for n, p in state.model.named_parameters())
    for p, st in state.optimizer.state.items():
        if st:
            out.append((f"adam.exp_avg.{names[p]}", st["exp_avg"]))
            out.append((f"adam.exp_avg_sq.{names[p]}", st["exp_avg_sq"]))
    return out


def _adam_step(state: ModelState) -> int:
    steps = {int(st["step"]) for st in state.optimizer.state.values() if st}
    if len(steps) > 1:
        raise ValueError(f"inconsistent Adam step counts {steps}")
    return steps.pop() if steps else 0


def to_bytes(state: ModelState) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, t in _tensors(state):
        code = "i64" if t.dtype == torch.int64 else "f64"
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype(_DTYPES[code][0]))
        raw = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": code,
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "meta": {
            "config": state.cfg.to_flat(),
            "n_items": state.n_items,
            "step_count": state.step_count,
            "adam_step": _adam_step(state),
            "progress": state.progress,
            "ema_decay": state.codebook.ema_decay,
            "codebook_fallback": state.codebook.fallback,
        },
        "tensors": directory,
        "data_len": offset,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)


def save_checkpoint(state: ModelState, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(state))
    tmp.replace(path)


def from_bytes(blob: bytes) -> ModelState:
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpointError("file too short for a checkpoint header")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise IncompatibleCheckpointError(f"checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + head_len
    if len(blob) < start:
        raise CorruptCheckpointError("truncated header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from None
    if len(blob) != start + header["data_len"]:
        raise CorruptCheckpointError(
            f"data section is {len(blob) - start} bytes, expected {header['data_len']}")

    tensors = {}
    for entry in header["tensors"]:
        np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
        lo = start + entry["offset"]
        arr = np.frombuffer(blob[lo:lo + entry["nbytes"]], dtype=np_dtype)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy()).to(
            torch_dtype)

    meta = header["meta"]
    cfg = TrainConfig.from_flat(meta["config"])
    state = init_state(cfg, meta["n_items"])
    params = dict(state.model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            key = f"model.{name}"
            if key not in tensors or tuple(tensors[key].shape) != tuple(p.shape):
                raise CorruptCheckpointError(f"missing or misshapen tensor {key}")
            p.copy_(tensors[key])
    state.codebook = Codebook(tensors["codebook.codes"], tensors["codebook.usage"],
                              meta["ema_decay"], meta["codebook_fallback"])
    state.optimizer = make_optimizer(state.model, cfg.lr)
    if meta["adam_step"]:
        for name, p in params.items():
            if f"adam.exp_avg.{name}" not in tensors:
                continue
            state.optimizer.state[p] = {
                "step": torch.tensor(float(meta["adam_step"])),
                "exp_avg": tensors[f"adam.exp_avg.{name}"],
                "exp_avg_sq": tensors[f"adam.exp_avg_sq.{name}"],
            }
    state.step_count = meta["step_count"]
    state.progress = meta["progress"]
    return state


def load_checkpoint(path) -> ModelState:
    return from_bytes(Path(path).read_bytes())
