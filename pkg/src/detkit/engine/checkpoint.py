"""Self-describing checkpoint container with end-to-end integrity hashing.

Layout, in file order:

    8 bytes   magic ``DETKIT\\x00\\x01``
    8 bytes   header length, unsigned little-endian
    header    JSON: {"meta": {...}, "tensors": [{key, dtype, shape}, ...]}
    payload   raw little-endian C-contiguous tensor bytes, header order
    32 bytes  sha256 over everything above

Tensor keys are sorted in the header and the JSON is dumped with sorted
keys, so save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DETKIT\x00\x01"

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.int16: "<i2",
    torch.uint8: "|u1",
    torch.int8: "|i1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CorruptCheckpoint(RuntimeError):
    """The file is not a valid container or its content hash mismatches."""


def write_container(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    entries = []
    blobs = []
    for key in sorted(tensors):
        tensor = tensors[key].detach().cpu().contiguous()
        if tensor.dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {tensor.dtype} for {key!r}")
        entries.append({"key": key, "dtype": _DTYPES[tensor.dtype], "shape": list(tensor.shape)})
        blobs.append(tensor.numpy().tobytes())
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256()
    body = [MAGIC, struct.pack("<Q", len(header)), header, *blobs]
    for chunk in body:
        digest.update(chunk)
    with open(path, "wb") as handle:
        for chunk in body:
            handle.write(chunk)
        handle.write(digest.digest())


def read_container(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 + 32:
        raise CorruptCheckpoint(f"{path}: file shorter than container framing")
    if raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic bytes")
    stored = raw[-32:]
    if hashlib.sha256(raw[:-32]).digest() != stored:
        raise CorruptCheckpoint(f"{path}: content hash mismatch")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    offset = len(MAGIC) + 8
    if offset + header_len > len(raw) - 32:
        raise CorruptCheckpoint(f"{path}: header length exceeds file size")
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: undecodable header") from exc
    offset += header_len
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw) - 32:
            raise CorruptCheckpoint(f"{path}: payload truncated at {entry['key']!r}")
        array = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["key"]] = torch.from_numpy(array.copy()).to(_TORCH_DTYPES[entry["dtype"]])
        offset += nbytes
    if offset != len(raw) - 32:
        raise CorruptCheckpoint(f"{path}: trailing bytes after payload")
    return tensors, header["meta"]


@dataclass
class TrainState:
    """Everything needed to resume training exactly where it stopped."""

    iteration: int
    model: dict[str, torch.Tensor]
    optimizer: dict
    rng: dict[str, torch.Tensor]
    ema: dict[str, torch.Tensor] | None = None
    best_metric: float | None = None
    config: dict = field(default_factory=dict)


def _pack_optimizer(state_dict: dict, tensors: dict, meta: dict) -> None:
    scalars: dict[str, object] = {}
    for index, entry in state_dict["state"].items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                tensors[f"optim.{index}.{key}"] = value
            else:
                scalars[f"{index}.{key}"] = value
    meta["optim_groups"] = state_dict["param_groups"]
    meta["optim_scalars"] = scalars


def _unpack_optimizer(tensors: dict, meta: dict) -> dict:
    state: dict[int, dict] = {}
    for key, tensor in tensors.items():
        if not key.startswith("optim."):
            continue
        _, index, name = key.split(".", 2)
        state.setdefault(int(index), {})[name] = tensor
    for path, value in meta["optim_scalars"].items():
        index, name = path.split(".", 1)
        state.setdefault(int(index), {})[name] = value
    groups = []
    for group in meta["optim_groups"]:
        group = dict(group)
        if "betas" in group:
            group["betas"] = tuple(group["betas"])
        groups.append(group)
    return {"state": state, "param_groups": groups}


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors: dict[str, torch.Tensor] = {}
    meta: dict = {
        "iteration": state.iteration,
        "best_metric": state.best_metric,
        "has_ema": state.ema is not None,
        "config": state.config,
    }
    for name, tensor in state.model.items():
        tensors[f"model.{name}"] = tensor
    if state.ema is not None:
        for name, tensor in state.ema.items():
            tensors[f"ema.{name}"] = tensor
    for name, tensor in state.rng.items():
        tensors[f"rng.{name}"] = tensor
    _pack_optimizer(state.optimizer, tensors, meta)
    write_container(path, tensors, meta)


def load_checkpoint(path: str | Path) -> TrainState:
    tensors, meta = read_container(path)
    model = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    ema = {k[len("ema."):]: v for k, v in tensors.items() if k.startswith("ema.")}
    rng = {k[len("rng."):]: v for k, v in tensors.items() if k.startswith("rng.")}
    return TrainState(
        iteration=meta["iteration"],
        model=model,
        optimizer=_unpack_optimizer(tensors, meta),
        rng=rng,
        ema=ema if meta["has_ema"] else None,
        best_metric=meta["best_metric"],
        config=meta.get("config", {}),
    )
