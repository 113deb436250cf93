"""Binary checkpoint format.

Layout (little-endian)::

    b"JCAT" | u32 version | u32 len | JSON header (sorted keys)
    u64 parameter count | u32 tensor count | tensors...
    u8 has_optimizer [| u64 step | f64 lr, beta1, beta2, eps, weight_decay
                      | u32 tensor count | tensors...]

A tensor is ``u16 len | utf-8 path | u8 dtype tag | u8 ndim | u32 * ndim | raw``.
The JSON header holds the model config, the training config (if any) and
free-form metadata.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .nn import Module
from .optim import AdamW, OptimState

MAGIC = b"JCAT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {v.newbyteorder("="): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict            # path -> array (parameters and buffers)
    param_count: int
    train_config: dict | None = None
    meta: dict = field(default_factory=dict)
    optimizer: OptimState | None = None


def _write_tensor(buf, path: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype.newbyteorder("="))
    if tag is None:
        raise CheckpointError(f"{path}: unsupported dtype {arr.dtype}")
    name = path.encode("utf-8")
    buf.write(struct.pack("<H", len(name)))
    buf.write(name)
    buf.write(struct.pack("<BB", tag, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        tag, ndim = self.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"{self.path}: bad dtype tag {tag} for {name}")
        shape = self.unpack(f"<{ndim}I")
        dt = _DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr.astype(dt.newbyteorder("="))


def model_tensors(model: Module) -> dict:
    out = {name: p.data for name, p in model.named_parameters()}
    out.update(model.named_buffers())
    return out


def to_bytes(model: Module, optimizer: AdamW | OptimState | None = None,
             train_config: dict | None = None, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    header = json.dumps({"model": model.cfg.to_dict(), "train": train_config, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    tensors = model_tensors(model)
    buf.write(struct.pack("<QI", model.num_parameters(), len(tensors)))
    for name, arr in tensors.items():
        _write_tensor(buf, name, arr)
    st = optimizer.state if isinstance(optimizer, AdamW) else optimizer
    if st is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Q5d", st.step, st.lr, st.betas[0], st.betas[1], st.eps, st.weight_decay))
        buf.write(struct.pack("<I", 2 * len(st.m)))
        for name in st.m:
            _write_tensor(buf, "m/" + name, st.m[name])
        for name in st.v:
            _write_tensor(buf, "v/" + name, st.v[name])
    return buf.getvalue()


def save_checkpoint(path, model: Module, optimizer=None, train_config: dict | None = None,
                    meta: dict | None = None) -> None:
    blob = to_bytes(model, optimizer, train_config, meta)
    with open(path, "wb") as f:
        f.write(blob)


def from_bytes(blob: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    param_count, n = r.unpack("<QI")
    tensors = dict(r.tensor() for _ in range(n))
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        step, lr, b1, b2, eps, wd = r.unpack("<Q5d")
        (k,) = r.unpack("<I")
        opt = OptimState(lr, (b1, b2), eps, wd, step)
        for _ in range(k):
            name, arr = r.tensor()
            kind, _, pname = name.partition("/")
            if kind not in ("m", "v"):
                raise CheckpointError(f"{path}: unexpected optimizer tensor {name}")
            getattr(opt, kind)[pname] = arr
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return Checkpoint(ModelConfig.from_dict(header["model"]), tensors, param_count,
                      header.get("train"), header.get("meta") or {}, opt)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read(), path)


def check_compatible(model: Module, ckpt: Checkpoint) -> None:
    """Raise naming the first tensor whose name or shape disagrees with ``model``."""
    expected = model_tensors(model)
    for name, arr in expected.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"tensor {name} missing from checkpoint")
        got = ckpt.tensors[name]
        if got.shape != arr.shape:
            raise CheckpointError(f"tensor {name}: checkpoint shape {got.shape}, model {arr.shape}")
    extra = [k for k in ckpt.tensors if k not in expected]
    if extra:
        raise CheckpointError(f"tensor {extra[0]} in checkpoint has no counterpart in the model")


def load_into(model: Module, ckpt: Checkpoint, optimizer: AdamW | None = None) -> None:
    """Copy tensors into ``model``; any mismatch names the first offending tensor."""
    check_compatible(model, ckpt)
    params = dict(model.named_parameters())
    for name, arr in ckpt.tensors.items():
        if name in params:
            params[name].data = arr.astype(params[name].data.dtype, copy=True)
        else:
            model.set_buffer(name, arr)
    if optimizer is not None and ckpt.optimizer is not None:
        st = ckpt.optimizer
        optimizer.state.step = st.step
        optimizer.state.lr = st.lr
        optimizer.state.betas = st.betas
        optimizer.state.eps = st.eps
        optimizer.state.weight_decay = st.weight_decay
        for name in optimizer.params:
            optimizer.state.m[name] = st.m[name].astype(optimizer.params[name].data.dtype, copy=True)
            optimizer.state.v[name] = st.v[name].astype(optimizer.params[name].data.dtype, copy=True)
