"""Named parameter registry, AdamW updates and the binary checkpoint format."""
from __future__ import annotations

import struct
from collections import OrderedDict
from typing import BinaryIO, Iterator

import numpy as np

from .autodiff import Tensor

MAGIC = b"ODGN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered mapping of unique names to trainable tensors plus AdamW state."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state_dict(self, state) -> None:
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if k in self._params:
                if self._params[k].shape != v.shape:
                    raise CheckpointError(
                        f"shape mismatch for {k}: {self._params[k].shape} vs {v.shape}"
                    )
                self._params[k].data = v.copy()
            else:
                self.add(k, v)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for k, t in self._params.items():
            other.add(k, t.data)
        return other

    def step(
        self,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-5,
    ) -> None:
        """One AdamW update with bias correction and decoupled weight decay.

        Parameters without a gradient are treated as having a zero gradient.
        Any non-finite gradient aborts before a single weight is touched.
        """
        for name, t in self._params.items():
            if t.grad is not None and not np.isfinite(t.grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t_ = self.step_count
        bc1 = 1.0 - beta1**t_
        bc2 = 1.0 - beta2**t_
        for name, t in self._params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            t.data *= 1.0 - lr * weight_decay
            t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


optimizer_step = ParamStore.step


def write_checkpoint(state, fh: BinaryIO) -> None:
    """Serialise ``name -> matrix`` pairs in insertion order."""
    if isinstance(state, ParamStore):
        state = state.state_dict()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise CheckpointError(f"parameter {name!r} is not 2-D")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(fh: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
            nbytes = rows * cols * 8
            if pos + nbytes > len(buf):
                raise CheckpointError(f"truncated data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(
                rows, cols
            ).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out


def save_checkpoint(state, path) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(state, fh)


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return read_checkpoint(fh)
