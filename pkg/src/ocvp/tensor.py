"""Dense float64 tensors with reverse-mode automatic differentiation.

Every continuous quantity in the project (frames, features, slots, attention
weights, masks) is a ``Tensor``: a numpy float64 array plus an optional
gradient and a record of how it was produced. Calling ``backward()`` on a
scalar loss walks the recorded operations in reverse topological order and
accumulates ``grad`` on every tensor that requires it. Gradients accumulate
additively across uses; ``zero_grad`` resets them between optimizer steps.
"""
from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from typing import Iterable, Mapping, Sequence

import numpy as np

Array = np.ndarray

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection --------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        """The underlying array. Treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph construction ----------------------------------------------

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=np.float64)
        else:
            self.grad += g

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        a, b = self, _lift(other)

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return _node(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _lift(other)

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return _node(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return _lift(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, _lift(other)

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return _node(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _lift(other)

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return _node(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return _lift(other).__truediv__(self)

    def __neg__(self):
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(-g)

        return _node(-a.data, (a,), bw)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a, p = self, float(exponent)
        out = a.data ** p

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * p * a.data ** (p - 1.0))

        return _node(out, (a,), bw)

    # -- elementwise nonlinearities ----------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * out)

        return _node(out, (a,), bw)

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * (1.0 - out * out))

        return _node(out, (a,), bw)

    def sigmoid(self):
        a = self
        # piecewise form avoids overflow in exp for large |x|
        x = a.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * out * (1.0 - out))

        return _node(out, (a,), bw)

    def relu(self):
        a = self
        mask = a.data > 0

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return _node(np.where(mask, a.data, 0.0), (a,), bw)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        ax = _normalize_axes(axis, a.ndim)
        out = a.data.sum(axis=ax, keepdims=keepdims)

        def bw(g):
            if not a.requires_grad:
                return
            gg = g
            if ax is not None and not keepdims:
                for d in sorted(ax):
                    gg = np.expand_dims(gg, d)
            a._accumulate(np.broadcast_to(gg, a.shape))

        return _node(out, (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        ax = _normalize_axes(axis, a.ndim)
        out = a.data.mean(axis=ax, keepdims=keepdims)
        count = a.size if ax is None else int(np.prod([a.shape[d] for d in ax]))

        def bw(g):
            if not a.requires_grad:
                return
            gg = g
            if ax is not None and not keepdims:
                for d in sorted(ax):
                    gg = np.expand_dims(gg, d)
            a._accumulate(np.broadcast_to(gg, a.shape) / count)

        return _node(out, (a,), bw)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, shape):
        a = self
        out = a.data.reshape(shape)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.reshape(a.shape))

        return _node(out, (a,), bw)

    def transpose(self, axes=None):
        a = self
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inverse))

        return _node(a.data.transpose(axes), (a,), bw)

    def swapaxes(self, ax1: int, ax2: int):
        perm = list(range(self.ndim))
        perm[ax1], perm[ax2] = perm[ax2], perm[ax1]
        return self.transpose(perm)

    def __getitem__(self, index):
        a = self
        out = a.data[index]

        def bw(g):
            if a.requires_grad:
                full = np.zeros(a.shape, dtype=np.float64)
                full[index] = g
                a._accumulate(full)

        return _node(out, (a,), bw)

    def broadcast_to(self, shape):
        a = self
        out = np.broadcast_to(a.data, shape)

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))

        return _node(np.array(out), (a,), bw)

    # -- linear algebra ----------------------------------------------------------

    def matmul(self, other):
        a, b = self, _lift(other)
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul requires rank >= 2 operands, got {a.shape} x {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        out = np.matmul(a.data, b.data)

        def bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))

        return _node(out, (a, b), bw)

    __matmul__ = matmul

    # -- backward pass ---------------------------------------------------------

    def backward(self) -> None:
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(d % ndim for d in axis)


def _node(data: Array, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def custom_op(data: Array, parents: Sequence[Tensor], backward) -> Tensor:
    """Build a graph node from an externally computed forward value.

    ``backward(g)`` must accumulate into each parent via ``_accumulate``,
    guarding on ``requires_grad``. Used for fused primitives such as conv2d.
    """
    return _node(data, tuple(parents), backward)


# -- composite operations ------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    x = _lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    shift = x.data.max(axis=axis, keepdims=True)  # constant: softmax is shift-invariant
    z = (x - Tensor(shift)).exp()
    return z / z.sum(axis=axis, keepdims=True)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("concatenate of empty sequence")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _node(out, tuple(ts), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("stack of empty sequence")
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _node(out, tuple(ts), bw)


# -- seedable randomness -------------------------------------------------------


class Rng:
    """Named deterministic random stream (PCG64 behind a seed path).

    A seed path is a tuple of non-negative ints; ``child(k)`` derives an
    independent stream, so every consumer of randomness in a run can be
    reproduced from the experiment seed alone.
    """

    def __init__(self, seed):
        if isinstance(seed, (int, np.integer)):
            path = (int(seed),)
        else:
            path = tuple(int(s) for s in seed)
        self.path = path
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(path)))

    def child(self, *subpath) -> "Rng":
        return Rng(self.path + tuple(int(s) for s in subpath))

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> Array:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> Array:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int | None = None, size=None) -> Array | int:
        out = self._gen.integers(low, high, size=size)
        return out if size is not None else int(out)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)


# -- checkpoint container ------------------------------------------------------

CHECKPOINT_MAGIC = b"OCVPCK01"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Raised for malformed, truncated, or mismatched checkpoint files."""


def save_checkpoint(path, params: Mapping[str, "Tensor | Array"], metadata: dict | None = None) -> None:
    """Write named float64 arrays plus JSON metadata to a single file.

    Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header,
    then the raw float64 little-endian payload of every array, in the sorted
    name order recorded in the header.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        value = params[name]
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "params": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, Array], dict]:
    """Read back (params, metadata); validates magic, version, and sizes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    header_len = struct.unpack("<I", raw[8:12])[0]
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[12:header_end].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}")
    payload = raw[header_end:]
    params: dict[str, Array] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for parameter {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
    return params, header["metadata"]


def load_into(target: Mapping[str, Tensor], path) -> dict:
    """Load a checkpoint into an existing named-parameter map, validating shapes."""
    params, metadata = load_checkpoint(path)
    missing = sorted(set(target) - set(params))
    if missing:
        raise CheckpointError(f"{path}: checkpoint is missing parameters {missing}")
    for name, tensor in target.items():
        arr = params[name]
        if arr.shape != tensor.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: checkpoint {arr.shape}, model {tensor.shape}")
        tensor.data[...] = arr
    return metadata
