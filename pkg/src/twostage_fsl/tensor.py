"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every differentiable operation here is a plain function taking and returning
:class:`Tensor`.  When a :class:`Tape` is active on the current thread and at
least one input requires a gradient, the op appends a node holding its
backward rule.  ``backward`` then walks the nodes in reverse.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, a scalar operand, or a right-hand operand whose shape equals the
trailing dimensions of the left one (bias-add).
"""

from __future__ import annotations

import os
import struct
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, NumericError

BN_EPS = 1e-7
BN_MOMENTUM = 0.9

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can take part in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return None if self.node is None else self.node.index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)


class Node:
    __slots__ = ("index", "op", "out", "parents", "backward_fn")

    def __init__(self, index, op, out, parents, backward_fn):
        self.index = index
        self.op = op
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block on the
    same thread are recorded.  Tapes nest (innermost wins).
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> list[Tensor]:
        return backward(self, loss, params)


class no_grad:
    """Suspend recording on this thread (e.g. for frozen feature extraction)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite output")


def _record(op: str, out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(len(tape.nodes), op, out, tuple(parents), backward_fn)
        tape.nodes.append(out.node)
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> list[Tensor]:
    """Populate ``.grad`` on every leaf reached from ``loss``.

    Leaves listed in ``params`` but unreachable from the loss get a zero
    gradient, so callers can rely on ``.grad`` being present.
    Returns the leaves that received gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else []
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            _check_finite(f"{node.op} (backward)", pg)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p.node is None:
                leaves[key] = p
    reached = []
    for key, leaf in leaves.items():
        leaf.grad = grads[key].reshape(leaf.shape)
        reached.append(leaf)
    for p in params:
        if id(p) not in leaves:
            p.grad = np.zeros_like(p.data)
    return reached


# ----------------------------------------------------------------------------
# elementwise binary ops


def _conform(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    if b.ndim < a.ndim and sa[a.ndim - b.ndim:] == sb:
        return
    if a.ndim < b.ndim and sb[b.ndim - a.ndim:] == sa:
        return
    raise ConfigError(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _conform("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _conform("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _conform("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _conform("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


# ----------------------------------------------------------------------------
# elementwise unary ops


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record("softplus", out, (a,), lambda g: (g * sig,))


def square(a: Tensor) -> Tensor:
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), lambda g: (g / a.data,))


# ----------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _record("sum", out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes) if axes else a.data.copy()

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / count,)

    return _record("mean", out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ConfigError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ConfigError(f"transpose expects a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ConfigError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tensors, bw)


def rows(a: Tensor, index) -> Tensor:
    """Select rows (first-axis entries) by integer index; repeats allowed."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _record("rows", a.data[index], (a,), bw)


def pick(a: Tensor, index) -> Tensor:
    """``out[i] = a[i, index[i]]`` for a matrix ``a``."""
    index = np.asarray(index, dtype=np.intp)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ConfigError(f"pick: matrix {a.shape} with index {index.shape}")
    ar = np.arange(a.shape[0])

    def bw(g):
        out = np.zeros_like(a.data)
        out[ar, index] = g
        return (out,)

    return _record("pick", a.data[ar, index], (a,), bw)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def _sqdist_forward(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # direct differences keep exact zeros and exact symmetry; chunked for memory
    n, m, d = x.shape[0], y.shape[0], x.shape[1]
    out = np.empty((n, m))
    step = max(1, (1 << 22) // max(1, m * d))
    for i in range(0, n, step):
        diff = x[i:i + step, None, :] - y[None, :, :]
        out[i:i + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of squared Euclidean distances between the rows of ``a`` and ``b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError(f"sqdist: shapes {a.shape} and {b.shape} do not conform")
    out = _sqdist_forward(a.data, b.data)

    def bw(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data)
        gb = 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return ga, gb

    return _record("sqdist", out, (a, b), bw)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record("log_softmax", out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# ----------------------------------------------------------------------------
# convolution, pooling, normalization (NHWC layout)


def conv2d_3x3_same(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1; ``w`` is (3, 3, C_in, C_out)."""
    if x.ndim != 4 or w.shape[:3] != (3, 3, x.shape[3]) or w.ndim != 4:
        raise ConfigError(f"conv2d_3x3_same: input {x.shape} with weights {w.shape}")
    B, H, W, C = x.shape
    F = w.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B * H * W, F))
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + H, j:j + W, :].reshape(-1, C) @ w.data[i, j]
    out = out.reshape(B, H, W, F)

    def bw(g):
        g2 = g.reshape(-1, F)
        gx = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for i in range(3):
            for j in range(3):
                gw[i, j] = xp[:, i:i + H, j:j + W, :].reshape(-1, C).T @ g2
                gx[:, i:i + H, j:j + W, :] += (g2 @ w.data[i, j].T).reshape(B, H, W, C)
        return gx[:, 1:-1, 1:-1, :], gw

    return _record("conv2d_3x3_same", out, (x, w), bw)


def conv2d_1x1(x: Tensor, w: Tensor) -> Tensor:
    """Pointwise convolution; ``w`` is (C_in, C_out)."""
    if x.ndim != 4 or w.ndim != 2 or w.shape[0] != x.shape[3]:
        raise ConfigError(f"conv2d_1x1: input {x.shape} with weights {w.shape}")
    C, F = w.shape
    flat = x.data.reshape(-1, C)
    out = (flat @ w.data).reshape(x.shape[:3] + (F,))

    def bw(g):
        g2 = g.reshape(-1, F)
        return (g2 @ w.data.T).reshape(x.shape), flat.T @ g2

    return _record("conv2d_1x1", out, (x, w), bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2; odd trailing rows/columns are dropped."""
    if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ConfigError(f"maxpool2x2: input {x.shape} too small")
    B, H, W, C = x.shape
    h, w = H // 2, W // 2
    win = (x.data[:, :2 * h, :2 * w, :]
           .reshape(B, h, 2, w, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, h, w, C, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, h, w, C, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, h, w, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * h, 2 * w, C)
        gx = np.zeros(x.shape)
        gx[:, :2 * h, :2 * w, :] = gw
        return (gx,)

    return _record("maxpool2x2", out, (x,), bw)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, train: bool, momentum: float = BN_MOMENTUM,
              eps: float = BN_EPS) -> Tensor:
    """Normalize over every axis except the last (channel) axis.

    In train mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    In eval mode the running buffers are used and never touched.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,):
        raise ConfigError(f"batchnorm: input {x.shape} with parameters {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if train:
        n = x.size // C
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * (var * n / (n - 1) if n > 1 else var)

        def dx(g):
            dxhat = g * gamma.data
            return inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv

        def dx(g):
            return g * gamma.data * inv

    out = xhat * gamma.data + beta.data

    def bw(g):
        return dx(g), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record("batchnorm", out, (x, gamma, beta), bw)


# ----------------------------------------------------------------------------
# checkpoint / sample file format

MAGIC = b"EPRO"
FORMAT_VERSION = 1


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    def fail(msg, offset):
        raise DataError(f"{source}: {msg} at byte offset {offset}")

    if len(buf) < 8 or buf[:4] != MAGIC:
        fail("bad magic (expected 'EPRO')", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        fail(f"unsupported format version {version}", 4)
    out: dict[str, np.ndarray] = {}
    pos = 8
    while pos < len(buf):
        start = pos
        if pos + 4 > len(buf):
            fail("truncated name length", pos)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + nlen + 4 > len(buf):
            fail("truncated record header", start)
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            fail("name is not valid UTF-8", pos)
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + 4 * rank > len(buf):
            fail("truncated dimensions", pos)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            fail(f"truncated payload for {name!r}", pos)
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(dims)
        pos += nbytes
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write tensors atomically (temp file then rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_tensors(tensors))
    os.replace(tmp, path)


def load_tensors(path) -> dict[str, np.ndarray]:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        return decode_tensors(fh.read(), source=path)
