"""A small dense reverse-mode differentiation engine on numpy.

Tensors hold float64 arrays of up to four axes ``(batch, channel, height,
width)``.  Every op records its parents and a backward rule; :func:`backward`
replays the rules in exact reverse creation order.  There is no broadcasting
beyond scalar multiplication.
"""

from __future__ import annotations

import itertools
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_seq = itertools.count()


class GraphError(RuntimeError):
    """Misuse of the tape: non-scalar backward, reuse of a consumed graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError("tensors have at most four axes")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __getitem__(self, index):
        return take(self, index)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out._consumed = False
    out.name = None
    parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim and b.data.ndim:
        _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim and b.data.ndim:
        _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.data.ndim == 0 and g.ndim else g


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim and b.data.ndim:
        _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unscalar(g * bd, a), _unscalar(g * ad, b)))


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def clip_max1(a: Tensor) -> Tensor:
    """``min(a, 1)``; gradient passes only strictly below 1."""
    inside = a.data < 1.0
    return _make(np.minimum(a.data, 1.0), (a,), lambda g: (np.where(inside, g, 0.0),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), back)


def log(a: Tensor, floor: float = 1e-7) -> Tensor:
    """``log(max(a, floor))``."""
    live = a.data > floor
    safe = np.where(live, a.data, floor)
    return _make(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, slope * a.data), (a,), lambda g: (np.where(pos, g, slope * g),))


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


# structural -------------------------------------------------------------------

def take(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = np.array(a.data[index], copy=True)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return _make(out, (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def to_rows(a: Tensor) -> Tensor:
    """``(N, C, H, W) -> (N, H*W, C)``: the pixel-major layout used by the losses."""
    n, c, h, w = a.shape
    out = a.data.reshape(n, c, h * w).transpose(0, 2, 1).copy()
    return _make(out, (a,), lambda g: (g.transpose(0, 2, 1).reshape(n, c, h, w),))


def max_pool2(a: Tensor) -> Tensor:
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 needs even spatial size, got {h}x{w}")
    blocks = a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _make(out, (a,), back)


def upsample2(a: Tensor) -> Tensor:
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    return _make(out, (a,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patches of a same-padded input laid out as ``(C*k*k, N*H*W)``."""
    n, c, h, w = x.shape
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i : i + h, j : j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def _correlate(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded stride-1 cross-correlation; returns the output and the patch matrix."""
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    cols = _im2col(x, k)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, h, wd).transpose(1, 0, 2, 3)
    return out, cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded ("same") 2-D convolution with an odd square kernel."""
    if len(x.shape) != 4 or len(w.shape) != 4:
        raise ValueError("conv2d expects x (N,C,H,W) and w (O,C,k,k)")
    o, c, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("conv2d needs an odd square kernel")
    if x.shape[1] != c:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c}")
    out, cols = _correlate(x.data, w.data)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        if b.shape != (o,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
        out = out + b.data[None, :, None, None]
    wd = w.data

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            gx, _ = _correlate(g, wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return _make(np.ascontiguousarray(out), parents, back)


def kernel(a: Tensor, fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]) -> Tensor:
    """Scalar-valued op from a numpy ``fn(x) -> (value, d value / dx)``."""
    value, grad = fn(a.data)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != ():
        raise ValueError("kernel functions must return a scalar value")
    return _make(value, (a,), lambda g: (g * grad,))


# backward -------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise GraphError("backward needs a single-element tensor")
    if loss._consumed:
        raise GraphError("graph already consumed by an earlier backward")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes or not t.requires_grad:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for t in order:
        if t._backward is not None:
            t._backward = None
            t._parents = ()
    loss._consumed = True


def no_grad_copy(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


# finite-difference check --------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-5, tol: float = 1e-4,
               atol: float = 1e-8, exclude: np.ndarray | None = None,
               coords: np.ndarray | None = None) -> dict:
    """Compare the tape gradient of scalar ``f`` with central differences.

    A coordinate passes when its relative error is below ``tol`` or its
    absolute error is below the noise floor of the difference quotient:
    ``atol`` or ``10 * eps * |f| / h``, whichever is larger (rounding in two
    evaluations of ``f``).  Relative error is meaningless beneath that floor.  ``exclude`` masks
    coordinates sitting on a kink (e.g. the clip boundary) out of the check.
    ``coords`` restricts the finite differences to some flat indices.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.array(point, dtype=np.float64)
    x = Tensor(point, requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(point)
    atol = max(atol, 10 * np.finfo(np.float64).eps * abs(out.item()) / h)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    todo = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.intp)
    checked = np.zeros(flat.size, dtype=bool)
    checked[todo] = True
    for i in todo:
        old = flat[i]
        flat[i] = old + h
        fp = f(Tensor(point)).item()
        flat[i] = old - h
        fm = f(Tensor(point)).item()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite evaluation during grad_check")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    abs_err = np.abs(analytic - numeric).reshape(-1)
    rel_err = abs_err / np.maximum(np.abs(analytic), np.abs(numeric)).reshape(-1).clip(min=1e-300)
    skip = ~checked
    if exclude is not None:
        skip |= np.asarray(exclude, dtype=bool).reshape(-1)
    abs_err = np.where(skip, 0.0, abs_err)
    rel_err = np.where(skip | (abs_err < atol), 0.0, rel_err)
    return {
        "passed": bool(((rel_err < tol) | (abs_err < atol)).all()),
        "max_rel_err": float(rel_err.max(initial=0.0)),
        "max_abs_err": float(abs_err.max(initial=0.0)),
        "analytic": analytic,
        "numeric": numeric,
    }


# checkpoints ------------------------------------------------------------------

MAGIC = b"CSGP"
VERSION = 1


def save_params(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    """Ordered ``(name, shape, float64 LE data)`` records after a magic and version byte."""
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 8
        out[name] = np.frombuffer(data[off : off + size], dtype="<f8").reshape(shape).astype(np.float64)
        off += size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out
