"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph is implicit: every operation that involves a tensor
with ``requires_grad`` records its parents and a local backward rule on the
output tensor. ``backward()`` replays those rules in exact reverse
topological order, accumulating gradients additively across fan-out, so
repeated runs over the same graph are bit-identical.

Elementwise binary ops accept operands of equal shape, or a smaller operand
whose shape matches the trailing extents of the larger one (broadcast over
leading batch extents only). Anything fancier must go through an explicit
``expand``. matmul follows numpy stacking semantics.
"""

from __future__ import annotations

import base64
import json
import math
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "param",
    "no_grad",
    "backward",
    "grad_check",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
    "concatenate",
    "matmul",
    "solve",
]

class _GradMode(threading.local):
    """Per-thread recording switch so parallel workers stay independent."""

    def __init__(self):
        self.enabled = True


_grad_mode = _GradMode()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def _shape_str(shape):
    return "(" + ",".join(str(s) for s in shape) + ")"


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    """Equal shapes, or one shape equal to the other's trailing extents."""
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if big[len(big) - len(small):] == small:
        return
    raise ValueError(f"{op}: shapes {_shape_str(sa)} and {_shape_str(sb)} do not conform")


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient produced under broadcasting back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if g != s)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-d float64 array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents, bwd) -> Tensor:
    out = Tensor(data)
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _as_pair(op, a, b):
    a = constant(a)
    b = constant(b)
    _check_broadcast(op, a.shape, b.shape)
    return a, b


# -- elementwise binary ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_pair("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = _as_pair("subtract", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = _as_pair("multiply", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_sum_to_shape(g * b.data, a.shape),
                            _sum_to_shape(g * a.data, b.shape)))


def divide(a, b) -> Tensor:
    a, b = _as_pair("divide", a, b)
    if np.any(b.data == 0.0):
        raise ValueError(f"divide: zero denominator (shapes {_shape_str(a.shape)} / {_shape_str(b.shape)})")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_sum_to_shape(g / b.data, a.shape),
                            _sum_to_shape(-g * out / b.data, b.shape)))


def negative(a) -> Tensor:
    a = constant(a)
    return _make(-a.data, (a,), lambda g: (-g,))


# -- elementwise unary -------------------------------------------------

def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise ValueError("exp: overflow to non-finite values")
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = constant(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = constant(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = constant(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = constant(a)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bwd)


# -- reductions --------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    axis = _norm_axis(axis, a.ndim)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(np.asarray(out), (a,), bwd)


def squared_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum of squares over ``axis`` (all elements by default)."""
    a = constant(a)
    axis_n = _norm_axis(axis, a.ndim)
    out = (a.data * a.data).sum(axis=axis_n, keepdims=keepdims)

    def bwd(g):
        if axis_n is not None and not keepdims:
            g = np.expand_dims(g, axis_n)
        return (2.0 * a.data * g,)

    return _make(np.asarray(out), (a,), bwd)


# -- structure ---------------------------------------------------------

def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    if not tensors:
        raise ValueError("concatenate: empty input list")
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bwd)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = constant(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last_axes(a) -> Tensor:
    a = constant(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def expand(a, shape) -> Tensor:
    a = constant(a)
    out = np.broadcast_to(a.data, shape)
    return _make(out.copy(), (a,), lambda g: (_sum_to_shape(g, a.shape),))


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def _getitem(a, key) -> Tensor:
    a = constant(a)
    out = a.data[key]
    basic = _is_basic_key(key)

    def bwd(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.asarray(out), (a,), bwd)


def take(a, indices, axis: int = 0) -> Tensor:
    """Select ``indices`` along ``axis`` (gather); scatter-adds on backward."""
    a = constant(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def bwd(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = indices
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _make(out, (a,), bwd)


def diag_embed(v) -> Tensor:
    """Vector (..., d) to matrix (..., d, d) with v on the diagonal."""
    v = constant(v)
    d = v.shape[-1]
    out = np.zeros(v.shape + (d,))
    idx = np.arange(d)
    out[..., idx, idx] = v.data

    def bwd(g):
        return (g[..., idx, idx],)

    return _make(out, (v,), bwd)


# -- linear algebra ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a = constant(a)
    b = constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {_shape_str(a.shape)} and {_shape_str(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions mismatch ({_shape_str(a.shape)} @ {_shape_str(b.shape)})")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ValueError(f"matmul: batch extents mismatch ({_shape_str(a.shape)} @ {_shape_str(b.shape)})") from err

    def bwd(g):
        ga = _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)

    return _make(out, (a, b), bwd)


def solve(a, b) -> Tensor:
    """X with a @ X = b; a is (..., d, d), b is (..., d, k)."""
    a = constant(a)
    b = constant(b)
    try:
        out = np.linalg.solve(a.data, b.data)
    except np.linalg.LinAlgError as err:
        raise ValueError(f"solve: singular matrix ({err})") from err

    def bwd(g):
        at = np.swapaxes(a.data, -1, -2)
        gb = np.linalg.solve(at, g)
        ga = -np.matmul(gb, np.swapaxes(out, -1, -2))
        return (_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape))

    return _make(out, (a, b), bwd)


# -- backward pass -----------------------------------------------------

def _topo_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params=None) -> dict:
    """Gradients of a scalar ``root`` w.r.t. every reachable grad-tracked leaf.

    Returns ``{tensor: ndarray}``. When ``params`` (an iterable of tensors)
    is given, each of them gets an entry; leaves unreachable from the root
    receive zeros of their own shape.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {_shape_str(root.shape)}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    # Reverse topological order guarantees every consumer of a node runs its
    # backward rule before the node itself is popped, so accumulation is
    # complete at pop time.
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            if node.requires_grad:
                leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    result = {t: g for t, g in leaves.values()}
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    return result


def grad_check(f, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a tensor to a scalar tensor. Error per coordinate is
    |autodiff - central| / max(1, |central|).
    """
    leaf = Tensor(point.data.copy(), requires_grad=True)
    out = f(leaf)
    grads = backward(out, params=[leaf])
    auto = grads[leaf]
    flat = leaf.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(leaf).item()
            flat[i] = orig - step
            lo = f(leaf).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise ValueError(f"grad_check: non-finite probe at coordinate {i}")
            fd = (hi - lo) / (2.0 * step)
            err = abs(auto.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# -- optimizer ---------------------------------------------------------

class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 5e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self, grads: dict) -> None:
        """Apply one update. ``grads`` maps tensor objects or names to arrays."""
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name in sorted(self.params):
            t = self.params[name]
            g = grads.get(t) if t in grads else grads.get(name)
            if g is None:
                g = np.zeros_like(t.data)
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.data.shape:
                raise ValueError(f"adam: gradient shape {_shape_str(g.shape)} does not match "
                                 f"parameter '{name}' {_shape_str(t.data.shape)}")
            if not np.all(np.isfinite(g)):
                raise ValueError(f"adam: non-finite gradient for parameter '{name}'")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- parameter checkpoints ----------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_tensors: dict, extra: dict | None = None) -> None:
    """Write a value-exact named-parameter container (JSON + base64 floats)."""
    payload = {"format_version": CHECKPOINT_VERSION, "extra": extra or {}, "params": {}}
    for name in sorted(named_tensors):
        t = named_tensors[name]
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        payload["params"][name] = {
            "shape": list(arr.shape),
            "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
        }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path):
    """Read a checkpoint; returns (dict name -> ndarray, extra dict)."""
    with open(path, "r", encoding="ascii") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint: unsupported format_version {version!r}")
    out = {}
    for name, entry in payload["params"].items():
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        out[name] = arr
    return out, payload.get("extra", {})
