"""Dense tensors with reverse-mode automatic differentiation.

The engine is intentionally small: numpy arrays for storage, one Python
object per graph node, and one closure per node mapping the output
gradient back to the inputs. Graphs are built define-by-run, so a fresh
graph exists for every forward pass and recurrent structures (a memory
vector threaded through encoder layers) need no special handling.

Precision is a module-level mode: float32 for training, float64 when
gradients are verified against finite differences. Under the float64
verification mode every primitive additionally rejects non-finite
inputs. Within one mode, identical seeds and inputs give bit-identical
forward values and gradients; mixing dtypes inside a graph is rejected.

Conventions that tests rely on:
  * layer_norm normalizes the last axis with eps = 1e-5 inside the
    square root; a zero-variance row maps to zeros (pre-affine).
  * max_pool routes its gradient to the first maximal index on ties.
  * relu uses subgradient 0 at the kink.
  * broadcasting in add/mul follows numpy; gradients are summed back
    over the broadcast axes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes or dtypes are invalid for the requested operation."""


class NumericalError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32, "grad": True}


def set_precision(mode: str) -> None:
    """Switch the active precision mode ("float32" or "float64")."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    _state["dtype"] = _DTYPES[mode]


def active_dtype():
    return _state["dtype"]


def precision_mode() -> str:
    return "float64" if _state["dtype"] is np.float64 else "float32"


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch precision mode."""
    prev = _state["dtype"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    """A dense n-dimensional array that can participate in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._inputs = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = "leaf"
        out._inputs = ()
        out._backward = None
        return out

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable input.

        Walks the graph in reverse topological order; the order is a pure
        function of the graph structure, so accumulation is deterministic.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward: loss must be scalar, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not a primitive")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"


class Parameter:
    """A named trainable tensor. Frozen parameters never receive updates."""

    __slots__ = ("name", "tensor", "frozen", "decay")

    def __init__(self, name: str, data, frozen: bool = False, decay: bool = False):
        self.name = name
        self.tensor = Tensor(np.array(data), requires_grad=True)
        self.frozen = bool(frozen)
        self.decay = bool(decay)

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape}, frozen={self.frozen})"


def make_node(data, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Build a graph node. Public so test fixtures can craft custom ops."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    req = _state["grad"] and any(t.requires_grad for t in inputs)
    out.requires_grad = req
    out.op = op
    out._inputs = tuple(inputs) if req else ()
    out._backward = backward if req else None
    return out


def graph_size(t: Tensor) -> int:
    """Number of distinct nodes reachable from t (incl. leaves)."""
    seen = set()
    stack = [t]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.extend(node._inputs)
    return len(seen)


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _guard(op: str, *tensors: Tensor) -> None:
    # verification mode rejects non-finite inputs; dtype mixing always rejected
    first = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != first:
            raise ShapeError(f"{op}: mixed dtypes {first} and {t.data.dtype}")
    if _state["dtype"] is np.float64:
        for t in tensors:
            if not np.all(np.isfinite(t.data)):
                raise NumericalError(f"{op}: non-finite input value")


def _unbroadcast(g, shape):
    """Sum gradient g back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _guard("add", a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.data.shape} with {b.data.shape}")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return make_node(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _guard("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.data.shape} with {b.data.shape}")

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return make_node(out, (a, b), bwd, "mul")


def scale(x: Tensor, k: float) -> Tensor:
    _guard("scale", x)
    out = x.data * k

    def bwd(g):
        _accum(x, g * k)

    return make_node(out, (x,), bwd, "scale")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def add_const(x: Tensor, k: float) -> Tensor:
    _guard("add_const", x)
    out = x.data + k

    def bwd(g):
        _accum(x, g)

    return make_node(out, (x,), bwd, "add_const")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy semantics (stacked matmul, 1-d promotion)."""
    _guard("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul: scalars not allowed {ad.shape} @ {bd.shape}")
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    try:
        out2 = np.matmul(a2, b2)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")
    if ad.ndim == 1 and bd.ndim == 1:
        out = out2[..., 0, 0]
    elif ad.ndim == 1:
        out = out2[..., 0, :]
    elif bd.ndim == 1:
        out = out2[..., 0]
    else:
        out = out2

    def bwd(g):
        g2 = g
        if ad.ndim == 1 and bd.ndim == 1:
            g2 = g.reshape(g.shape + (1, 1))
        elif ad.ndim == 1:
            g2 = np.expand_dims(g, -2)
        elif bd.ndim == 1:
            g2 = np.expand_dims(g, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape).reshape(ad.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(bd.shape)
        _accum(a, ga)
        _accum(b, gb)

    return make_node(out, (a, b), bwd, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    _guard("concat", *tensors)
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ShapeError(
                f"concat: rank mismatch {tensors[0].data.shape} vs {t.data.shape}"
            )
    ax = axis % nd
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        shapes = [t.data.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes}")
    sizes = [t.data.shape[ax] for t in tensors]

    def bwd(g):
        off = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * nd
            idx[ax] = slice(off, off + s)
            _accum(t, g[tuple(idx)])
            off += s

    return make_node(out, tuple(tensors), bwd, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    _guard("slice", x)
    nd = x.data.ndim
    ax = axis % nd
    idx = [slice(None)] * nd
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        _accum(x, gx)

    return make_node(out, (x,), bwd, "slice")


def transpose(x: Tensor, axes) -> Tensor:
    _guard("transpose", x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return make_node(out, (x,), bwd, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    _guard("reshape", x)
    try:
        out = np.reshape(x.data, shape)
    except ValueError:
        raise ShapeError(f"reshape: {x.data.shape} to {shape}")

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return make_node(out, (x,), bwd, "reshape")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _guard("sum", x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg, x.data.shape))

    return make_node(out, (x,), bwd, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _guard("mean", x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    cnt = x.data.size if axis is None else x.data.shape[axis]

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg, x.data.shape) / cnt)

    return make_node(out, (x,), bwd, "mean")


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient goes to the first maximal index on ties."""
    _guard("max", x)
    idx = np.argmax(x.data, axis=axis)
    idx_e = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_e, axis=axis).squeeze(axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx_e, np.expand_dims(g, axis), axis)
        _accum(x, gx)

    return make_node(out, (x,), bwd, "max")


def mean_pool(x: Tensor) -> Tensor:
    """Pool a token grid (..., N, D) to (..., D) by averaging tokens."""
    if x.data.ndim < 2 or x.data.shape[-2] < 1:
        raise ShapeError(f"mean_pool: need at least one token, got {x.data.shape}")
    return reduce_mean(x, axis=-2)


def max_pool(x: Tensor) -> Tensor:
    """Pool a token grid (..., N, D) to (..., D) by per-channel max."""
    if x.data.ndim < 2 or x.data.shape[-2] < 1:
        raise ShapeError(f"max_pool: need at least one token, got {x.data.shape}")
    return reduce_max(x, axis=-2)


def relu(x: Tensor) -> Tensor:
    _guard("relu", x)
    out = np.maximum(x.data, 0)

    def bwd(g):
        _accum(x, g * (x.data > 0))

    return make_node(out, (x,), bwd, "relu")


def tanh(x: Tensor) -> Tensor:
    _guard("tanh", x)
    out = np.tanh(x.data)

    def bwd(g):
        _accum(x, g * (1.0 - out * out))

    return make_node(out, (x,), bwd, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    _guard("sigmoid", x)
    out = expit(x.data)

    def bwd(g):
        _accum(x, g * out * (1.0 - out))

    return make_node(out, (x,), bwd, "sigmoid")


LN_EPS = 1e-5


def layer_norm(x: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (pre-affine).

    Uses eps = 1e-5 inside the square root, so a zero-variance row maps
    to exactly zero rather than dividing by zero.
    """
    _guard("layer_norm", x)
    if x.data.shape[-1] < 1:
        raise ShapeError(f"layer_norm: empty last axis {x.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, dtype=x.data.dtype))
    out = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - out * gy))

    return make_node(out, (x,), bwd, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (numerically stable)."""
    _guard("softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(x, out * (g - dot))

    return make_node(out, (x,), bwd, "softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of (..., K) logits against integer ids."""
    _guard("cross_entropy", logits)
    k = logits.data.shape[-1]
    ids = np.asarray(targets, dtype=np.int64)
    if ids.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets {ids.shape} do not match logits {logits.data.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= k):
        raise ShapeError(f"cross_entropy: target id out of range [0, {k})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, ids[..., None], axis=-1)[..., 0]
    nll = lse - picked
    n = max(nll.size, 1)
    out = np.asarray(nll.sum() / n, dtype=logits.data.dtype)

    def bwd(g):
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, ids[..., None], 1.0, axis=-1)
        _accum(logits, (p - onehot) * (g / n))

    return make_node(out, (logits,), bwd, "cross_entropy")


COS_EPS = 1e-8


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between u and v along the last axis.

    The denominator is clamped from below at 1e-8 so zero vectors give a
    deterministic result instead of dividing by zero. Away from the clamp
    the gradient is exactly stationary at perfect alignment.
    """
    _guard("cosine", u, v)
    if u.data.shape != v.data.shape:
        raise ShapeError(f"cosine: shape mismatch {u.data.shape} vs {v.data.shape}")
    s = (u.data * v.data).sum(axis=-1)
    nu = np.sqrt((u.data * u.data).sum(axis=-1))
    nv = np.sqrt((v.data * v.data).sum(axis=-1))
    d = np.maximum(nu * nv, np.asarray(COS_EPS, dtype=u.data.dtype))
    out = s / d

    def bwd(g):
        # d cos / du = v / d - cos * u / |u|^2, norms clamped like the forward
        ge = g / d
        nu_safe = np.maximum(nu * nu, COS_EPS)
        nv_safe = np.maximum(nv * nv, COS_EPS)
        gu = ge[..., None] * v.data - (g * out / nu_safe)[..., None] * u.data
        gv = ge[..., None] * u.data - (g * out / nv_safe)[..., None] * v.data
        _accum(u, gu)
        _accum(v, gv)

    return make_node(out, (u, v), bwd, "cosine")


def xavier_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Xavier-uniform init for a (fan_in, fan_out) weight matrix."""
    fan_in, fan_out = shape[0], shape[-1]
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape)


def near_zero_uniform(rng: np.random.Generator, shape, limit: float = 1e-3) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape)
