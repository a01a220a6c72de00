"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

The tape is the classic dynamic graph: every op produces a new Tensor holding
its parents and a backward closure. `backward()` walks the graph iteratively
(rollouts produce graphs deeper than Python's recursion limit) and accumulates
gradients into leaf tensors; intermediate grads are reset per backward call so
a shared subgraph can be traversed by several partial losses without double
counting.

Everything runs in float64 by default so finite-difference checks are
meaningful; call `set_default_dtype("float32")` to trade precision for speed.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, TapeUsageError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_NODE_COUNTER = 0


def set_default_dtype(dtype) -> None:
    """Switch the engine between float64 (default) and float32."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable taping inside the block; ops return detached tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """Dense float array recorded on the autodiff tape.

    grad is lazily allocated and always matches the data shape. Tensors built
    while `no_grad()` is active, or via `detach()`, never join the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_node_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        global _NODE_COUNTER
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None
        _NODE_COUNTER += 1
        self._node_id = _NODE_COUNTER

    # -- bookkeeping ------------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._scalar_error()

    def _scalar_error(self):
        raise DimensionError("item() requires a scalar tensor", expected=(), got=self.shape)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def _make(self, data: np.ndarray, parents: Sequence["Tensor"], bw: Callable[[], None]) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = bw
        return out

    # -- arithmetic -------------------------------------------------------

    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._wrap(other)
        out_data = self.data + other.data

        def bw():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad, other.data.shape))

        out = self._make(out_data, (self, other), bw)
        return out

    __radd__ = __add__

    def __neg__(self):
        def bw():
            if self.requires_grad:
                self._accumulate(-out.grad)

        out = self._make(-self.data, (self,), bw)
        return out

    def __sub__(self, other):
        other = self._wrap(other)
        out_data = self.data - other.data

        def bw():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-out.grad, other.data.shape))

        out = self._make(out_data, (self, other), bw)
        return out

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        other = self._wrap(other)
        out_data = self.data * other.data

        def bw():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad * self.data, other.data.shape))

        out = self._make(out_data, (self, other), bw)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        out_data = self.data / other.data

        def bw():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-out.grad * self.data / (other.data * other.data), other.data.shape))

        out = self._make(out_data, (self, other), bw)
        return out

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** exponent

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad * exponent * self.data ** (exponent - 1))

        out = self._make(out_data, (self,), bw)
        return out

    # -- elementwise nonlinearities ----------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad * out_data)

        out = self._make(out_data, (self,), bw)
        return out

    def log(self):
        def bw():
            if self.requires_grad:
                self._accumulate(out.grad / self.data)

        out = self._make(np.log(self.data), (self,), bw)
        return out

    def sqrt(self, grad_floor: float = 1e-12):
        """Exact forward sqrt; the backward denominator is clamped away from 0."""
        root = np.sqrt(self.data)

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad * 0.5 / np.maximum(root, grad_floor))

        out = self._make(root, (self,), bw)
        return out

    def sin(self):
        def bw():
            if self.requires_grad:
                self._accumulate(out.grad * np.cos(self.data))

        out = self._make(np.sin(self.data), (self,), bw)
        return out

    def cos(self):
        def bw():
            if self.requires_grad:
                self._accumulate(-out.grad * np.sin(self.data))

        out = self._make(np.cos(self.data), (self,), bw)
        return out

    def relu(self):
        mask = self.data > 0

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad * mask)

        out = self._make(np.where(mask, self.data, 0.0), (self,), bw)
        return out

    def sigmoid(self):
        # numerically stable logistic
        s = np.where(self.data >= 0, 1.0 / (1.0 + np.exp(-self.data)),
                     np.exp(self.data) / (1.0 + np.exp(self.data)))

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad * s * (1.0 - s))

        out = self._make(s, (self,), bw)
        return out

    def softplus(self):
        # log(1 + exp(x)) without overflow; derivative is the logistic
        x = self.data
        sp = np.logaddexp(0.0, x)

        def bw():
            if self.requires_grad:
                sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
                self._accumulate(out.grad * sig)

        out = self._make(sp, (self,), bw)
        return out

    def maximum(self, const: float):
        mask = self.data > const

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad * mask)

        out = self._make(np.maximum(self.data, const), (self,), bw)
        return out

    def minimum(self, const: float):
        mask = self.data < const

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad * mask)

        out = self._make(np.minimum(self.data, const), (self,), bw)
        return out

    # -- reductions and shape ops ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw():
            if self.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        out = self._make(out_data, (self,), bw)
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else (
            np.prod([self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def cumsum(self, axis: int):
        out_data = np.cumsum(self.data, axis=axis)

        def bw():
            if self.requires_grad:
                g = np.flip(np.cumsum(np.flip(out.grad, axis=axis), axis=axis), axis=axis)
                self._accumulate(g)

        out = self._make(out_data, (self,), bw)
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad.reshape(orig))

        out = self._make(self.data.reshape(shape), (self,), bw)
        return out

    def transpose2d(self):
        if self.data.ndim != 2:
            raise DimensionError("transpose2d needs a matrix", expected=2, got=self.data.ndim)

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad.T)

        out = self._make(self.data.T.copy(), (self,), bw)
        return out

    def matmul(self, other: "Tensor"):
        """2-D matrix product; use reshape to fold leading batch axes."""
        other = self._wrap(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise DimensionError("matmul operands must be 2-D",
                                 expected="2-D x 2-D", got=(self.data.ndim, other.data.ndim))
        if self.data.shape[1] != other.data.shape[0]:
            raise DimensionError("matmul inner dimensions differ",
                                 expected=self.data.shape[1], got=other.data.shape[0])
        out_data = self.data @ other.data

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ out.grad)

        out = self._make(out_data, (self, other), bw)
        return out

    def __matmul__(self, other):
        return self.matmul(other)

    def slice_axis(self, axis: int, start: int, length: int):
        """Contiguous slice along one axis; backward scatters into zeros."""
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)

        def bw():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                g[idx] = out.grad
                self._accumulate(g)

        out = self._make(self.data[idx].copy(), (self,), bw)
        return out

    def gather_rows(self, index: np.ndarray):
        """Select rows (axis 0) by integer index; backward is scatter-add."""
        index = np.asarray(index, dtype=np.int64)

        def bw():
            if self.requires_grad:
                self._accumulate(scatter_add_rows(out.grad, index, self.data.shape))

        out = self._make(self.data[index], (self,), bw)
        return out

    def segment_sum(self, segment_ids: np.ndarray, num_segments: int):
        """Sum rows into `num_segments` buckets given sorted-or-not int ids."""
        segment_ids = np.asarray(segment_ids, dtype=np.int64)
        out_shape = (num_segments,) + self.data.shape[1:]
        out_data = scatter_add_rows(self.data, segment_ids, out_shape)

        def bw():
            if self.requires_grad:
                self._accumulate(out.grad[segment_ids])

        out = self._make(out_data, (self,), bw)
        return out

    # -- autodiff driver ----------------------------------------------------

    def backward(self, free_graph: bool = True) -> None:
        """Backpropagate from this scalar.

        Leaf gradients accumulate across calls; intermediate node grads are
        reset at the start of every walk so chunked losses over a shared
        subgraph add up correctly. With `free_graph` the walked subgraph drops
        its parent links afterwards to release memory.
        """
        if self.data.size != 1:
            raise TapeUsageError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad or self._backward is None:
            raise TapeUsageError("backward called on a tensor detached from the tape")

        topo = self._toposort()
        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
        if free_graph:
            for node in topo:
                if node._parents:
                    node._parents = ()
                    node._backward = None

    def _toposort(self):
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return topo


def scatter_add_rows(values: np.ndarray, index: np.ndarray, out_shape: tuple) -> np.ndarray:
    """Deterministic row scatter-add via per-column bincount."""
    n = out_shape[0]
    if values.shape[0] == 0:
        return np.zeros(out_shape, dtype=values.dtype)
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(values.dtype, copy=False)
    flat = values.reshape(values.shape[0], -1)
    cols = [np.bincount(index, weights=flat[:, c], minlength=n) for c in range(flat.shape[1])]
    out = np.stack(cols, axis=1).astype(values.dtype, copy=False)
    return out.reshape(out_shape)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [Tensor._wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else out_data.ndim + axis
    offsets = np.cumsum([0] + [t.data.shape[ax] for t in tensors])

    def bw():
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out_data.ndim
                idx[ax] = slice(start, stop)
                t._accumulate(out.grad[tuple(idx)])

    out = tensors[0]._make(out_data, tuple(tensors), bw)
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# -- positional encoding ----------------------------------------------------

def positional_encode(v: Tensor, levels: int) -> Tensor:
    """Sinusoidal features: per component (sin 2^0 pi v, cos 2^0 pi v, ..., sin 2^{L-1} pi v, cos 2^{L-1} pi v).

    Output width is 2 * levels * width(v); components stay in [-1, 1].
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    v = Tensor._wrap(v)
    lead = v.data.shape[:-1]
    d = v.data.shape[-1]
    freqs = Tensor((2.0 ** np.arange(levels)) * math.pi)
    ang = v.reshape(lead + (d, 1)) * freqs                     # [..., d, L]
    sin = ang.sin().reshape(lead + (d, levels, 1))
    cos = ang.cos().reshape(lead + (d, levels, 1))
    enc = concat([sin, cos], axis=-1)                          # [..., d, L, 2]
    return enc.reshape(lead + (2 * levels * d,))


# -- MLP ---------------------------------------------------------------------

ACTIVATIONS = ("relu", "sigmoid", "none")


@dataclass
class MlpSpec:
    """Fully-connected stack: layer_widths[0] is the input width."""

    layer_widths: list
    activations: list          # one of ACTIVATIONS per non-input layer
    seed: int = 0

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        if len(self.activations) != len(self.layer_widths) - 1:
            raise ValueError("one activation per layer required")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")


def he_uniform_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp_params(spec: MlpSpec, prefix: str = "mlp") -> dict:
    """He-style uniform fan-in init with the spec's recorded seed; zero biases."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    for i, (w_in, w_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        params[f"{prefix}/w{i}"] = parameter(he_uniform_init(w_in, w_out, rng), name=f"{prefix}/w{i}")
        params[f"{prefix}/b{i}"] = parameter(np.zeros(w_out), name=f"{prefix}/b{i}")
    return params


def _apply_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "sigmoid":
        return x.sigmoid()
    return x


def forward_mlp(spec: MlpSpec, params: dict, x: Tensor, prefix: str = "mlp") -> Tensor:
    """Run the MLP on [..., in] input; result is recorded on the tape."""
    x = Tensor._wrap(x)
    if x.data.shape[-1] != spec.layer_widths[0]:
        raise DimensionError("MLP input width mismatch",
                             expected=spec.layer_widths[0], got=x.data.shape[-1])
    lead = x.data.shape[:-1]
    h = x.reshape((-1, spec.layer_widths[0])) if len(lead) != 1 else x
    for i, act in enumerate(spec.activations):
        h = h.matmul(params[f"{prefix}/w{i}"]) + params[f"{prefix}/b{i}"]
        h = _apply_activation(h, act)
    if len(lead) != 1:
        h = h.reshape(lead + (spec.layer_widths[-1],))
    return h


class Linear:
    """Affine layer y = x @ w + b with He-uniform weights."""

    def __init__(self, w_in: int, w_out: int, rng: np.random.Generator, name: str, zero: bool = False):
        w = np.zeros((w_in, w_out)) if zero else he_uniform_init(w_in, w_out, rng)
        self.w = parameter(w, name=f"{name}/w")
        self.b = parameter(np.zeros(w_out), name=f"{name}/b")
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.data.shape[:-1]
        if x.data.ndim == 2:
            return x.matmul(self.w) + self.b
        flat = x.reshape((-1, x.data.shape[-1]))
        return (flat.matmul(self.w) + self.b).reshape(lead + (self.w.data.shape[1],))

    def parameters(self) -> list:
        return [self.w, self.b]


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    """Standard Adam with bias correction; moments keyed by parameter name."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.lr < 0 or self.eps <= 0:
            raise ValueError("lr must be >= 0 and eps > 0")


def adam_step(state: AdamState, params: Sequence[Tensor], lr: Optional[float] = None) -> None:
    """Apply one Adam update in place. Every parameter must carry a gradient."""
    state.step_count += 1
    t = state.step_count
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        if p.grad is None:
            raise TapeUsageError(f"parameter {p.name or i} has no gradient; run backward first")
        key = p.name if p.name is not None else f"param{i}"
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[key] = m
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * (p.grad * p.grad)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
