#!/usr/bin/env python3
"""
Autodiff Core Module
Small reverse-mode differentiation engine on top of numpy (float64)
Provides the tensor ops used by the actor/critic networks, an Adam optimizer
and a central finite-difference gradient checker
"""

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up for an op"""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (rollout collection, causal-effect evaluation)"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class Tensor:
    """Dense float64 array that records the op that produced it"""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data: Any, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._op = "leaf"
        self._inputs: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # Basic properties

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    # Operator sugar

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(as_tensor(other), neg(self))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return divide(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return divide(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return gather(self, index)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = op
        out._inputs = tuple(inputs)
        out._backward = backward_fn
    return out


# Graph and backward pass

@dataclass
class GraphNode:
    """One recorded op: kind, input refs, output ref"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor


@dataclass
class Graph:
    """Topologically ordered op records reachable from a root tensor"""
    nodes: List[GraphNode] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in tensor._inputs:
                if id(parent) not in visited:
                    stack.append((parent, False))
        nodes = [GraphNode(t._op, t._inputs, t) for t in order if t._backward is not None]
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into `.grad` of every requires_grad leaf"""
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_root(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(graph.nodes):
        out_grad = grads.pop(id(node.output), None)
        if out_grad is None:
            continue
        input_grads = node.output._backward(out_grad)
        for tensor, g in zip(node.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if tensor._backward is None:
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            elif key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    if loss._backward is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    return graph


# Elementwise and structural ops

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "multiply", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def divide(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, "divide", (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _grad(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, "matmul", (a, b), _grad)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes"""
    return _make(np.swapaxes(a.data, -1, -2), "transpose", (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]} ({e})")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(data, "concat", tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def gather(a: Tensor, index) -> Tensor:
    """Basic slicing or fancy-index gather, i.e. a[index]"""
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def _grad(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(a.data[index], "gather", (a,), _grad)


def where(condition: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.data, b.data), "where", (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split form keeps exp() from overflowing on either tail
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float = 1e-10) -> Tensor:
    """Natural log with inputs clamped to `floor`"""
    x = np.maximum(a.data, floor)
    live = a.data >= floor
    return _make(np.log(x), "log", (a,), lambda g: (np.where(live, g / x, 0.0),))


def clip(a: Tensor, low: ArrayLike, high: ArrayLike) -> Tensor:
    lo = low.data if isinstance(low, Tensor) else np.asarray(low, dtype=np.float64)
    hi = high.data if isinstance(high, Tensor) else np.asarray(high, dtype=np.float64)
    out = np.minimum(np.maximum(a.data, lo), hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, "clip", (a,), lambda g: (np.where(inside, g, 0.0),))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _make(np.where(pick_a, a.data, b.data), "minimum", (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), sa),
                            _unbroadcast(np.where(pick_a, 0.0, g), sb)))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _make(np.where(pick_a, a.data, b.data), "maximum", (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), sa),
                            _unbroadcast(np.where(pick_a, 0.0, g), sb)))


def tensor_sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def _grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), _grad)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, no path back to a's producers"""
    return Tensor(a.data.copy())


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-subtracted softmax; entries where `mask` is False get probability 0"""
    data = x.data
    if data.shape[axis] < 1:
        raise DimensionError(f"softmax over empty axis {axis} of shape {data.shape}")
    if mask is None:
        shifted = data - data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        peak = np.where(m, data, -np.inf).max(axis=axis, keepdims=True)
        peak = np.where(np.isfinite(peak), peak, 0.0)
        e = np.where(m, np.exp(np.where(m, data - peak, 0.0)), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def _grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), _grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift"""
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gd = gain.data
    out = xhat * gd + bias.data

    def _grad(g):
        dxhat = g * gd
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _make(out, "layer_norm", (x, gain, bias), _grad)


# Composite ops

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias; a 1-D x is treated as a single row"""
    if x.ndim == 1:
        row = linear(reshape(x, (1, x.shape[0])), weight, bias)
        return reshape(row, (weight.shape[-1],))
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def gru_cell(x: Tensor, h: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """
    Gated recurrent unit update
    params: w_x (d_in, 3*d_h), w_h (d_h, 3*d_h), b_x (3*d_h), b_h (3*d_h)
    gate order in the packed matrices: reset, update, candidate
    """
    w_x, w_h, b_x, b_h = params["w_x"], params["w_h"], params["b_x"], params["b_h"]
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
        h = reshape(h, (1, h.shape[0]))
    d_h = h.shape[-1]
    if w_x.shape != (x.shape[-1], 3 * d_h) or w_h.shape != (d_h, 3 * d_h):
        raise DimensionError(
            f"gru_cell shape mismatch: x {x.shape}, h {h.shape}, w_x {w_x.shape}, w_h {w_h.shape}")

    gx = linear(x, w_x, b_x)
    gh = linear(h, w_h, b_h)
    r = sigmoid(gx[..., :d_h] + gh[..., :d_h])
    z = sigmoid(gx[..., d_h:2 * d_h] + gh[..., d_h:2 * d_h])
    n = tanh(gx[..., 2 * d_h:] + r * gh[..., 2 * d_h:])
    h_new = (1.0 - z) * n + z * h
    return reshape(h_new, (d_h,)) if squeeze else h_new


def kl_categorical(p: ArrayLike, q: ArrayLike, floor: float = 1e-10) -> Tensor:
    """KL(p || q) over the last axis; 0*log(0/q) is taken as 0"""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_categorical length mismatch: {p.shape} vs {q.shape}")
    support = p.data > 0
    ratio = log(where(support, p, 1.0)) - log(clip(q, floor, np.inf))
    return tensor_sum(where(support, p * ratio, 0.0), axis=-1)


def categorical_entropy(p: Tensor) -> Tensor:
    support = p.data > 0
    return neg(tensor_sum(where(support, p * log(where(support, p, 1.0)), 0.0), axis=-1))


# Parameter utilities

def parameter(shape: Tuple[int, ...], rng: np.random.Generator, scale: Optional[float] = None,
              name: str = "", zero: bool = False) -> Tensor:
    """Fan-in scaled normal init (or zeros)"""
    if zero:
        return Tensor(np.zeros(shape), requires_grad=True, name=name)
    fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
    std = scale if scale is not None else 1.0 / np.sqrt(fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm"""
    params = list(params)
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    """Adam update rule over a named parameter collection"""

    def __init__(self, params: Dict[str, Tensor], lr: float = 7e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v: Dict[str, np.ndarray] = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        """Moments and step counter as named arrays (checkpointing)"""
        state = {f"{prefix}.t": np.array([float(self.t)])}
        for key in self.params:
            state[f"{prefix}.m.{key}"] = self.m[key]
            state[f"{prefix}.v.{key}"] = self.v[key]
        return state

    def load_state_tensors(self, prefix: str, state: Dict[str, np.ndarray]):
        moments = {}
        for key, p in self.params.items():
            for kind in ("m", "v"):
                name = f"{prefix}.{kind}.{key}"
                if name not in state:
                    raise DimensionError(f"Missing optimizer state {name}")
                value = np.array(state[name], dtype=np.float64)
                if value.shape != p.data.shape:
                    raise DimensionError(f"Optimizer state {name}: stored shape {value.shape} != expected {p.data.shape}")
                moments[name] = value
        if f"{prefix}.t" not in state:
            raise DimensionError(f"Missing optimizer state {prefix}.t")
        self.t = int(state[f"{prefix}.t"][0])
        for key in self.params:
            self.m[key] = moments[f"{prefix}.m.{key}"]
            self.v[key] = moments[f"{prefix}.v.{key}"]


# Gradient checking

def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite difference of scalar fn() w.r.t. tensor.data"""
    grad = np.zeros_like(tensor.data)
    with no_grad():
        for idx in np.ndindex(*tensor.data.shape):
            original = tensor.data[idx]
            tensor.data[idx] = original + h
            plus = fn().item()
            tensor.data[idx] = original - h
            minus = fn().item()
            tensor.data[idx] = original
            grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-6) -> float:
    """max |a-n| / max(|a|+|n|, atol) elementwise"""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), atol)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between backward() and finite differences"""
    for t in tensors:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(fn, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
