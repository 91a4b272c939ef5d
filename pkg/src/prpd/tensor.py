"""Dense float64 tensors with reverse-mode differentiation.

Only what the learner needs: elementwise math, matmul, reductions and a
handful of loss-building helpers. Every op records a closure that maps the
output gradient to parent gradients; ``backprop`` walks the graph in reverse
topological order.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class TrainingDivergenceError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __pow__ = lambda self, p: power(self, p)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def logaddexp(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.data, b.data)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * np.exp(a.data - out), a.shape),
                            _unbroadcast(g * np.exp(b.data - out), b.shape)))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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


def backprop(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params`` listed here but absent from the graph end up with a zero grad
    rather than ``None``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backprop needs a scalar loss, got shape {loss.shape}")
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- networks -------------------------------------------------------------


class Mlp:
    """Fully connected net: tanh on hidden layers, identity on the output."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator | None = None,
                 out_scale: float = 1.0):
        if len(widths) < 2 or any(int(w) <= 0 for w in widths):
            raise ShapeError(f"bad layer widths {widths}")
        self.widths = [int(w) for w in widths]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            scale = np.sqrt(1.0 / fan_in)
            if i == len(self.widths) - 2:
                scale *= out_scale
            self.weights.append(Tensor(rng.normal(0.0, scale, (fan_in, fan_out)), requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass; bit-identical to ``mlp_forward``."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.tanh(h)
        return h


def mlp_forward(net: Mlp, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != net.widths[0]:
        raise ShapeError(f"input width {x.shape[-1]} != {net.widths[0]}")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = matmul(h, w) + b
        if i < last:
            h = tanh(h)
    return h


@dataclass
class GaussianHead:
    """Diagonal Gaussian with state-independent log std."""

    mean: Tensor
    log_std: Tensor

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)


def clamp_log_std(log_std: Tensor) -> None:
    np.clip(log_std.data, LOG_STD_MIN, LOG_STD_MAX, out=log_std.data)


def gaussian_log_prob(head: GaussianHead, action) -> Tensor:
    action = as_tensor(action)
    if action.shape[-1] != head.mean.shape[-1]:
        raise ShapeError(f"action dim {action.shape[-1]} != {head.mean.shape[-1]}")
    z = (action - head.mean) / exp(head.log_std)
    per_dim = square(z) * -0.5 - head.log_std - _HALF_LOG_2PI
    return tsum(per_dim, axis=-1)


def gaussian_kl(p: GaussianHead, q: GaussianHead) -> Tensor:
    """Closed-form KL(p || q) summed over action dims."""
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ShapeError("KL between heads of different dimension")
    var_p = exp(p.log_std * 2.0)
    var_q = exp(q.log_std * 2.0)
    per_dim = (q.log_std - p.log_std) + (var_p + square(p.mean - q.mean)) / (var_q * 2.0) - 0.5
    return tsum(per_dim, axis=-1)


def gaussian_entropy(log_std: Tensor) -> Tensor:
    return tsum(log_std + (0.5 + _HALF_LOG_2PI), axis=-1)


# --- optimiser -----------------------------------------------------------


@dataclass
class AdamState:
    params: list[Tensor]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]
            self.t = [0 for _ in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(state: AdamState) -> None:
    """Apply one Adam update from the params' ``.grad`` buffers.

    A parameter whose gradient is identically zero (or missing) is skipped
    entirely, moments included, so it never drifts on stale momentum.
    """
    for p in state.params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergenceError("non-finite gradient in Adam step")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(state.params):
        g = p.grad
        if g is None or not g.any():
            continue
        state.t[i] += 1
        t = state.t[i]
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --- checks and fingerprints ---------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(net: Mlp, tolerance: float = 1e-4, rng: np.random.Generator | None = None,
               batch: int = 3, h: float = 1e-5, atol: float = 1e-6) -> GradCheckReport:
    """Compare backprop against central finite differences on a random loss.

    Relative error per entry is ``|a - n| / max(|a| + |n|, atol)``.
    """
    rng = rng if rng is not None else np.random.default_rng(1)
    x = rng.normal(size=(batch, net.widths[0]))
    w_out = rng.normal(size=(batch, net.widths[-1]))

    def loss_value() -> float:
        return float(np.sum(w_out * np.sin(net.predict(x))))

    params = net.parameters()
    for p in params:
        p.grad = None
    out = mlp_forward(net, x)
    loss = tsum(mul(w_out, _sin(out)))
    backprop(loss, params)

    worst, count = 0.0, 0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_value()
            flat[j] = orig - h
            down = loss_value()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            err = abs(analytic[j] - numeric) / max(abs(analytic[j]) + abs(numeric), atol)
            worst = max(worst, err)
            count += 1
    return GradCheckReport(worst, tolerance, count)


def _sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def param_hash(params: Iterable[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
