"""Small reverse-mode autodiff over dense float64 matrices.

Only what the bisection and actor-critic networks need: elementwise
arithmetic with broadcasting, matmul, products with constant sparse
matrices, tanh, row and column softmax, reductions and row gathers.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
import scipy.sparse as sp


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A value in the recorded computation; ``grad`` is filled by ``backward``."""

    __array_priority__ = 100

    def __init__(self, data, parents=(), backward_fn=None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar; gradients accumulate on every tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return gather_rows(self, rows)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def spmm(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Product with a constant sparse matrix."""
    mt = matrix.T.tocsr()
    return Tensor(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor(out, (x,), lambda g: (g * (1.0 - out ** 2),))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), (x,), lambda g: (g / x.data,))


def total(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return Tensor(out, (x,), bw)


def mean(x: Tensor) -> Tensor:
    return total(x) * (1.0 / x.data.size)


def _softmax_axis(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def softmax_rows(x: Tensor) -> Tensor:
    return _softmax_axis(x, 1)


def softmax_nodes(x: Tensor) -> Tensor:
    """Softmax down the node axis of an ``(N, 1)`` column."""
    return _softmax_axis(x, 0)


def masked_log_softmax_nodes(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Log-probabilities over the allowed entries of an ``(N, 1)`` column;
    disallowed entries get ``-inf`` and zero gradient."""
    allowed = np.asarray(allowed, dtype=bool).reshape(x.shape)
    if not allowed.any():
        raise ValueError("no allowed entries to normalise over")
    z = np.where(allowed, x.data, -np.inf)
    zmax = z[allowed].max()
    lse = zmax + np.log(np.exp(z[allowed] - zmax).sum())
    out = z - lse
    probs = np.where(allowed, np.exp(out), 0.0)

    def bw(g):
        gm = np.where(allowed, g, 0.0)
        return (gm - probs * gm.sum(),)
    return Tensor(out, (x,), bw)


def gather_rows(x: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, rows, g)
        return (out,)
    return Tensor(x.data[rows], (x,), bw)


def concat_cols(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, widths[k]:widths[k + 1]] for k in range(len(parts)))
    return Tensor(np.hstack([p.data for p in parts]), tuple(parts), bw)


# ----------------------------------------------------------------------
# layers

class Module:
    """Parameter container; ``named_parameters`` walks attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                out.append((prefix + name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + name + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for k, m in enumerate(val):
                    out.extend(m.named_parameters(f"{prefix}{name}.{k}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        if [k for k, _ in params] != list(state.keys()):
            raise ValueError("parameter names do not match")
        for k, p in params:
            if p.data.shape != np.shape(state[k]):
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {np.shape(state[k])}")
            p.data = np.array(state[k], dtype=np.float64)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, n_in, (n_in, n_out))
        self.bias = _uniform(rng, n_in, (1, n_out))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.n_in:
            raise ValueError(f"Dense expects {self.n_in} features, got {x.shape[1]}")
        return x @ self.weight + self.bias


def sage_conv(x: Tensor, mean_adj: sp.spmatrix, w_self, w_neigh, bias) -> Tensor:
    """``x W_self + mean_{neighbours}(x) W_neigh + b``; isolated nodes aggregate zeros."""
    x = as_tensor(x)
    if x.shape[1] != w_self.shape[0] or x.shape[1] != w_neigh.shape[0]:
        raise ValueError(f"feature width {x.shape[1]} does not match weights {w_self.shape}")
    if mean_adj.shape[0] != x.shape[0]:
        raise ValueError("neighbour structure does not match node count")
    return x @ w_self + spmm(mean_adj, x) @ w_neigh + bias


class SageConv(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.w_self = _uniform(rng, n_in, (n_in, n_out))
        self.w_neigh = _uniform(rng, n_in, (n_in, n_out))
        self.bias = _uniform(rng, n_in, (1, n_out))

    def __call__(self, x: Tensor, mean_adj: sp.spmatrix) -> Tensor:
        return sage_conv(x, mean_adj, self.w_self, self.w_neigh, self.bias)


class AttentionalAggregation(Module):
    """Softmax-gated sum of transformed node features, giving a ``(1, n_out)`` row."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.gate = Dense(n_in, 1, rng)
        self.transform = Dense(n_in, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        weights = softmax_nodes(self.gate(x))
        return total(weights * self.transform(x), axis=0, keepdims=True)


# ----------------------------------------------------------------------
# optimiser

class Adam:
    """Adam with decoupled weight decay (decay first, then the moment update)."""

    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads=None) -> None:
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
