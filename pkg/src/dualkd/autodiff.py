"""Dense float64 tensors with reverse-mode differentiation.

Small by design: exactly the operations the transformer students and their
losses need.  Forward builds a graph of Function nodes; `Tensor.backward()`
walks it once in reverse topological order and accumulates gradients into
every tensor that requires them.  Graphs are single-use: a second backward
through the same nodes raises.

Broadcasting follows numpy's trailing-axis rules.  No accelerator kernels,
no fusion, no mixed precision.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad tensor.

        self must be scalar.  Frees the graph afterwards; rerunning on the
        same graph is an error.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root")
        if self._consumed:
            raise RuntimeError(
                "graph already consumed by a previous backward; rerun the forward pass"
            )
        if not self.requires_grad:
            raise RuntimeError("root does not require grad; nothing to differentiate")

        # iterative topological sort (graphs are deep enough to bust recursion)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for p in node._ctx.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            ctx = node._ctx
            if ctx is None:
                continue
            if node._consumed:
                raise RuntimeError(
                    "graph already consumed by a previous backward; rerun the forward pass"
                )
            grads = ctx.backward(node.grad)
            if not isinstance(grads, tuple):
                grads = (grads,)
            for parent, g in zip(ctx.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            node._consumed = True
            node._ctx = None  # release references so activations free early

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, key):
        return GetItem.apply(self, key=key)

    def sum(self, axes=None):
        return Reduce.apply(self, kind="sum", axes=axes)

    def mean(self, axes=None):
        return Reduce.apply(self, kind="mean", axes=axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast in forward, back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Function:
    """One applied operation; holds parent tensors and whatever backward needs."""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = cls(*tensors)
        out_data = ctx.forward(*(t.data for t in tensors), **kwargs)
        needs_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=needs_grad)
        if needs_grad:
            out._ctx = ctx
        return out


# -- elementwise arithmetic --------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        sa, sb = self.shapes
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        sa, sb = self.shapes
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape)
        gb = _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return -g


class Sigmoid(Function):
    def forward(self, a):
        # two-branch form, stable for large |a|
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        self.out = out
        return out

    def backward(self, g):
        return g * self.out * (1.0 - self.out)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise ValueError("log requires strictly positive input")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return g / self.a


class Gelu(Function):
    """Exact Gaussian-error-function form: 0.5 x (1 + erf(x/sqrt(2)))."""

    def forward(self, a):
        self.a = a
        self.phi_big = 0.5 * (1.0 + erf(a * _INV_SQRT2))
        return a * self.phi_big

    def backward(self, g):
        density = _INV_SQRT2PI * np.exp(-0.5 * self.a * self.a)
        return g * (self.phi_big + self.a * density)


class Clip(Function):
    def forward(self, a, lo=None, hi=None):
        self.mask = np.ones_like(a, dtype=bool)
        if lo is not None:
            self.mask &= a >= lo
        if hi is not None:
            self.mask &= a <= hi
        return np.clip(a, lo, hi)

    def backward(self, g):
        return g * self.mask


# -- linear algebra ----------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul requires tensors with at least 2 axes")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ g
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class LayerNorm(Function):
    """Normalize the last axis to zero mean / unit (population) variance, then affine."""

    def forward(self, x, gamma, beta, eps=1e-6):
        if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
            raise ValueError("gamma/beta must match the last axis extent")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gamma = gamma
        return self.gamma * self.xhat + beta

    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        dxhat = g * self.gamma
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggamma, gbeta


class Softmax(Function):
    """Softmax over the last axis, shift-stabilized."""

    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        ez = np.exp(z)
        self.out = ez / ez.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return y * (g - (g * y).sum(axis=-1, keepdims=True))


class CosineSimilarity(Function):
    """dot(a,b) / max(|a| |b|, eps) over all elements; returns a scalar."""

    def forward(self, a, b, eps=1e-8):
        if a.shape != b.shape:
            raise ValueError("cosine_similarity requires equal shapes")
        self.a, self.b = a, b
        self.na = float(np.sqrt(np.sum(a * a)))
        self.nb = float(np.sqrt(np.sum(b * b)))
        self.denom = max(self.na * self.nb, eps)
        self.clamped = self.na * self.nb < eps
        self.out = float(np.sum(a * b)) / self.denom
        return np.float64(self.out)

    def backward(self, g):
        a, b, denom, c = self.a, self.b, self.denom, self.out
        if self.clamped:
            # denominator pinned at eps: treat it as constant
            return g * b / denom, g * a / denom
        ga = g * (b / denom - c * a / (self.na * self.na))
        gb = g * (a / denom - c * b / (self.nb * self.nb))
        return ga, gb


# -- shape manipulation ------------------------------------------------------


class Reshape(Function):
    def forward(self, a, shape):
        self.orig = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return g.reshape(self.orig)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes if axes else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, g):
        return np.transpose(g, np.argsort(self.axes))


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        splits = np.cumsum(self.sizes[:-1])
        return tuple(np.split(g, splits, axis=self.axis))


class GetItem(Function):
    """Basic indexing (ints/slices); gradient scatters back into place."""

    def forward(self, a, key):
        self.key = key
        self.orig = a.shape
        return a[key]

    def backward(self, g):
        out = np.zeros(self.orig)
        out[self.key] = g
        return out


# -- reductions and stochastic ops -------------------------------------------


class Reduce(Function):
    def forward(self, a, kind, axes=None):
        if kind not in ("mean", "sum"):
            raise ValueError(f"unknown reduce kind: {kind!r}")
        if axes is not None and not isinstance(axes, tuple):
            axes = (axes,) if isinstance(axes, int) else tuple(axes)
        self.orig = a.shape
        self.axes = axes if axes is not None else tuple(range(a.ndim))
        for ax in self.axes:
            if not -a.ndim <= ax < a.ndim:
                raise ValueError(f"axis {ax} out of range for shape {a.shape}")
        self.axes = tuple(ax % a.ndim for ax in self.axes)
        self.count = int(np.prod([a.shape[ax] for ax in self.axes])) if self.axes else 1
        self.kind = kind
        if kind == "sum":
            return a.sum(axis=self.axes or None)
        return a.mean(axis=self.axes or None)

    def backward(self, g):
        g = np.asarray(g)
        expanded = np.expand_dims(g, self.axes) if self.axes else g
        out = np.broadcast_to(expanded, self.orig).copy()
        if self.kind == "mean":
            out /= self.count
        return out


class Dropout(Function):
    """Inverted dropout: training zeroes with prob `rate`, scales by 1/(1-rate)."""

    def forward(self, a, rate, training, rng=None):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if not training or rate == 0.0:
            self.scale_mask = None
            return a
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = rng.random(a.shape) >= rate
        self.scale_mask = keep / (1.0 - rate)
        return a * self.scale_mask

    def backward(self, g):
        if self.scale_mask is None:
            return g
        return g * self.scale_mask


# -- public functional interface ---------------------------------------------

_UNARY = {"sigmoid": Sigmoid, "log": Log, "gelu": Gelu}
_BINARY = {"add": Add, "sub": Sub, "mul": Mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name: add, sub, mul, sigmoid, log, gelu."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind!r} needs two operands")
        return _BINARY[kind].apply(a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind!r} takes one operand")
        return _UNARY[kind].apply(a)
    raise ValueError(f"unknown elementwise kind: {kind!r}")


def reduce(kind: str, x, axes=None) -> Tensor:
    """Dispatch a reduction by name: mean or sum."""
    return Reduce.apply(x, kind=kind, axes=axes)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def log(x) -> Tensor:
    return Log.apply(x)


def gelu(x) -> Tensor:
    return Gelu.apply(x)


def clip(x, lo=None, hi=None) -> Tensor:
    return Clip.apply(x, lo=lo, hi=hi)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def softmax(x) -> Tensor:
    return Softmax.apply(x)


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    return CosineSimilarity.apply(a, b, eps=eps)


def dropout(x, rate: float, training: bool, rng=None) -> Tensor:
    return Dropout.apply(x, rate=rate, training=training, rng=rng)


def concat(tensors, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def backward(root: Tensor) -> None:
    """Free-function form of Tensor.backward."""
    root.backward()
