"""Dense float64 tensors with reverse-mode gradient accumulation.

Small tape-based engine: each op returns a new Tensor whose backward
closure adds into the gradients of its parents.  Gradients accumulate
additively; callers zero them between optimization steps.
"""

from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class OddExtent(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev",
                 "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Run reverse-mode accumulation from this (scalar) tensor."""
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar tensor")
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
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add g into t's gradient accumulator (no-op for non-grad leaves)."""
    if not (t.requires_grad or t._prev):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[Tensor], None]) -> Tensor:
    """Create a recorded op node.

    backward receives the output node and must push gradients into the
    parents via accumulate().  Recording is skipped when no parent needs
    gradients.
    """
    out = Tensor(data)
    if any(p.requires_grad or p._prev for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        # weak self-reference: a closure holding the node itself would form
        # a cycle, keeping every step's whole graph alive until cycle GC
        ref = weakref.ref(out)
        out._backward = lambda: backward(ref())
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(out: Tensor) -> None:
        accumulate(a, out.grad)
        accumulate(b, out.grad)

    return make_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(out: Tensor) -> None:
        accumulate(a, out.grad)
        accumulate(b, -out.grad)

    return make_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(out: Tensor) -> None:
        accumulate(a, out.grad * b.data)
        accumulate(b, out.grad * a.data)

    return make_op(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(out: Tensor) -> None:
        accumulate(a, out.grad * c)

    return make_op(a.data * c, (a,), bwd)


def shift(a: Tensor, c: float) -> Tensor:
    """Add a scalar constant."""
    def bwd(out: Tensor) -> None:
        accumulate(a, out.grad)

    return make_op(a.data + float(c), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # stable two-branch evaluation
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(out: Tensor) -> None:
        accumulate(a, out.grad * out.data * (1.0 - out.data))

    return make_op(y, (a,), bwd)


def elementwise(name: str, *operands) -> Tensor:
    """Dispatch by op name: sigmoid, add, mul, sub take tensors; scale
    takes (tensor, scalar)."""
    table = {"sigmoid": sigmoid, "add": add, "mul": mul, "sub": sub,
             "scale": scale}
    if name not in table:
        raise ValueError(f"unknown elementwise op {name!r}")
    return table[name](*operands)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def bwd(out: Tensor) -> None:
        accumulate(a, out.grad * 0.5 / y)

    return make_op(y, (a,), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")

    def bwd(out: Tensor) -> None:
        accumulate(a, out.grad / b.data)
        accumulate(b, -out.grad * a.data / (b.data * b.data))

    return make_op(a.data / b.data, (a, b), bwd)


def index(a: Tensor, i: int) -> Tensor:
    """Scalar view of element i of a 1-D tensor."""
    def bwd(out: Tensor) -> None:
        g = np.zeros_like(a.data)
        g[i] = out.grad
        accumulate(a, g)

    return make_op(np.asarray(a.data[i]), (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(out: Tensor) -> None:
        accumulate(a, out.grad.reshape(a.data.shape))

    return make_op(a.data.reshape(shape), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(out: Tensor) -> None:
        accumulate(a, np.full_like(a.data, out.grad / n))

    return make_op(np.asarray(a.data.mean()), (a,), bwd)


# ---------------------------------------------------------------------------
# linear / conv layers

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [B, D] x [D, M] + [M] -> [B, M]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeMismatch("fully_connected expects 2-D x, 2-D weight, 1-D bias")
    if x.data.shape[1] != weight.data.shape[0] or weight.data.shape[1] != bias.data.shape[0]:
        raise ShapeMismatch(
            f"fully_connected: x{x.data.shape} w{weight.data.shape} b{bias.data.shape}")

    def bwd(out: Tensor) -> None:
        accumulate(x, out.grad @ weight.data.T)
        accumulate(weight, x.data.T @ out.grad)
        accumulate(bias, out.grad.sum(axis=0))

    return make_op(x.data @ weight.data + bias.data, (x, weight, bias), bwd)


def _im2col(xp: np.ndarray, k: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + oh, j:j + ow]
    return cols


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation [B,Cin,H,W] * [Cout,Cin,k,k]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-D input and kernel")
    b, cin, h, w = x.data.shape
    cout, cin_k, k, k2 = kernel.data.shape
    if cin != cin_k or k != k2:
        raise ShapeMismatch(f"conv2d: input {x.data.shape} vs kernel {kernel.data.shape}")
    oh = h + 2 * padding - k + 1
    ow = w + 2 * padding - k + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"conv2d: output extent {oh}x{ow} below 1")

    def pad(arr: np.ndarray) -> np.ndarray:
        if padding == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    ckk = cin * k * k
    cols = _im2col(pad(x.data), k, oh, ow).reshape(b, ckk, oh * ow)
    kmat = kernel.data.reshape(cout, ckk)
    y = (kmat @ cols).reshape(b, cout, oh, ow)

    def bwd(out: Tensor) -> None:
        g = out.grad.reshape(b, cout, oh * ow)
        # rebuild cols from the saved input rather than caching them
        cols_b = _im2col(pad(x.data), k, oh, ow).reshape(b, ckk, oh * ow)
        dk = np.einsum("bol,bcl->oc", g, cols_b, optimize=True)
        accumulate(kernel, dk.reshape(cout, cin, k, k))
        dcols = (kmat.T @ g).reshape(b, cin, k, k, oh, ow)
        dxp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, i, j]
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        accumulate(x, dxp)

    return make_op(y, (x, kernel), bwd)


def avg_pool2d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling."""
    if x.data.ndim != 4:
        raise ShapeMismatch("avg_pool2d expects 4-D input")
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise OddExtent(f"avg_pool2d: extents {h}x{w} not even")
    y = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(out: Tensor) -> None:
        g = np.repeat(np.repeat(out.grad, 2, axis=2), 2, axis=3) * 0.25
        accumulate(x, g)

    return make_op(y, (x,), bwd)


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeMismatch(f"softmax_cross_entropy: {logits.data.shape} vs {labels.shape}")
    b, k = logits.data.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(b), labels] - np.log(ez.sum(axis=1)))

    def bwd(out: Tensor) -> None:
        g = p.copy()
        g[np.arange(b), labels] -= 1.0
        accumulate(logits, out.grad * g / b)

    return make_op(np.asarray(nll.mean()), (logits,), bwd)


def mean_squared(pred: Tensor, target: Tensor) -> Tensor:
    _check_same_shape(pred, target, "mean_squared")
    diff = pred.data - target.data
    n = diff.size

    def bwd(out: Tensor) -> None:
        accumulate(pred, out.grad * 2.0 * diff / n)
        accumulate(target, -out.grad * 2.0 * diff / n)

    return make_op(np.asarray((diff * diff).mean()), (pred, target), bwd)


# ---------------------------------------------------------------------------
# gradient-check oracle (independent of the tape)

def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor,
                               h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, coordinate by coordinate."""
    flat = x.data.ravel()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.data.shape)
