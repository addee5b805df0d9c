"""Dense numpy tensors with reverse-mode differentiation.

Every differentiable function here returns a new :class:`Tensor` whose
``_backward`` closure maps the gradient of the output to gradients of the
parents.  ``Tensor.backward`` replays the recorded graph in reverse
topological order, visiting each node exactly once.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import (
    DegenerateInputError,
    DimensionError,
    NumericError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: Optional[ArrayLike] = None) -> "Tape":
        """Populate ``.grad`` on every leaf that requires it.

        ``grad`` defaults to ones for scalar outputs.  Returns the tape
        that was replayed.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = Tape.record(self)
        tape.replay(self, np.asarray(grad, dtype=self.data.dtype).reshape(self.shape))
        return tape

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Operations reachable from an output, in topological order.

    Inputs of an operation always precede it in ``nodes``.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def replay(self, output: Tensor, seed: np.ndarray) -> None:
        grads = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                g = np.zeros_like(node.data)
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` for a constant floor."""
    a = _as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "maximum")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# -- reductions and shape ops -----------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _make(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def take(a, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = _as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def unfold_time(x, context: int) -> Tensor:
    """Stack ``context`` consecutive rows into one row, stride 1.

    ``(..., T, R) -> (..., T - context + 1, context * R)``.
    """
    x = _as_tensor(x)
    T, R = x.shape[-2], x.shape[-1]
    n = T - context + 1
    if n < 1:
        raise DimensionError(f"{T} rows cannot hold a context of {context}")
    windows = sliding_window_view(x.data, context, axis=-2)  # (..., n, R, context)
    out = np.swapaxes(windows, -1, -2).reshape(x.shape[:-2] + (n, context * R))

    def backward(g):
        g = g.reshape(x.shape[:-2] + (n, context, R))
        grad = np.zeros_like(x.data)
        for k in range(context):
            grad[..., k : k + n, :] += g[..., k, :]
        return (grad,)

    return _make(np.ascontiguousarray(out), (x,), backward, "unfold_time")


def conv2d(x, kernel, padding: int = 0, bias=None) -> Tensor:
    """Stride-1 2-D cross-correlation.

    ``x`` is ``C_in x H x W`` or batched ``B x C_in x H x W``; ``kernel`` is
    ``C_out x C_in x kh x kw``.  ``bias`` (optional) has length ``C_out``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 3-D/4-D input and 4-D kernel, got {x.shape}, {kernel.shape}")
    B, C, H, W = x.shape
    C_out, C_k, kh, kw = kernel.shape
    if C_k != C:
        raise DimensionError(f"kernel expects {C_k} input channels, input has {C}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = Hp - kh + 1, Wp - kw + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kmat = kernel.data.reshape(C_out, -1)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, C_out).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C_out)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            if Ho * Wo <= kh * kw:
                # large kernel, few positions: scatter whole windows
                for i in range(Ho):
                    for j in range(Wo):
                        gxp[:, :, i : i + kh, j : j + kw] += gcols[:, i, j]
            else:
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + Ho, j : j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gk

    result = _make(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")
    if bias is not None:
        result = add(result, reshape(bias, (1, C_out, 1, 1)))
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


# -- normalisation and probability ------------------------------------------
def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over ``B x C [x H x W]`` input.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance); in eval mode the running
    buffers are used.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    count = x.data.size // x.shape[1]
    if training:
        if x.shape[0] < 2:
            raise DimensionError("batch_norm in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (
                inv_std.reshape(bshape)
                / count
                * (
                    count * gxhat
                    - gxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def cross_entropy(logits, target) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    ``logits`` is ``K`` (with a scalar target) or ``B x K`` (with ``B``
    targets).
    """
    logits = _as_tensor(logits)
    K = logits.shape[-1]
    target = np.asarray(target, dtype=np.int64)
    if np.any(target < 0) or np.any(target >= K):
        raise ValueError(f"class index out of range [0, {K}): {target}")
    logp = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        if target.ndim != 0:
            raise DimensionError("single logit vector needs a scalar target")
        return -take(logp, int(target))
    if target.shape != (logits.shape[0],):
        raise DimensionError(f"{logits.shape[0]} logit rows but {target.size} targets")
    picked = take(logp, (np.arange(logits.shape[0]), target))
    return -mean(picked)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalise a zero vector")
    unit = x.data / norm

    def backward(g):
        return ((g - unit * (g * unit).sum(axis=axis, keepdims=True)) / norm,)

    return _make(unit, (x,), backward, "l2_normalize")


# -- finite-difference oracle -------------------------------------------------
def numeric_gradient(f: Callable[..., Tensor], points: Sequence[np.ndarray], step: float = 1e-5) -> list:
    """Central differences of scalar ``f`` with respect to every array in ``points``."""
    grads = []
    for p in points:
        g = np.zeros_like(p, dtype=np.float64)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = float(f(*points).data)
            flat[k] = orig - step
            fm = float(f(*points).data)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("function is not finite near the check point")
            gflat[k] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def grad_check(f: Callable[..., Tensor], *points: ArrayLike, step: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` receives one Tensor per point and returns a scalar Tensor.  Per
    input the error is ``max|analytic - numeric|``; errors are divided by
    the largest gradient magnitude over all inputs, so an input whose true
    gradient is exactly zero does not turn round-off into a large ratio.
    """
    arrays = [np.array(p, dtype=np.float64) for p in points]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*tensors)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function is not finite at the check point")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_gradient(lambda *ps: f(*[Tensor(q) for q in ps]), arrays, step)
    scale = max(max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in zip(analytic, numeric))
    if scale == 0.0:
        return 0.0
    return max(float(np.abs(a - n).max(initial=0.0)) for a, n in zip(analytic, numeric)) / scale
