"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what a compact residual
convnet with a pairwise embedding loss needs. A Tensor wraps a numpy
array; every differentiable op records its parent tensors and a
backward closure, and ``Tensor.backward()`` replays those closures in
reverse topological order, accumulating gradients. The recorded graph
is the tape: one per loss evaluation, independent graphs never share
state.

Float32 is the default element type. Gradient verification runs in
float64, switched via ``using_dtype``. ``conv2d`` uses an im2col/matmul
fast path; ``conv2d_reference`` is the naive direct-loop form the fast
path is validated against.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "using_dtype",
    "set_default_dtype",
    "default_dtype",
    "relu",
    "narrow",
    "conv2d",
    "conv2d_reference",
    "batch_norm",
    "adaptive_avg_pool",
    "fully_connected",
    "l2_distance",
]

Scalar = Union[int, float]

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


def set_default_dtype(dtype) -> None:
    """Set the element type used for new tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the default element type (e.g. float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; ops inside produce constant tensors."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Data is treated as immutable once the tensor participates in a
    graph; only ``grad`` accumulates. ``requires_grad`` marks trainable
    leaves. Non-leaf tensors carry the parents and backward closure
    recorded by the op that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if self.data.dtype not in _SUPPORTED_DTYPES:
            raise ValueError(f"unsupported dtype {self.data.dtype}")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        if _GRAD_ENABLED and any(p._needs_grad for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        else:
            out._parents = ()
            out._backward = None
            out._op = ""
        return out

    @property
    def _needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """Same data, cut off from the graph."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self._needs_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Run reverse-mode accumulation from a scalar.

        Visits each recorded op exactly once, in reverse topological
        order, so shared subgraphs (e.g. weight-sharing branches)
        accumulate correctly.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            x = self

            def backward(g: np.ndarray) -> None:
                x._accumulate(g)

            return Tensor._from_op(self.data + other, (self,), backward, "add")
        other = self._coerce(other)
        if other.shape != self.shape:
            raise ShapeError(f"add: shapes {self.shape} and {other.shape} differ")
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            a._accumulate(g)
            b._accumulate(g)

        return Tensor._from_op(self.data + other.data, (self, other), backward, "add")

    def __radd__(self, other) -> "Tensor":
        return self.__add__(other)

    def __neg__(self) -> "Tensor":
        x = self

        def backward(g: np.ndarray) -> None:
            x._accumulate(-g)

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return self.__add__(-other)
        return self.__add__(-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return (-self).__add__(other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            x, k = self, other

            def backward(g: np.ndarray) -> None:
                x._accumulate(g * k)

            return Tensor._from_op(self.data * other, (self,), backward, "mul")
        other = self._coerce(other)
        if other.shape != self.shape:
            raise ShapeError(f"mul: shapes {self.shape} and {other.shape} differ")
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)

        return Tensor._from_op(self.data * other.data, (self, other), backward, "mul")

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    # -- reductions and reshapes ------------------------------------------

    def sum(self) -> "Tensor":
        x = self

        def backward(g: np.ndarray) -> None:
            x._accumulate(np.broadcast_to(g, x.shape).copy() if x.shape else g)

        return Tensor._from_op(np.asarray(self.data.sum()), (self,), backward, "sum")

    def mean(self) -> "Tensor":
        x = self
        n = self.data.size

        def backward(g: np.ndarray) -> None:
            x._accumulate(np.broadcast_to(g / n, x.shape).copy() if x.shape else g / n)

        return Tensor._from_op(np.asarray(self.data.mean()), (self,), backward, "mean")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        old_shape = self.shape

        def backward(g: np.ndarray) -> None:
            x._accumulate(g.reshape(old_shape))

        return Tensor._from_op(self.data.reshape(shape), (self,), backward, "reshape")

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._op:
            flags.append(f"op={self._op}")
        tail = ", ".join([f"shape={self.shape}", f"dtype={self.data.dtype}"] + flags)
        return f"Tensor({tail})"


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient 0 at exactly 0."""
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return Tensor._from_op(np.where(mask, x.data, 0), (x,), backward, "relu")


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row range x[start:stop] along the first axis."""
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"narrow: range [{start}, {stop}) invalid for {x.shape[0]} rows")

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x._accumulate(full)

    return Tensor._from_op(x.data[start:stop].copy(), (x,), backward, "narrow")


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed dtypes in op: {sorted(str(d) for d in dtypes)}")


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Gather conv patches as (N, C*kh*kw, H_out*W_out)."""
    n, c, h, w = padded.shape
    h_out = (h - kh) // stride + 1
    w_out = (w - kw) // stride + 1
    sn, sc, sh, sw = padded.strides
    patches = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, c, kh, kw, h_out, w_out),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, h_out * w_out)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add patch gradients back to input layout. Inverse of _im2col."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    grid = cols.reshape(n, c, kh, kw, h_out, w_out)
    padded = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * h_out
        for j in range(kw):
            j_end = j + stride * w_out
            padded[:, :, i:i_end:stride, j:j_end:stride] += grid[:, :, i, j]
    if padding:
        return padded[:, :, padding:-padding, padding:-padding]
    return padded


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input.

    weight is (K, C, kh, kw); output spatial size is
    floor((H + 2*padding - kh) / stride) + 1. Forward runs as
    im2col + matmul; the backward closure scatters patch gradients
    back with the matching col2im.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} or padding={padding}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")
    _check_same_dtype(*(t for t in (x, weight, bias) if t is not None))

    if padding:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.data
    cols = _im2col(padded, kh, kw, stride)
    w2 = weight.data.reshape(k, -1)
    out = np.matmul(w2, cols).reshape(n, k, h_out, w_out)
    if bias is not None:
        out += bias.data.reshape(1, k, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(n, k, h_out * w_out)
        if weight._needs_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.shape))
        if x._needs_grad:
            gcols = np.matmul(w2.T, g2)
            x._accumulate(_col2im(gcols, x.shape, kh, kw, stride, padding))
        if bias is not None and bias._needs_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out, parents, backward, "conv2d")


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                     stride: int = 1, padding: int = 1) -> np.ndarray:
    """Direct-loop convolution; the oracle the im2col path is checked against."""
    n, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, k, h_out, w_out), dtype=x.dtype)
    for img in range(n):
        for och in range(k):
            for oy in range(h_out):
                for ox in range(w_out):
                    acc = 0.0
                    for ich in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += (padded[img, ich, oy * stride + dy, ox * stride + dx]
                                        * weight[och, ich, dy, dx])
                    out[img, och, oy, ox] = acc
                    if bias is not None:
                        out[img, och, oy, ox] += bias[och]
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over NCHW.

    Training mode normalizes by batch statistics (biased variance) and
    updates the running buffers in place; eval mode normalizes by the
    running buffers. The backward closure differentiates through the
    batch statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: need 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift shapes {gamma.shape}/{beta.shape} != ({c},)")
    _check_same_dtype(x, gamma, beta)
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * x_hat + beta.data.reshape(1, c, 1, 1)

    def backward(g: np.ndarray) -> None:
        if gamma._needs_grad:
            gamma._accumulate((g * x_hat).sum(axis=axes))
        if beta._needs_grad:
            beta._accumulate(g.sum(axis=axes))
        if not x._needs_grad:
            return
        gs = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            # Gradient through the batch statistics themselves.
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            sum_gs = gs.sum(axis=axes).reshape(1, c, 1, 1)
            sum_gs_xhat = (gs * x_hat).sum(axis=axes).reshape(1, c, 1, 1)
            gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gs - sum_gs - x_hat * sum_gs_xhat)
        else:
            gx = gs * inv_std.reshape(1, c, 1, 1)
        x._accumulate(gx)

    return Tensor._from_op(out, (x, gamma, beta), backward, "batch_norm")


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Global average pool NCHW -> (N, C, 1, 1)."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool: need 4-D input, got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(g / area, x.shape).copy())

    return Tensor._from_op(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward, "avg_pool")


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map (N, D_in) @ weight.T + bias, weight is (D_out, D_in)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fully_connected: need 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input width {x.shape[1]} != weight width {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} != ({weight.shape[0]},)")
    _check_same_dtype(*(t for t in (x, weight, bias) if t is not None))
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        if x._needs_grad:
            x._accumulate(g @ weight.data)
        if weight._needs_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias._needs_grad:
            bias._accumulate(g.sum(axis=0))

    return Tensor._from_op(out, parents, backward, "fully_connected")


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance along the last axis: (N, D) -> (N,) or (D,) -> scalar.

    At distance exactly 0 the (sub)gradient is defined as 0, so
    identical pairs do not produce NaNs.
    """
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance: shapes {a.shape} and {b.shape} differ")
    if a.ndim not in (1, 2):
        raise ShapeError(f"l2_distance: need 1-D or 2-D inputs, got {a.shape}")
    _check_same_dtype(a, b)
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def backward(g: np.ndarray) -> None:
        safe = np.where(dist > 0, dist, 1.0)
        scale = (g / safe)[..., None] if a.ndim == 2 else g / safe
        ga = scale * diff
        a._accumulate(ga)
        b._accumulate(-ga)

    return Tensor._from_op(np.asarray(dist), (a, b), backward, "l2_distance")
