#!/usr/bin/env python3
"""
RCTrans Desk - Tensor Engine

Dense float64 tensors with reverse-mode differentiation. Every differentiable
operation is a ``Function`` subclass: ``forward`` works on numpy arrays and
``backward`` maps the gradient of the output to one gradient per input.

Shape rules (checked in each op, violations raise ``DimensionError``):
- add / sub / mul / div: numpy broadcasting
- matmul: ``[..., m, k] @ [..., k, n]`` with identical leading dims
- linear: ``x[..., in]`` with ``weight[in, out]`` and optional ``bias[out]``
- concat: equal extents on every axis except ``axis``
- softmax / layer_norm: reduce over one axis (``-1`` for layer_norm)
- strided_conv2d: channels-last ``x[H, W, Cin]``, ``weight[kh, kw, Cin, Cout]``
- upsample2x: channels-last ``x[H, W, C]`` -> ``[2H, 2W, C]`` (nearest neighbour)
- scatter_max: ``x[N, C]`` pooled into ``[cells, C]`` by an integer index per row

Summation order is fixed by the numpy kernels used here, so forward results are
bitwise reproducible for identical inputs and weights.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class DimensionError(ValueError):
    """Raised when operand shapes or axes are incompatible."""
    pass


class ContractError(ValueError):
    """Raised when a caller violates an operation precondition."""
    pass


class EvaluationError(ArithmeticError):
    """Raised when a function under gradient check does not evaluate to a finite scalar."""
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread (inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` (numpy in, numpy out) and ``backward``
    (gradient of the output in, tuple of input gradients out, ``None`` for
    inputs that do not need one).
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad)
        if requires_grad:
            out.creator = func
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum a broadcast gradient back down to ``to_shape``."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    Dense float64 array with optional gradient tracking.

    Tensors are immutable after creation except for ``grad`` accumulation.
    """

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None
        self.name = name

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        backward(self)

    # -- operators --------------------------------------------------------

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return index(self, key)

    # -- method forms -----------------------------------------------------

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def abs(self) -> "Tensor":
        return tensor_abs(self)


def as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as e:
        raise DimensionError(f"shapes {a} and {b} are not broadcastable") from e


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            self.unbroadcast(grad / self.b, self.a.shape),
            self.unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class Power(Function):
    def forward(self, a: np.ndarray, exponent: float = 1.0) -> np.ndarray:
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if self.exponent == 0:
            return (np.zeros_like(self.a),)
        return (grad * self.exponent * np.power(self.a, self.exponent - 1),)


def add(a: Any, b: Any) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a: Any, b: Any) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def power(a: Tensor, exponent: float) -> Tensor:
    return Power.apply(as_tensor(a), exponent=float(exponent))


# ---------------------------------------------------------------------------
# Unary nonlinearities
# ---------------------------------------------------------------------------

class ReLU(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = expit(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out * (1.0 - self.out),)


class Softplus(Function):
    """log(1 + exp(x)), evaluated without overflow."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * expit(self.a),)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.a = a
        return np.log(a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad / self.a,)


class Sin(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.a = a
        return np.sin(a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * np.cos(self.a),)


class Cos(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.a = a
        return np.cos(a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (-grad * np.sin(self.a),)


class Abs(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.a = a
        return np.abs(a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * np.sign(self.a),)


class Clamp(Function):
    def forward(self, a: np.ndarray, low: float = -np.inf, high: float = np.inf) -> np.ndarray:
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.mask,)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(as_tensor(a))


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(as_tensor(a))


def softplus(a: Tensor) -> Tensor:
    return Softplus.apply(as_tensor(a))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(a)) = -softplus(-a)."""
    return -softplus(-as_tensor(a))


def exp(a: Tensor) -> Tensor:
    return Exp.apply(as_tensor(a))


def log(a: Tensor) -> Tensor:
    return Log.apply(as_tensor(a))


def sin(a: Tensor) -> Tensor:
    return Sin.apply(as_tensor(a))


def cos(a: Tensor) -> Tensor:
    return Cos.apply(as_tensor(a))


def tensor_abs(a: Tensor) -> Tensor:
    return Abs.apply(as_tensor(a))


def clamp(a: Tensor, low: float = -np.inf, high: float = np.inf) -> Tensor:
    if low > high:
        raise ContractError(f"clamp bounds inverted: {low} > {high}")
    return Clamp.apply(as_tensor(a), low=float(low), high=float(high))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

class Sum(Function):
    def forward(self, a: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:
        if axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axis = tuple(_check_axis(ax, a.ndim) for ax in axes)
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"cannot reshape {a.shape} into {shape}") from e

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a: np.ndarray, axes: Optional[Tuple[int, ...]] = None) -> np.ndarray:
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        if sorted(_check_axis(ax, a.ndim) for ax in axes) != list(range(a.ndim)):
            raise DimensionError(f"axes {axes} are not a permutation of {a.ndim} dims")
        self.axes = tuple(_check_axis(ax, a.ndim) for ax in axes)
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.transpose(grad, np.argsort(self.axes)),)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        if not arrays:
            raise DimensionError("concat needs at least one tensor")
        ndim = arrays[0].ndim
        axis = _check_axis(axis, ndim)
        for arr in arrays[1:]:
            if arr.ndim != ndim or any(
                arr.shape[d] != arrays[0].shape[d] for d in range(ndim) if d != axis
            ):
                raise DimensionError(
                    f"concat along axis {axis}: incompatible shapes {arrays[0].shape} and {arr.shape}"
                )
        self.axis = axis
        self.splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


def _is_basic_key(key: Any) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


class Index(Function):
    def forward(self, a: np.ndarray, key: Any = None) -> np.ndarray:
        self.shape, self.key = a.shape, key
        try:
            return np.array(a[key])
        except IndexError as e:
            raise DimensionError(f"invalid index {key!r} for shape {a.shape}") from e

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros(self.shape)
        if _is_basic_key(self.key):
            out[self.key] += grad
        else:
            np.add.at(out, self.key, grad)
        return (out,)


def tensor_sum(a: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def tensor_mean(a: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[_check_axis(ax, a.ndim)] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(as_tensor(a), shape=tuple(shape))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(as_tensor(a), axes=None if axes is None else tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*(as_tensor(t) for t in tensors), axis=axis)


def index(a: Tensor, key: Any) -> Tensor:
    return Index.apply(as_tensor(a), key=key)


def tile_last(a: Tensor, repeats: int) -> Tensor:
    """Repeat the last axis ``repeats`` times: [x, y, z] -> [x, y, z, x, y, z, ...]."""
    return concat([a] * repeats, axis=-1)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            np.matmul(grad, np.swapaxes(self.b, -1, -2)),
            np.matmul(np.swapaxes(self.a, -1, -2), grad),
        )


class Linear(Function):
    """x[..., in] @ weight[in, out] (+ bias[out]).

    With ``exact=True`` each output row is reduced independently of the other
    rows, so results do not depend on row position (used where per-row
    bitwise invariance matters, e.g. per-point MLPs).
    """

    def forward(self, x: np.ndarray, weight: np.ndarray, *bias: np.ndarray, exact: bool = False) -> np.ndarray:
        if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
            raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
        if bias and bias[0].shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias[0].shape} does not match weight {weight.shape}")
        self.x_shape = x.shape
        self.x2 = x.reshape(-1, weight.shape[0])
        self.weight = weight
        self.has_bias = bool(bias)
        if exact:
            out = np.sum(self.x2[:, :, None] * weight[None, :, :], axis=1)
        else:
            out = self.x2 @ weight
        if bias:
            out = out + bias[0]
        return out.reshape(x.shape[:-1] + (weight.shape[1],))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        g2 = grad.reshape(-1, self.weight.shape[1])
        grads = [
            (g2 @ self.weight.T).reshape(self.x_shape),
            self.x2.T @ g2,
        ]
        if self.has_bias:
            grads.append(g2.sum(axis=0))
        return tuple(grads)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, exact: bool = False) -> Tensor:
    inputs = [as_tensor(x), as_tensor(weight)]
    if bias is not None:
        inputs.append(as_tensor(bias))
    return Linear.apply(*inputs, exact=exact)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

class Softmax(Function):
    def forward(self, a: np.ndarray, axis: int = -1) -> np.ndarray:
        self.axis = _check_axis(axis, a.ndim)
        shifted = a - a.max(axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LayerNormalize(Function):
    """(x - mean) / sqrt(var + eps) over the last axis, without affine terms."""

    def forward(self, a: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        if a.ndim == 0:
            raise DimensionError("layer_norm needs at least one axis")
        mu = a.mean(axis=-1, keepdims=True)
        centered = a - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.inv
        return self.xhat

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        g_mean = grad.mean(axis=-1, keepdims=True)
        gx_mean = (grad * self.xhat).mean(axis=-1, keepdims=True)
        return (self.inv * (grad - g_mean - self.xhat * gx_mean),)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(as_tensor(a), axis=axis)


def layer_norm(
    x: Tensor,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    out = LayerNormalize.apply(as_tensor(x), eps=float(eps))
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


# ---------------------------------------------------------------------------
# Spatial ops (channels-last)
# ---------------------------------------------------------------------------

class StridedConv2d(Function):
    def forward(
        self,
        x: np.ndarray,
        weight: np.ndarray,
        *bias: np.ndarray,
        stride: int = 1,
        padding: int = 0,
    ) -> np.ndarray:
        if x.ndim != 3 or weight.ndim != 4 or x.shape[2] != weight.shape[2]:
            raise DimensionError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
        kh, kw, cin, cout = weight.shape
        xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
        if xp.shape[0] < kh or xp.shape[1] < kw:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[:2]}")
        out_h = (xp.shape[0] - kh) // stride + 1
        out_w = (xp.shape[1] - kw) // stride + 1
        windows = sliding_window_view(xp, (kh, kw), axis=(0, 1))
        windows = windows[: stride * out_h : stride, : stride * out_w : stride]
        # (out_h, out_w, cin, kh, kw) -> (out_h*out_w, kh*kw*cin)
        self.cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2)).reshape(out_h * out_w, -1)
        self.w2 = weight.reshape(kh * kw * cin, cout)
        self.meta = (x.shape, xp.shape, weight.shape, stride, padding, out_h, out_w)
        self.has_bias = bool(bias)
        out = self.cols @ self.w2
        if bias:
            out = out + bias[0]
        return out.reshape(out_h, out_w, cout)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        x_shape, xp_shape, w_shape, stride, padding, out_h, out_w = self.meta
        kh, kw, cin, cout = w_shape
        g2 = grad.reshape(out_h * out_w, cout)
        gw = (self.cols.T @ g2).reshape(w_shape)
        gcols = (g2 @ self.w2.T).reshape(out_h, out_w, kh, kw, cin)
        gxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                gxp[i : i + stride * out_h : stride, j : j + stride * out_w : stride, :] += gcols[:, :, i, j, :]
        gx = gxp[padding : padding + x_shape[0], padding : padding + x_shape[1], :]
        grads = [gx, gw]
        if self.has_bias:
            grads.append(g2.sum(axis=0))
        return tuple(grads)


class Upsample2x(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3:
            raise DimensionError(f"upsample2x expects [H, W, C], got {x.shape}")
        self.shape = x.shape
        return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        h, w, c = self.shape
        return (grad.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)


class ScatterMax(Function):
    """Max-pool rows of ``x[N, C]`` into ``cells`` buckets; empty buckets are zero.

    The gradient of a bucket goes to the lowest-index row holding its maximum.
    """

    def forward(self, x: np.ndarray, cell_index: Optional[np.ndarray] = None, num_cells: int = 0) -> np.ndarray:
        if x.ndim != 2 or cell_index is None or cell_index.shape != (x.shape[0],):
            raise DimensionError(f"scatter_max expects x[N, C] and index[N], got {x.shape}")
        n, c = x.shape
        out = np.full((num_cells, c), -np.inf)
        np.maximum.at(out, cell_index, x)
        is_max = x == out[cell_index]
        candidates = np.where(is_max, np.arange(n)[:, None], n)
        winner = np.full((num_cells, c), n)
        np.minimum.at(winner, cell_index, candidates)
        self.winner, self.n = winner, n
        return np.where(np.isfinite(out), out, 0.0)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        gx = np.zeros((self.n, grad.shape[1]))
        valid = self.winner < self.n
        rows = self.winner[valid]
        cols = np.nonzero(valid)[1]
        np.add.at(gx, (rows, cols), grad[valid])
        return (gx,)


def strided_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: Optional[int] = None,
) -> Tensor:
    if padding is None:
        padding = as_tensor(weight).shape[0] // 2
    inputs = [as_tensor(x), as_tensor(weight)]
    if bias is not None:
        inputs.append(as_tensor(bias))
    return StridedConv2d.apply(*inputs, stride=int(stride), padding=int(padding))


def upsample2x(x: Tensor) -> Tensor:
    return Upsample2x.apply(as_tensor(x))


def scatter_max(x: Tensor, cell_index: np.ndarray, num_cells: int) -> Tensor:
    return ScatterMax.apply(as_tensor(x), cell_index=np.asarray(cell_index, dtype=np.int64), num_cells=int(num_cells))


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------

@dataclass
class ComputationTape:
    """Tensors reachable from a root, producers before consumers."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in reversed(node.creator.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def grad_of(t: Tensor) -> np.ndarray:
    """Gradient of ``t``, zeros when backward never reached it."""
    return np.zeros_like(t.data) if t.grad is None else t.grad


def backward(loss: Tensor) -> ComputationTape:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are replaced.
    A leaf on the tape that receives no gradient gets zeros. Tensors with no
    path to ``loss`` are not visited and keep ``grad`` as it was (``None``
    after ``zero_grad``); ``grad_of`` reads ``None`` as a zero gradient.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require gradient")

    tape = ComputationTape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            if node.creator is None and node.grad is None:
                node.grad = np.zeros_like(node.data)
            continue
        if node.creator is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        node.grad = grad
        input_grads = node.creator.backward(grad)
        for parent, g in zip(node.creator.inputs, input_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = g if key not in grads else grads[key] + g
    return tape


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Max relative error between backward() and central differences.

    Relative error per element is |a - n| / max(|a|, |n|, floor).
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    if not x.requires_grad:
        raise ContractError("grad_check needs a tensor with requires_grad=True")

    if not x.data.flags.c_contiguous or not x.data.flags.writeable:
        x.data = np.array(x.data, dtype=np.float64)
    x.zero_grad()
    out = f(x)
    if out.data.size != 1 or not np.all(np.isfinite(out.data)):
        raise EvaluationError(f"f(x) must be a finite scalar, got {out.data!r}")
    backward(out)
    analytic = grad_of(x).copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = f(x).item()
            flat[i] = original - eps
            minus = f(x).item()
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise EvaluationError(f"f is not finite around element {i}")
            num_flat[i] = (plus - minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    error = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
    logger.debug(f"grad_check over {flat.size} elements: max relative error {error:.3e}")
    return error
