"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure mapping the output gradient
to parent gradients. `backward` walks the graph in reverse topological order.
Non-finite values raise `NonFiniteError` as soon as they appear, in either
direction.

The layer set (Linear, Conv2d, residual blocks, conditional batch norm) and the
Adam optimizer live here too, on top of the same primitives.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DimensionError, MissingGradientError, NonFiniteError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_default_dtype = np.dtype(np.float32)
_grad_state = threading.local()


# Precision and graph recording

def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported precision: {dtype}")
    _default_dtype = dtype


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording the graph (per thread)"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


# Tensor

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    # numpy defers binary operators to the reflected methods below
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{label})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return tensor_mean(self, axis, keepdims)
    def max(self, axis=None, keepdims: bool = False): return tensor_max(self, axis, keepdims)
    def min(self, axis=None, keepdims: bool = False): return tensor_min(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if not np.issubdtype(arr.dtype, np.floating) or arr.ndim == 0:
        arr = arr.astype(_default_dtype)
    return Tensor(arr)


def _check_finite(arr: np.ndarray, op: str, direction: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: {direction} pass produced non-finite values")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    _check_finite(data, op, "forward")
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward_fn, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def clip(a, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * mask,), "clip")


# Shape manipulation

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def index_select(a, index) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward_fn, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward_fn, "stack")


# Reductions

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),), "sum")


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size / max(out.size, 1)
    return _result(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,), "mean")


def _extreme(a: Tensor, axis, keepdims: bool, reducer, op: str) -> Tensor:
    out = np.asarray(reducer(a.data, axis=axis, keepdims=keepdims))
    kept = np.asarray(reducer(a.data, axis=axis, keepdims=True))
    mask = (a.data == kept).astype(a.dtype)
    # ties share the gradient
    share = mask / mask.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) * share,)

    return _result(out, (a,), backward_fn, op)


def tensor_max(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(as_tensor(a), axis, keepdims, np.max, "max")


def tensor_min(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(as_tensor(a), axis, keepdims, np.min, "min")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward_fn, "softmax")


# Linear algebra and convolution

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward_fn, "matmul")


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[B,C_in,H,W] (or [C_in,H,W]) with kernel[C_out,C_in,k,k]"""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), kernel, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W] input and 4-D kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if x.shape[1] != c_in:
        raise DimensionError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {c_in}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d needs stride >= 1 and padding >= 0")
    batch, _, height, width = x.shape
    if height + 2 * padding < k or width + 2 * padding < k:
        raise DimensionError(f"conv2d input {height}x{width} smaller than kernel {k}x{k}")
    h_out = (height + 2 * padding - k) // stride + 1
    w_out = (width + 2 * padding - k) // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward_fn(g):
        g_kernel = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        g_cols = np.tensordot(g, kernel.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        g_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                g_padded[:, :, i:i + stride * (h_out - 1) + 1:stride,
                         j:j + stride * (w_out - 1) + 1:stride] += g_cols[..., i, j]
        g_x = g_padded[:, :, padding:padding + height, padding:padding + width]
        return g_x, g_kernel

    return _result(np.ascontiguousarray(out), (x, kernel), backward_fn, "conv2d")


def global_avg_pool(x) -> Tensor:
    """[B,C,H,W] -> [B,C]"""
    return tensor_mean(x, axis=(2, 3))


def batch_normalize(x, eps: float) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize x[B,C,...] per channel over the batch and trailing axes.

    Returns the normalized tensor plus the per-channel mean and biased variance.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"batch normalization needs [B,C,...] input, got {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    count = x.size // x.shape[1]
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std

    def backward_fn(g):
        g_sum = g.sum(axis=axes, keepdims=True)
        g_dot = (g * x_hat).sum(axis=axes, keepdims=True)
        return (inv_std / count * (count * g - g_sum - x_hat * g_dot),)

    out = _result(x_hat, (x,), backward_fn, "batch_norm")
    return out, mean.reshape(-1), var.reshape(-1)


def binary_cross_entropy(probs, labels: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities clamped to [eps, 1 - eps]"""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=probs.dtype)
    if labels.shape != probs.shape:
        raise DimensionError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    p = clip(probs, eps, 1.0 - eps)
    per_point = -(labels * log(p) + (1.0 - labels) * log(1.0 - p))
    return tensor_mean(per_point)


# Backward pass

def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every leaf that requires grad"""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            _check_finite(parent_grad, node._op, "backward")
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        if not retain_graph:
            node._parents = ()
            node._backward = None


# Parameters and modules

class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=_default_dtype), requires_grad=True, name=name)


def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = OrderedDict()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, Union["Module", Parameter]]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Parameter)):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield f"{prefix}{name}", value
            else:
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def set_buffer(self, qualified_name: str, value: np.ndarray) -> None:
        head, _, rest = qualified_name.partition(".")
        if not rest:
            if head not in self._buffers:
                raise KeyError(qualified_name)
            self._buffers[head] = np.array(value, dtype=self._buffers[head].dtype)
            return
        child = self._child(head)
        if not isinstance(child, Module):
            raise KeyError(qualified_name)
        child.set_buffer(rest, value)

    def _child(self, name: str):
        return getattr(self, name, None)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self.items: List[Module] = list(modules)

    def _children(self):
        for i, module in enumerate(self.items):
            yield str(i), module

    def _child(self, name: str):
        return self.items[int(name)] if name.isdigit() and int(name) < len(self.items) else None

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> Module:
        return self.items[i]


class Linear(Module):
    """y = x @ W^T + b over the last axis"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, gain: float = 1.0):
        super().__init__()
        self.weight = Parameter(fan_in_uniform(rng, (out_features, in_features), in_features, gain))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, transpose(self.weight)) + self.bias


class PointwiseLinear(Module):
    """Per-point linear map on channel-first activations: [B,C_in,K] -> [B,C_out,K]"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, gain: float = 1.0):
        super().__init__()
        self.weight = Parameter(fan_in_uniform(rng, (out_channels, in_channels), in_channels, gain))
        self.bias = Parameter(np.zeros((out_channels, 1)))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(self.weight, x) + self.bias


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(fan_in_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros((1, out_channels, 1, 1)))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding) + self.bias


class ResidualBlock2d(Module):
    """relu(conv3x3(relu(conv3x3(x))) + shortcut(x)); 1x1 projection when shape changes"""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, stride=1, padding=1)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, rng, stride=stride, padding=0)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return relu(h + skip)


def conditional_batch_norm(x: Tensor, condition: Tensor, scale_map: Linear, shift_map: Linear,
                           eps: float = 1e-5, *, training: bool = True,
                           running_mean: Optional[np.ndarray] = None,
                           running_var: Optional[np.ndarray] = None,
                           momentum: float = 0.1) -> Tensor:
    """Batch-normalize x[B,C,...] then scale by gamma(condition) and shift by beta(condition).

    In training mode the running statistics (when given) are updated in place;
    in inference mode they replace the batch statistics.
    """
    x = as_tensor(x)
    if condition.ndim != 2 or condition.shape[0] != x.shape[0]:
        raise DimensionError(f"condition {condition.shape} does not match batch of {x.shape}")
    if training:
        if x.shape[0] < 2:
            raise DimensionError("batch normalization in training mode needs a batch of at least 2")
        x_hat, mean, var = batch_normalize(x, eps)
        if running_mean is not None and running_var is not None:
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("inference-mode batch normalization needs running statistics")
        stat_shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
        mean = running_mean.reshape(stat_shape).astype(x.dtype)
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(stat_shape).astype(x.dtype)
        x_hat = (x - mean) * inv_std
    param_shape = (x.shape[0], x.shape[1]) + (1,) * (x.ndim - 2)
    gamma = reshape(scale_map(condition), param_shape)
    beta = reshape(shift_map(condition), param_shape)
    return gamma * x_hat + beta


class CBatchNorm(Module):
    def __init__(self, condition_dim: int, channels: int, rng: np.random.Generator,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        # small random maps so that gamma ~ 1 and beta ~ 0 while the condition still gets gradient
        self.scale_map = Linear(condition_dim, channels, rng, gain=0.1)
        self.shift_map = Linear(condition_dim, channels, rng, gain=0.1)
        self.scale_map.bias.data[...] = 1.0
        self.momentum = momentum
        self.eps = eps
        self._buffers["running_mean"] = np.zeros(channels, dtype=np.float64)
        self._buffers["running_var"] = np.ones(channels, dtype=np.float64)

    def forward(self, x: Tensor, condition: Tensor) -> Tensor:
        return conditional_batch_norm(
            x, condition, self.scale_map, self.shift_map, self.eps,
            training=self.training,
            running_mean=self._buffers["running_mean"],
            running_var=self._buffers["running_var"],
            momentum=self.momentum,
        )


class CResnetBlock(Module):
    """Decoder block: x + fc1(relu(cbn1(fc0(relu(cbn0(x, c))), c)))"""

    def __init__(self, condition_dim: int, hidden: int, rng: np.random.Generator,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.bn0 = CBatchNorm(condition_dim, hidden, rng, momentum, eps)
        self.fc0 = PointwiseLinear(hidden, hidden, rng)
        self.bn1 = CBatchNorm(condition_dim, hidden, rng, momentum, eps)
        self.fc1 = PointwiseLinear(hidden, hidden, rng)

    def forward(self, x: Tensor, condition: Tensor) -> Tensor:
        net = self.fc0(relu(self.bn0(x, condition)))
        dx = self.fc1(relu(self.bn1(net, condition)))
        return x + dx


# Parameter registry with ownership tags

MAIN = "main"
SHARED = "shared"


def side_tag(branch: int) -> str:
    return f"side-{branch}"


class ParameterSet:
    """Named parameters, each tagged main / side-n / shared"""

    def __init__(self, named: Sequence[Tuple[str, Parameter]], tags: Mapping[str, str]):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict(named)
        missing = [name for name in self._params if name not in tags]
        if missing:
            raise ValueError(f"Parameters without ownership tag: {missing}")
        self._tags = {name: tags[name] for name in self._params}

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tag(self, name: str) -> str:
        return self._tags[name]

    def with_tag(self, tag: str) -> List[str]:
        return [name for name, t in self._tags.items() if t == tag]

    def tags(self) -> Dict[str, str]:
        return dict(self._tags)


# Adam

@dataclass
class AdamState:
    learning_rate: float = 0.004
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, state: AdamState,
              grads: Optional[Mapping[str, np.ndarray]] = None) -> ParameterSet:
    """One bias-corrected Adam update, in place. Gradients default to `param.grad`."""
    resolved = {}
    for name, param in params.items():
        g = grads.get(name) if grads is not None else param.grad
        if g is None:
            raise MissingGradientError(name)
        if g.shape != param.shape:
            raise DimensionError(f"gradient for '{name}' has shape {g.shape}, parameter {param.shape}")
        resolved[name] = g

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1 ** state.step
    correction2 = 1 - b2 ** state.step
    for name, param in params.items():
        g = resolved[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data -= update.astype(param.dtype, copy=False)
    return params


class Adam:
    def __init__(self, params: ParameterSet, learning_rate: float = 0.004,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for _, p in self.params.items():
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        adam_step(self.params, self.state)


# Finite-difference checking

def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _central_difference(fn: Callable[[], Tensor], tensor: Tensor, index: int, eps: float) -> float:
    flat = tensor.data.reshape(-1)
    original = flat[index]
    with no_grad():
        flat[index] = original + eps
        plus = fn().item()
        flat[index] = original - eps
        minus = fn().item()
    flat[index] = original
    return (plus - minus) / (2 * eps)


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-3, rtol: float = 1e-4,
              max_checks_per_tensor: Optional[int] = None, seed: int = 0, floor: float = 1e-3) -> float:
    """Largest relative error between backprop and central differences.

    Magnitudes below `floor` are compared absolutely. An element that fails at
    step `eps` is re-measured at eps/10 and eps/100, which separates truncation
    error and ReLU/clamp kinks crossed by the wide step from real mistakes.
    Tensors must be contiguous and use 64-bit floats for meaningful results.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        indices = np.arange(tensor.size)
        if max_checks_per_tensor is not None and tensor.size > max_checks_per_tensor:
            indices = rng.choice(tensor.size, size=max_checks_per_tensor, replace=False)
        flat_grad = grad.reshape(-1)
        for index in indices:
            error = np.inf
            for step in (eps, eps / 10, eps / 100):
                numeric = _central_difference(fn, tensor, int(index), step)
                error = min(error, _relative_error(float(flat_grad[index]), numeric, floor))
                if error <= rtol:
                    break
            worst = max(worst, error)
    return worst
