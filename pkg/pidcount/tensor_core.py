"""
Dense tensor engine with reverse-mode automatic differentiation
Only the operations PID-Net needs: convolution, transposed convolution,
max-pooling, pixel interval down-sampling, ReLU, channel concat, softmax,
cross-entropy, plus the Adam and SGD update rules
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config.settings import PIDNetConfig
from pidcount.errors import DimensionError, GraphStateError, ValidationError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    """Whether ops on the current thread record a computation graph"""
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction on the current thread (evaluation, prediction)"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """
    N-dimensional float array with an optional gradient buffer

    Tensors are produced by ops and are not mutated afterwards; only `grad`
    accumulates. Leaf tensors (parameters, inputs) have no creator.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=np.float32):
        """
        Args:
            data: Values, copied into a contiguous array
            requires_grad: Whether backward should populate `grad`
            dtype: np.float32 (default) or np.float64 for high-precision checks
        """
        self.data = np.array(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.creator: Optional["Function"] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, creator: Optional["Function"], requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad
        out.creator = creator
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Function:
    """
    Base class for differentiable operations

    `forward` receives the input arrays and returns the output array, caching
    whatever `backward` needs. `backward` receives dL/d(output) and returns one
    gradient (or None) per input.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs: Tuple[Tensor, ...] = inputs
        self.consumed = False

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    def release(self):
        """Drop cached arrays and input references once the graph is consumed"""
        self.inputs = ()
        for name in list(vars(self)):
            if name.startswith("cache_"):
                setattr(self, name, None)

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        func = cls(*inputs)
        out = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor._from_op(out, func if requires_grad else None, requires_grad)


def _space_to_depth(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    # channel index = (dy * 2 + dx) * C + c
    out = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 3, 5, 1, 2, 4)
    return np.ascontiguousarray(out.reshape(n, 4 * c, h // 2, w // 2))


def _depth_to_space(x: np.ndarray) -> np.ndarray:
    n, c4, h, w = x.shape
    c = c4 // 4
    out = x.reshape(n, 2, 2, c, h, w).transpose(0, 3, 4, 1, 5, 2)
    return np.ascontiguousarray(out.reshape(n, c, 2 * h, 2 * w))


def _require_4d(x: np.ndarray, op: str):
    if x.ndim != 4:
        raise DimensionError(f"{op} expects a 4-D tensor (N, C, H, W), got shape {x.shape}")


def _require_even(x: np.ndarray, op: str):
    _require_4d(x, op)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"{op} needs even height and width, got {x.shape[2]} x {x.shape[3]}")


class Conv2d(Function):
    def forward(self, x, w, b, stride: int = 1, padding: int = 0):
        _require_4d(x, "conv2d")
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise DimensionError(f"conv2d weight must be (Cout, Cin, k, k) with odd k, got {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"conv2d input has {x.shape[1]} channels, weight expects {w.shape[1]}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d bias must have shape ({w.shape[0]},), got {b.shape}")
        k = w.shape[2]
        if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
            raise DimensionError(f"conv2d input {x.shape[2]} x {x.shape[3]} too small for kernel {k} with padding {padding}")
        if stride < 1:
            raise DimensionError(f"conv2d stride must be >= 1, got {stride}")

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = out + b.reshape(1, -1, 1, 1)

        self.cache_windows = windows
        self.cache_w = w
        self.cache_padded_shape = xp.shape
        self.cache_geometry = (x.shape, stride, padding)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        windows, w = self.cache_windows, self.cache_w
        x_shape, stride, padding = self.cache_geometry
        k = w.shape[2]
        _, _, ho, wo = grad.shape

        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3))

        grad_xp = np.zeros(self.cache_padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(grad, w[:, :, i, j], axes=([1], [0]))
                grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
        h, wd = x_shape[2], x_shape[3]
        grad_x = grad_xp[:, :, padding:padding + h, padding:padding + wd]
        return np.ascontiguousarray(grad_x), grad_w, grad_b


class ConvTranspose2d(Function):
    def forward(self, x, w, b, stride: int = 2, padding: int = 1, output_padding: int = 1):
        _require_4d(x, "conv_transpose2d")
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DimensionError(f"conv_transpose2d weight must be (Cin, Cout, k, k), got {w.shape}")
        if x.shape[1] != w.shape[0]:
            raise DimensionError(f"conv_transpose2d input has {x.shape[1]} channels, weight expects {w.shape[0]}")
        if b.shape != (w.shape[1],):
            raise DimensionError(f"conv_transpose2d bias must have shape ({w.shape[1]},), got {b.shape}")

        n, _, h, wd = x.shape
        cout, k = w.shape[1], w.shape[2]
        full_h = (h - 1) * stride + k + output_padding
        full_w = (wd - 1) * stride + k + output_padding
        out_h = full_h - 2 * padding
        out_w = full_w - 2 * padding

        full = np.zeros((n, cout, full_h, full_w), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(x, w[:, :, i, j], axes=([1], [0]))
                full[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += contrib.transpose(0, 3, 1, 2)
        out = full[:, :, padding:padding + out_h, padding:padding + out_w] + b.reshape(1, -1, 1, 1)

        self.cache_x = x
        self.cache_w = w
        self.cache_geometry = (stride, padding, full_h, full_w)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        x, w = self.cache_x, self.cache_w
        stride, padding, full_h, full_w = self.cache_geometry
        n, _, h, wd = x.shape
        k = w.shape[2]
        out_h, out_w = grad.shape[2], grad.shape[3]

        grad_full = np.zeros((n, grad.shape[1], full_h, full_w), dtype=grad.dtype)
        grad_full[:, :, padding:padding + out_h, padding:padding + out_w] = grad

        grad_x = np.zeros_like(x)
        grad_w = np.zeros_like(w)
        for i in range(k):
            for j in range(k):
                tap = grad_full[:, :, i:i + stride * h:stride, j:j + stride * wd:stride]
                grad_x += np.tensordot(tap, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                grad_w[:, :, i, j] = np.tensordot(x, tap, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w, grad_b


class MaxPool2d(Function):
    def forward(self, x):
        _require_even(x, "maxpool2d")
        n, c, h, w = x.shape
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        # argmax keeps the first cell of the row-major scan on ties
        index = windows.argmax(axis=-1)
        self.cache_index = index
        self.cache_shape = x.shape
        return np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.cache_shape
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(routed, self.cache_index[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(routed),)


class PIDDownsample(Function):
    def forward(self, x):
        _require_even(x, "pid_downsample")
        return _space_to_depth(x)

    def backward(self, grad):
        return (_depth_to_space(grad),)


class PIDReassemble(Function):
    def forward(self, x):
        _require_4d(x, "pid_reassemble")
        if x.shape[1] % 4:
            raise DimensionError(f"pid_reassemble needs a multiple of 4 channels, got {x.shape[1]}")
        return _depth_to_space(x)

    def backward(self, grad):
        return (_space_to_depth(grad),)


class ReLU(Function):
    def forward(self, x):
        mask = x > 0
        self.cache_mask = mask
        return np.where(mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad):
        return (grad * self.cache_mask,)


class ConcatChannels(Function):
    def forward(self, *arrays):
        if not arrays:
            raise DimensionError("concat_channels needs at least one input")
        for arr in arrays:
            _require_4d(arr, "concat_channels")
        ref = arrays[0].shape
        for arr in arrays[1:]:
            if arr.shape[0] != ref[0] or arr.shape[2:] != ref[2:]:
                raise DimensionError(f"concat_channels inputs disagree on N/H/W: {ref} vs {arr.shape}")
        self.cache_splits = np.cumsum([arr.shape[1] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, grad):
        return tuple(np.ascontiguousarray(part) for part in np.split(grad, self.cache_splits, axis=1))


class SoftmaxChannels(Function):
    def forward(self, z):
        _require_4d(z, "softmax_channels")
        if z.shape[1] < 2:
            raise DimensionError(f"softmax_channels needs at least 2 channels, got {z.shape[1]}")
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        self.cache_p = p
        return p

    def backward(self, grad):
        p = self.cache_p
        return (p * (grad - (grad * p).sum(axis=1, keepdims=True)),)


class CrossEntropy(Function):
    def forward(self, probs, target=None, eps: float = PIDNetConfig.PROB_CLAMP_EPS,
                foreground: int = PIDNetConfig.FOREGROUND_CHANNEL):
        y_hat = probs[:, foreground].astype(np.float64)
        clamped = np.clip(y_hat, eps, 1.0 - eps)
        y = target.astype(np.float64)
        count = y.size
        loss = -(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped)).sum() / count

        self.cache_inside = (y_hat >= eps) & (y_hat <= 1.0 - eps)
        self.cache_clamped = clamped
        self.cache_y = y
        self.cache_meta = (probs.shape, probs.dtype, foreground, count)
        return np.asarray(loss, dtype=probs.dtype)

    def backward(self, grad):
        shape, dtype, foreground, count = self.cache_meta
        y, p = self.cache_y, self.cache_clamped
        d_fg = -(y / p - (1.0 - y) / (1.0 - p)) / count
        d_fg = d_fg * self.cache_inside * float(grad)
        grad_probs = np.zeros(shape, dtype=dtype)
        grad_probs[:, foreground] = d_fg
        return (grad_probs,)


class Sum(Function):
    def forward(self, x):
        self.cache_shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.cache_shape, float(grad), dtype=grad.dtype),)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation (no kernel flip) with zero padding

    Args:
        x: Input (N, Cin, H, W)
        weight: Kernel (Cout, Cin, k, k), k odd
        bias: (Cout,)
        stride: Step between windows
        padding: Zero border added on every side

    Returns:
        Tensor (N, Cout, (H + 2p - k) // stride + 1, (W + 2p - k) // stride + 1)
    """
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2,
                     padding: int = 1, output_padding: int = 1) -> Tensor:
    """
    Transposed convolution, the adjoint of conv2d with the same weight

    With the defaults (k = 3, stride 2, padding 1, output_padding 1) the
    output is exactly 2H x 2W. Weight layout is (Cin, Cout, k, k).
    """
    return ConvTranspose2d.apply(x, weight, bias, stride=stride, padding=padding,
                                 output_padding=output_padding)


def maxpool2d(x: Tensor) -> Tensor:
    """2 x 2 max-pooling with stride 2"""
    return MaxPool2d.apply(x)


def pid_downsample(x: Tensor) -> Tensor:
    """
    Pixel interval down-sampling: (N, C, H, W) -> (N, 4C, H/2, W/2)

    out[n, q*C + c, i, j] = x[n, c, 2i + dy, 2j + dx] with q = 2*dy + dx,
    i.e. offsets (0,0), (0,1), (1,0), (1,1). Lossless.
    """
    return PIDDownsample.apply(x)


def pid_reassemble(x: Tensor) -> Tensor:
    """Inverse of pid_downsample: (N, 4C, H, W) -> (N, C, 2H, 2W)"""
    return PIDReassemble.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels, blocks in argument order"""
    return ConcatChannels.apply(*inputs)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis (max-subtracted)"""
    return SoftmaxChannels.apply(logits)


def cross_entropy_loss(probs: Tensor, target: ArrayLike, eps: float = PIDNetConfig.PROB_CLAMP_EPS) -> Tensor:
    """
    Mean binary cross-entropy between the foreground-channel probability and a mask

    Args:
        probs: Softmax output (N, 2, H, W)
        target: Binary mask (N, H, W) with values in {0, 1}
        eps: Probabilities are clamped to [eps, 1 - eps] before the log

    Returns:
        Scalar tensor (mean over all pixels)
    """
    target = np.asarray(target)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise DimensionError(f"cross_entropy_loss expects probabilities (N, 2, H, W), got {probs.shape}")
    if target.shape != (probs.shape[0],) + probs.shape[2:]:
        raise DimensionError(f"target shape {target.shape} does not match probabilities {probs.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ValidationError("cross_entropy_loss target must contain only 0 and 1")
    return CrossEntropy.apply(probs, target=target, eps=eps)


def tensor_sum(x: Tensor) -> Tensor:
    return Sum.apply(x)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.creator.inputs:
            if parent.creator is not None and parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None):
    """
    Populate gradients of every leaf reachable from a scalar loss

    Leaf gradients accumulate into `grad`. The graph is consumed: a second
    call on the same loss raises GraphStateError.

    Args:
        loss: Scalar root of the graph
        params: Optional parameters; those not reached get a zero gradient
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    if loss.creator is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    else:
        if loss.creator.consumed:
            raise GraphStateError("backward called twice on the same computation graph")

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            func = node.creator
            grad = pending.pop(id(node), None)
            if grad is not None:
                for parent, parent_grad in zip(func.inputs, func.backward(grad)):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    if parent.creator is None:
                        parent.grad = parent_grad.copy() if parent.grad is None else parent.grad + parent_grad
                    elif id(parent) in pending:
                        pending[id(parent)] = pending[id(parent)] + parent_grad
                    else:
                        pending[id(parent)] = parent_grad
            func.consumed = True
            func.release()

    if params is not None:
        for param in params:
            if param.grad is None:
                param.grad = np.zeros_like(param.data)


def zero_grad(params: Iterable[Tensor]):
    for param in params:
        param.grad = np.zeros_like(param.data)


def init_parameter(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Uniform in +-sqrt(1 / fan_in), drawn from the given generator"""
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


@dataclass
class AdamState:
    """First/second moment buffers per parameter name and the step counter"""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_parameters(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            t=0,
        )


@dataclass
class SGDState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_parameters(cls, params: Mapping[str, Tensor]) -> "SGDState":
        return cls(velocity={name: np.zeros_like(p.data) for name, p in params.items()}, t=0)


def _check_buffers(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                   buffers: Sequence[Mapping[str, np.ndarray]]):
    for name, param in params.items():
        if name not in grads:
            raise DimensionError(f"missing gradient for parameter '{name}'")
        if np.shape(grads[name]) != param.shape:
            raise DimensionError(f"gradient for '{name}' has shape {np.shape(grads[name])}, parameter is {param.shape}")
        for buffer in buffers:
            if name not in buffer or buffer[name].shape != param.shape:
                raise DimensionError(f"optimizer state does not match parameter '{name}' {param.shape}")


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = PIDNetConfig.LEARNING_RATE, beta1: float = PIDNetConfig.BETA1,
              beta2: float = PIDNetConfig.BETA2, eps: float = PIDNetConfig.ADAM_EPS) -> AdamState:
    """
    Bias-corrected Adam update

    Parameter arrays are replaced, not written in place, so graphs built
    before the step keep the values they saw.

    Returns:
        The state, with t incremented
    """
    _check_buffers(params, grads, (state.m, state.v))
    t = state.t + 1
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, param in params.items():
        g = np.asarray(grads[name], dtype=param.dtype)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name] = m.astype(param.dtype, copy=False)
        state.v[name] = v.astype(param.dtype, copy=False)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)
    state.t = t
    return state


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: SGDState,
             lr: float = PIDNetConfig.LEARNING_RATE, momentum: float = PIDNetConfig.MOMENTUM) -> SGDState:
    _check_buffers(params, grads, (state.velocity,))
    for name, param in params.items():
        g = np.asarray(grads[name], dtype=param.dtype)
        velocity = (momentum * state.velocity[name] + g).astype(param.dtype, copy=False)
        state.velocity[name] = velocity
        param.data = (param.data - lr * velocity).astype(param.dtype, copy=False)
    state.t += 1
    return state
