"""Numpy layer primitives with hand-written backward passes.

Every array is float64 and batched: images are ``(N, C, H, W)``, vectors
``(N, D)``. A single sample is a batch of one. Layers cache what their
backward pass needs during ``forward`` and accumulate parameter gradients
in ``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    trainable: bool = True
    lr_multiplier: float = 1.0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"gradient shape {self.grad.shape} != value shape {self.value.shape}")
        if self.lr_multiplier < 0:
            raise ValueError("lr_multiplier must be nonnegative")

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# functional forms


def conv_output_size(size: int, kernel: int, stride: int = 1) -> int:
    return (size - kernel) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H', W', k, k) view, no copy
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, k, k)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (N, C, H, W), got shape {x.shape}")
    n, c, h, wd = x.shape
    o, c_w, k, k2 = w.shape
    if c != c_w:
        raise ShapeError(f"conv2d: input has {c} channels but kernels expect {c_w}")
    if k != k2:
        raise ShapeError("conv2d: kernels must be square")
    if h < k or wd < k:
        raise ShapeError(f"conv2d: input {h}x{wd} smaller than kernel {k}x{k}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be positive")
    win = _windows(x, k, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H', W', O)
    out += b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, stride: int = 1, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv2d_forward`."""
    k = w.shape[2]
    win = _windows(x, k, stride)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grad_w, grad_b
    ho, wo = grad_out.shape[2:]
    cols = np.tensordot(grad_out, w, axes=([1], [0]))  # (N, H', W', C, k, k)
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    grad_x = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            grad_x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j]
    return grad_x, grad_w, grad_b


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 non-overlapping max pool. Returns the output and the argmax index
    (0..3, row-major within the window, first occurrence on ties)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(grad_out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    mask = idx[..., None] == np.arange(4)
    g = (mask * grad_out[..., None]).reshape(n, c, h2, w2, 2, 2)
    return np.ascontiguousarray(g.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2))


def upsample_nn_forward(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nn_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape} / bias {b.shape}")
    return x @ w.T + b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient.

    ``logits`` may be ``(C,)`` with an integer label or ``(N, C)`` with
    ``N`` labels.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if c < 2:
        raise ValueError("softmax_xent needs at least 2 classes")
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range for {c} classes: {labels.tolist()}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad[0] if single else grad


def mse(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    prediction = np.asarray(prediction, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if prediction.shape != target.shape:
        raise ShapeError(f"mse: shapes differ {prediction.shape} vs {target.shape}")
    diff = prediction - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# layers


class Layer:
    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator, stride: int = 1):
        self.in_channels, self.out_channels, self.kernel, self.stride = in_channels, out_channels, kernel, stride
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        self.w = Parameter(glorot_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out))
        self.b = Parameter(np.zeros(out_channels))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        self._x = x
        return conv2d_forward(x, self.w.value, self.b.value, self.stride)

    def backward(self, grad, need_input_grad=True):
        gx, gw, gb = conv2d_backward(self._x, self.w.value, grad, self.stride, need_input_grad)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return relu_forward(x)

    def backward(self, grad, need_input_grad=True):
        return grad * self._mask


class MaxPool2(Layer):
    def forward(self, x):
        out, self._idx = maxpool2_forward(x)
        return out

    def backward(self, grad, need_input_grad=True):
        return maxpool2_backward(grad, self._idx)


class Upsample2(Layer):
    def forward(self, x):
        return upsample_nn_forward(x)

    def backward(self, grad, need_input_grad=True):
        return upsample_nn_backward(grad)


class ZeroPad(Layer):
    """Symmetric zero padding; lets a valid conv grow the map (decoder use)."""

    def __init__(self, pad: int):
        self.pad = pad

    def forward(self, x):
        p = self.pad
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def backward(self, grad, need_input_grad=True):
        p = self.pad
        return grad[:, :, p : grad.shape[2] - p, p : grad.shape[3] - p]


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad, need_input_grad=True):
        n, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).copy()


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.w = Parameter(glorot_uniform(rng, (out_features, in_features), in_features, out_features))
        self.b = Parameter(np.zeros(out_features))

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        self._x = x
        return dense_forward(x, self.w.value, self.b.value)

    def backward(self, grad, need_input_grad=True):
        self.w.grad += grad.T @ self._x
        self.b.grad += grad.sum(axis=0)
        return grad @ self.w.value if need_input_grad else None


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad, need_input_grad=True):
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            grad = self.layers[i].backward(grad, need_input_grad or i > 0)
        return grad


# ---------------------------------------------------------------------------
# optimisation and verification


def sgd_step(params: Sequence[Parameter], base_lr: float) -> None:
    """Plain SGD; frozen parameters are skipped, all gradients are zeroed."""
    for p in params:
        if p.trainable and p.lr_multiplier != 0.0:
            p.value -= (base_lr * p.lr_multiplier) * p.grad
        p.zero_grad()


def grad_check(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], point: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``fun`` and
    central finite differences. ``fun`` returns ``(value, gradient)``."""
    x = np.array(point, dtype=DTYPE)
    _, analytic = fun(x.copy())
    analytic = np.asarray(analytic, dtype=DTYPE).reshape(x.shape)
    numeric = np.empty_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp, _ = fun(x.copy())
        flat[i] = orig - step
        fm, _ = fun(x.copy())
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * step)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
