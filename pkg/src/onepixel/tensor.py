"""Forward-pass primitives over feature maps.

A feature map is a float32 array laid out ``(height, width, channels)``.
Every primitive also accepts a leading batch axis ``(n, height, width,
channels)`` so that a whole DE population can be pushed through a network in
one call; the batch axis is preserved in the output.

Convolution is cross-correlation (no kernel flip) with zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from onepixel.errors import ConfigError, ParameterError, ShapeError

DTYPE = np.float32

POOL_KINDS = ("max", "avg", "global_avg")


@dataclass(frozen=True)
class KernelBank:
    """Convolution weights ``(out, in, kh, kw)`` plus one bias per output."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=DTYPE)
        b = np.asarray(self.bias, dtype=DTYPE)
        if w.ndim != 4:
            raise ShapeError(f"kernel weights must be rank 4, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"feature map must be (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _unbatch(y: np.ndarray, single: bool) -> np.ndarray:
    return y[0] if single else y


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, kernels: KernelBank, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Zero-padded 2-D cross-correlation of ``x`` with every kernel in the bank."""
    xb, single = _as_batch(x)
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    if kernels.in_channels != xb.shape[3]:
        raise ConfigError(
            f"kernel bank expects {kernels.in_channels} input channels, input has {xb.shape[3]}"
        )
    kh, kw = kernels.kernel_size
    out_h = conv_output_size(xb.shape[1], kh, stride, padding)
    out_w = conv_output_size(xb.shape[2], kw, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"convolution output would be {out_h}x{out_w}")
    if padding:
        xb = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    # windows: (n, out_h, out_w, c, kh, kw)
    windows = sliding_window_view(xb, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    windows = windows[:, :out_h, :out_w]
    y = np.tensordot(windows, kernels.weights, axes=([3, 4, 5], [1, 2, 3]))
    y += kernels.bias
    return _unbatch(y.astype(DTYPE, copy=False), single)


def batchnorm_inference(x, gamma, beta, running_mean, running_var, epsilon: float = 1e-5) -> np.ndarray:
    """Per-channel ``gamma * (x - mean) / sqrt(var + eps) + beta``."""
    xb, single = _as_batch(x)
    params = [np.asarray(p, dtype=DTYPE).reshape(-1) for p in (gamma, beta, running_mean, running_var)]
    channels = xb.shape[3]
    for name, p in zip(("gamma", "beta", "running_mean", "running_var"), params):
        if p.shape != (channels,):
            raise ShapeError(f"{name} has length {p.shape[0]}, expected {channels}")
    gamma, beta, mean, var = params
    if np.any(var < 0):
        raise ParameterError("running_var must be non-negative")
    if epsilon < 0:
        raise ParameterError("epsilon must be non-negative")
    denom = np.sqrt(var + DTYPE(epsilon))
    if np.any(denom == 0):
        raise ParameterError("running_var + epsilon must be positive")
    scale = gamma / denom
    y = (xb - mean) * scale + beta
    return _unbatch(y.astype(DTYPE, copy=False), single)


def relu(x) -> np.ndarray:
    xb, single = _as_batch(x)
    return _unbatch(np.maximum(xb, DTYPE(0)), single)


def pool(x, kind: str, size: int = 2, stride: int | None = None) -> np.ndarray:
    """Max / average pooling over ``size`` windows, or global average.

    ``stride`` defaults to ``size``. No padding; trailing rows/columns that do
    not fill a window are dropped.
    """
    xb, single = _as_batch(x)
    if kind not in POOL_KINDS:
        raise ConfigError(f"unknown pool kind {kind!r}")
    if kind == "global_avg":
        y = xb.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(DTYPE)
        return _unbatch(y, single)
    stride = size if stride is None else stride
    if size < 1 or stride < 1:
        raise ConfigError(f"invalid pool size={size} / stride={stride}")
    if size > xb.shape[1] or size > xb.shape[2]:
        raise ShapeError(f"pool window {size} larger than input {xb.shape[1]}x{xb.shape[2]}")
    windows = sliding_window_view(xb, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    if kind == "max":
        y = windows.max(axis=(4, 5))
    else:
        y = windows.mean(axis=(4, 5), dtype=np.float64).astype(DTYPE)
    return _unbatch(np.ascontiguousarray(y), single)


def dense(x, weights, bias) -> np.ndarray:
    """``W @ x + b``. ``x`` is a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(weights, dtype=DTYPE)
    b = np.asarray(bias, dtype=DTYPE)
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"dense weights {w.shape} / bias {b.shape} inconsistent")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense layer expects {w.shape[1]} inputs, got shape {x.shape}")
    return (x @ w.T + b).astype(DTYPE, copy=False)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    z = np.asarray(logits, dtype=DTYPE)
    if z.size == 0 or z.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z.astype(np.float64))
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)


def residual_add(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"residual operands differ in shape: {a.shape} vs {b.shape}")
    return a + b
