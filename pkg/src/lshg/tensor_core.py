"""Rank-4 (N, C, H, W) primitives with explicit backward passes.

Tensors are plain ``numpy.ndarray`` objects. Every function here is pure: it
reads its inputs and returns freshly allocated outputs. Reductions are done
in a fixed order so repeated calls are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import GeometryError, NumericError, ShapeError, StatisticsError

FLOAT_DTYPES = (np.float32, np.float64)


def check_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 NCHW array, got {getattr(x, 'shape', type(x))}")
    if x.dtype.type not in FLOAT_DTYPES:
        raise ShapeError(f"{name} dtype must be float32 or float64, got {x.dtype}")
    return x


def check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{op} produced non-finite values")
    return x


def conv_out_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel", "stride", "dilation", "groups"):
            value = getattr(self, field)
            if int(value) != value or value < 1:
                raise ShapeError(f"ConvSpec.{field} must be a positive integer, got {value!r}")
        if self.padding < 0:
            raise ShapeError(f"ConvSpec.padding must be non-negative, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def fan_in(self) -> int:
        return (self.in_channels // self.groups) * self.kernel * self.kernel

    def param_count(self) -> int:
        return self.out_channels * self.fan_in + (self.out_channels if self.has_bias else 0)

    def output_hw(self, h: int, w: int):
        oh = conv_out_size(h, self.kernel, self.stride, self.padding, self.dilation)
        ow = conv_out_size(w, self.kernel, self.stride, self.padding, self.dilation)
        if oh < 1 or ow < 1:
            raise GeometryError(f"convolution {self} on {h}x{w} input gives empty {oh}x{ow} output")
        return oh, ow

    def macs(self, h: int, w: int) -> int:
        """Multiply-accumulates of the weight taps for one image of size h x w."""
        oh, ow = self.output_hw(h, w)
        return oh * ow * self.out_channels * self.fan_in


def _tap_slice(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xt: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """(C, N, Hp, Wp) padded input -> (C*k*k, N*oh*ow) patch matrix."""
    c, n = xt.shape[:2]
    k, s, d = spec.kernel, spec.stride, spec.dilation
    if k == 1 and s == 1:
        return xt.reshape(c, -1)
    cols = np.empty((c, k, k, n, oh, ow), dtype=xt.dtype)
    for i in range(k):
        rows = _tap_slice(i * d, oh, s)
        for j in range(k):
            cols[:, i, j] = xt[:, :, rows, _tap_slice(j * d, ow, s)]
    return cols.reshape(c * k * k, -1)


def _col2im_add(grad_cols: np.ndarray, grad_xt: np.ndarray, spec: ConvSpec, oh: int, ow: int):
    """Scatter-adds a patch-matrix gradient back into ``grad_xt`` (C, N, Hp, Wp) in place."""
    c, n = grad_xt.shape[:2]
    k, s, d = spec.kernel, spec.stride, spec.dilation
    gc = grad_cols.reshape(c, k, k, n, oh, ow)
    for i in range(k):
        rows = _tap_slice(i * d, oh, s)
        for j in range(k):
            grad_xt[:, :, rows, _tap_slice(j * d, ow, s)] += gc[:, i, j]


def _check_conv_args(x, spec: ConvSpec, weight):
    check_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {spec.in_channels}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {tuple(weight.shape)} != expected {spec.weight_shape}")
    return spec.output_hw(x.shape[2], x.shape[3])


def conv2d_forward(x: np.ndarray, spec: ConvSpec, weight: np.ndarray,
                   bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Dilated, strided, grouped cross-correlation.

    Loops over the k*k kernel taps; each tap is one channel-mixing matmul
    (or a broadcast multiply for depthwise groups).
    """
    oh, ow = _check_conv_args(x, spec, weight)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    weight = weight.astype(x.dtype, copy=False)
    n = x.shape[0]
    k, s, d = spec.kernel, spec.stride, spec.dilation
    xp = _pad(x, spec.padding)
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups

    if cg == 1:
        # depthwise (optionally with a channel multiplier)
        src = np.repeat(xp, og, axis=1) if og > 1 else xp
        out = np.zeros((n, spec.out_channels, oh, ow), dtype=x.dtype)
        for i in range(k):
            rows = _tap_slice(i * d, oh, s)
            for j in range(k):
                cols = _tap_slice(j * d, ow, s)
                out += weight[:, 0, i, j][None, :, None, None] * src[:, :, rows, cols]
    else:
        xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))  # C, N, Hp, Wp
        out_t = np.empty((spec.out_channels, n * oh * ow), dtype=x.dtype)
        for g in range(spec.groups):
            ci, co = slice(g * cg, (g + 1) * cg), slice(g * og, (g + 1) * og)
            cols = _im2col(xt[ci], spec, oh, ow)
            out_t[co] = weight[co].reshape(og, -1) @ cols
        out = np.ascontiguousarray(out_t.reshape(spec.out_channels, n, oh, ow).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.astype(x.dtype, copy=False)[None, :, None, None]
    return check_finite(out, "conv2d_forward")


def conv2d_backward(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, grad_out: np.ndarray,
                    with_bias: Optional[bool] = None):
    """Returns ``(grad_input, grad_weight, grad_bias)``; grad_bias is None without a bias."""
    oh, ow = _check_conv_args(x, spec, weight)
    n = x.shape[0]
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, spec.out_channels, oh, ow)}")
    with_bias = spec.has_bias if with_bias is None else with_bias
    weight = weight.astype(x.dtype, copy=False)
    grad_out = grad_out.astype(x.dtype, copy=False)
    k, s, d, p = spec.kernel, spec.stride, spec.dilation, spec.padding
    xp = _pad(x, p)
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    grad_w = np.zeros(spec.weight_shape, dtype=x.dtype)

    if cg == 1:
        src = np.repeat(xp, og, axis=1) if og > 1 else xp
        grad_src = np.zeros_like(src)
        for i in range(k):
            rows = _tap_slice(i * d, oh, s)
            for j in range(k):
                cols = _tap_slice(j * d, ow, s)
                grad_w[:, 0, i, j] = np.einsum("nchw,nchw->c", grad_out, src[:, :, rows, cols])
                grad_src[:, :, rows, cols] += weight[:, 0, i, j][None, :, None, None] * grad_out
        if og > 1:
            grad_src = grad_src.reshape(n, spec.in_channels, og, *grad_src.shape[2:]).sum(axis=2)
        grad_xp = grad_src
    else:
        xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
        gt = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(spec.out_channels, -1)
        grad_xt = np.zeros_like(xt)
        for g in range(spec.groups):
            ci, co = slice(g * cg, (g + 1) * cg), slice(g * og, (g + 1) * og)
            cols = _im2col(xt[ci], spec, oh, ow)
            grad_w[co] = (gt[co] @ cols.T).reshape(og, cg, k, k)
            grad_cols = weight[co].reshape(og, -1).T @ gt[co]
            _col2im_add(grad_cols, grad_xt[ci], spec, oh, ow)
        grad_xp = grad_xt.transpose(1, 0, 2, 3)
    if p:
        grad_xp = grad_xp[:, :, p:-p, p:-p]
    grad_x = np.ascontiguousarray(grad_xp)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if with_bias else None
    return grad_x, grad_w, grad_b


def maxpool2x2_forward(x: np.ndarray):
    """2x2/2 max pooling.

    Returns the pooled tensor and, per output cell, the flat ``row * W + col``
    position of the winner inside its input plane. Ties go to the first
    element in row-major window order.
    """
    check_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise GeometryError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + local // 2
    cols = 2 * np.arange(w // 2)[None, :] + local % 2
    return np.ascontiguousarray(out), rows * w + cols


def maxpool2x2_backward(grad_out: np.ndarray, indices: np.ndarray, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    if grad_out.shape != (n, c, h // 2, w // 2) or indices.shape != grad_out.shape:
        raise ShapeError(f"grad_out {grad_out.shape} / indices {indices.shape} do not match input {input_shape}")
    local = (indices // w) % 2 * 2 + indices % 2
    win = (np.arange(4) == local[..., None]) * grad_out[..., None]
    grad = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return np.ascontiguousarray(grad, dtype=grad_out.dtype)


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    check_tensor(x)
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample_nearest2x_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ShapeError(f"upsample gradient must have even spatial dims, got {h}x{w}")
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class BatchNormResult(NamedTuple):
    out: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    cache: tuple


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training: bool,
                      momentum: float = 0.1, eps: float = 1e-5) -> BatchNormResult:
    """Per-channel batch normalization.

    Train mode normalizes with the population variance of the batch and
    updates the running variance with the unbiased estimate.
    """
    check_tensor(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    dt = x.dtype
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise StatisticsError(f"train-mode batchnorm needs at least 2 values per channel, got {count}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * var * (count / (count - 1))
        new_mean = new_mean.astype(running_mean.dtype)
        new_var = new_var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)
        new_mean, new_var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.astype(dt)[None, :, None, None] + beta.astype(dt)[None, :, None, None]
    check_finite(out, "batchnorm_forward")
    return BatchNormResult(out, new_mean, new_var, (xhat, inv_std, gamma.astype(dt), training))


def batchnorm_backward(grad_out: np.ndarray, cache):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, training = cache
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {xhat.shape}")
    grad_gamma = np.einsum("nchw,nchw->c", grad_out, xhat)
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g = grad_out * gamma[None, :, None, None]
    if training:
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        grad_x = (inv_std / m)[None, :, None, None] * (
            m * g
            - g.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * np.einsum("nchw,nchw->c", g, xhat)[None, :, None, None]
        )
    else:
        grad_x = g * inv_std[None, :, None, None]
    return grad_x, grad_gamma, grad_beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return a + b


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts:
        check_tensor(p)
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: batch/spatial mismatch {p.shape} vs {ref}")
    return np.concatenate(parts, axis=1)


def concat_channels_backward(grad_out: np.ndarray, sizes: Sequence[int]):
    if sum(sizes) != grad_out.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {grad_out.shape[1]} channels")
    return np.split(grad_out, np.cumsum(sizes)[:-1], axis=1)
