"""Dense NCHW tensor primitives with explicit forward and backward passes.

Tensors are numpy ndarrays stored row-major (C order); activations use the
NCHW convention, convolution weights OIHW, transposed-convolution weights
IOHW. Training defaults to float32, gradient-check builds use float64.

Every ``*_backward`` returns the exact gradients of
``sum(d_output * forward(...))`` with respect to the layer inputs and
parameters. Forwards are deterministic: the reduction order per output
element is fixed, so repeated runs on identical inputs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (possibly dilated / transposed) 2-D convolution.

    ``out_pad_h/w`` are only meaningful for transposed convolutions and must
    stay below the corresponding stride.
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    dilation_h: int = 1
    dilation_w: int = 1
    has_bias: bool = True
    out_pad_h: int = 0
    out_pad_w: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w",
                     "stride_h", "stride_w", "dilation_h", "dilation_w"):
            if getattr(self, name) < 1:
                raise ShapeMismatchError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pad_h", "pad_w", "out_pad_h", "out_pad_w"):
            if getattr(self, name) < 0:
                raise ShapeMismatchError(f"ConvSpec.{name} must be >= 0, got {getattr(self, name)}")
        if self.out_pad_h >= self.stride_h or self.out_pad_w >= self.stride_w:
            raise ShapeMismatchError("ConvSpec output padding must be smaller than the stride")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial size of the forward (non-transposed) convolution."""
        oh = (h + 2 * self.pad_h - self.dilation_h * (self.kernel_h - 1) - 1) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.dilation_w * (self.kernel_w - 1) - 1) // self.stride_w + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"convolution output size {oh}x{ow} for input {h}x{w} is not positive")
        return oh, ow

    def transposed_out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h - 1) * self.stride_h - 2 * self.pad_h + self.dilation_h * (self.kernel_h - 1) + 1 + self.out_pad_h
        ow = (w - 1) * self.stride_w - 2 * self.pad_w + self.dilation_w * (self.kernel_w - 1) + 1 + self.out_pad_w
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"transposed convolution output size {oh}x{ow} is not positive")
        return oh, ow


@dataclass
class LayerGrads:
    """Gradients of one layer: d_input plus one entry per parameter tensor."""

    d_input: np.ndarray
    d_weights: list[np.ndarray]


def _check_nchw(x: np.ndarray, channels: int, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f"{what} must be 4-D NCHW, got ndim={x.ndim}")
    if x.shape[1] != channels:
        raise ShapeMismatchError(f"{what} channel count {x.shape[1]} != expected {channels}")


def _tap_slices(spec: ConvSpec, oh: int, ow: int, i: int, j: int):
    """Padded-input view covering kernel tap (i, j) across all output positions."""
    hs = slice(i * spec.dilation_h, i * spec.dilation_h + (oh - 1) * spec.stride_h + 1, spec.stride_h)
    ws = slice(j * spec.dilation_w, j * spec.dilation_w + (ow - 1) * spec.stride_w + 1, spec.stride_w)
    return hs, ws


def _im2col(x: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """(N, C, H, W) -> (N*oh*ow, C*kh*kw) patch matrix, one strided copy per tap."""
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)))
    cols = np.empty((n, oh, ow, c, spec.kernel_h, spec.kernel_w), dtype=x.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            hs, ws = _tap_slices(spec, oh, ow, i, j)
            cols[:, :, :, :, i, j] = xp[:, :, hs, ws].transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * spec.kernel_h * spec.kernel_w)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None,
                   spec: ConvSpec) -> np.ndarray:
    """Cross-correlation with zero padding, stride and dilation.

    ``weights`` is (out_channels, in_channels, kernel_h, kernel_w).
    """
    _check_nchw(x, spec.in_channels)
    wshape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != wshape:
        raise ShapeMismatchError(f"weight shape {weights.shape} != spec shape {wshape}")
    if spec.has_bias:
        if bias is None or bias.shape != (spec.out_channels,):
            raise ShapeMismatchError(f"bias shape must be ({spec.out_channels},)")
    elif bias is not None:
        raise ShapeMismatchError("bias given but spec.has_bias is False")
    n, _, h, w = x.shape
    oh, ow = spec.out_size(h, w)
    cols = _im2col(x, spec, oh, ow)
    y = cols @ weights.reshape(spec.out_channels, -1).T
    if bias is not None:
        y += bias
    return np.ascontiguousarray(y.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2))


def _col2im(dcols: np.ndarray, x_shape: tuple, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col: accumulate patch gradients tap by tap (fixed order)."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * spec.pad_h, w + 2 * spec.pad_w), dtype=dcols.dtype)
    dpatches = dcols.reshape(n, oh, ow, c, spec.kernel_h, spec.kernel_w)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            hs, ws = _tap_slices(spec, oh, ow, i, j)
            dxp[:, :, hs, ws] += dpatches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if spec.pad_h or spec.pad_w:
        dxp = dxp[:, :, spec.pad_h:spec.pad_h + h, spec.pad_w:spec.pad_w + w]
    return np.ascontiguousarray(dxp)


def conv2d_backward(x: np.ndarray, weights: np.ndarray, spec: ConvSpec,
                    d_output: np.ndarray) -> LayerGrads:
    """Gradients for conv2d_forward; d_weights is [dW] or [dW, db]."""
    _check_nchw(x, spec.in_channels)
    n, _, h, w = x.shape
    oh, ow = spec.out_size(h, w)
    if d_output.shape != (n, spec.out_channels, oh, ow):
        raise ShapeMismatchError(
            f"d_output shape {d_output.shape} != forward output {(n, spec.out_channels, oh, ow)}")
    cols = _im2col(x, spec, oh, ow)
    dy = d_output.transpose(0, 2, 3, 1).reshape(n * oh * ow, spec.out_channels)
    d_w = (dy.T @ cols).reshape(weights.shape)
    dcols = dy @ weights.reshape(spec.out_channels, -1)
    d_x = _col2im(dcols, x.shape, spec, oh, ow)
    grads = [d_w]
    if spec.has_bias:
        grads.append(d_output.sum(axis=(0, 2, 3)))
    return LayerGrads(d_x, grads)


def _transposed_conv_as_conv(spec: ConvSpec) -> ConvSpec:
    """The forward convolution whose input-gradient IS this transposed conv."""
    return ConvSpec(in_channels=spec.out_channels, out_channels=spec.in_channels,
                    kernel_h=spec.kernel_h, kernel_w=spec.kernel_w,
                    stride_h=spec.stride_h, stride_w=spec.stride_w,
                    pad_h=spec.pad_h, pad_w=spec.pad_w,
                    dilation_h=spec.dilation_h, dilation_w=spec.dilation_w,
                    has_bias=False)


def transposed_conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None,
                              spec: ConvSpec) -> np.ndarray:
    """Transposed convolution (exact adjoint of conv2d_forward plus bias).

    ``weights`` is (in_channels, out_channels, kernel_h, kernel_w).
    """
    _check_nchw(x, spec.in_channels)
    wshape = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != wshape:
        raise ShapeMismatchError(f"weight shape {weights.shape} != spec shape {wshape}")
    n, _, h, w = x.shape
    oh, ow = spec.transposed_out_size(h, w)
    adj = _transposed_conv_as_conv(spec)
    dy = x.transpose(0, 2, 3, 1).reshape(n * h * w, spec.in_channels)
    dcols = dy @ weights.reshape(spec.in_channels, -1)
    y = _col2im(dcols, (n, spec.out_channels, oh, ow), adj, h, w)
    if spec.has_bias:
        if bias is None or bias.shape != (spec.out_channels,):
            raise ShapeMismatchError(f"bias shape must be ({spec.out_channels},)")
        y += bias[None, :, None, None]
    elif bias is not None:
        raise ShapeMismatchError("bias given but spec.has_bias is False")
    return y


def transposed_conv2d_backward(x: np.ndarray, weights: np.ndarray, spec: ConvSpec,
                               d_output: np.ndarray) -> LayerGrads:
    _check_nchw(x, spec.in_channels)
    n, _, h, w = x.shape
    oh, ow = spec.transposed_out_size(h, w)
    if d_output.shape != (n, spec.out_channels, oh, ow):
        raise ShapeMismatchError(
            f"d_output shape {d_output.shape} != forward output {(n, spec.out_channels, oh, ow)}")
    adj = _transposed_conv_as_conv(spec)
    # d_x: run the adjoint's forward convolution over d_output.
    cols = _im2col(d_output, adj, h, w)
    d_x_mat = cols @ weights.reshape(spec.in_channels, -1).T
    d_x = np.ascontiguousarray(d_x_mat.reshape(n, h, w, spec.in_channels).transpose(0, 3, 1, 2))
    dy = x.transpose(0, 2, 3, 1).reshape(n * h * w, spec.in_channels)
    d_w = (dy.T @ cols).reshape(weights.shape)
    grads = [d_w]
    if spec.has_bias:
        grads.append(d_output.sum(axis=(0, 2, 3)))
    return LayerGrads(d_x, grads)


@dataclass
class PoolIndices:
    """Argmax bookkeeping of a 2x2 max-pool (window-local index in row-major order)."""

    input_shape: tuple
    argmax: np.ndarray  # (N, C, H/2, W/2) values in 0..3


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, PoolIndices]:
    """2x2/stride-2 max pool; ties resolved to the first (row-major) window slot."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"input must be 4-D NCHW, got ndim={x.ndim}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2x2 requires even H and W, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, PoolIndices(x.shape, idx)


def maxpool2x2_backward(indices: PoolIndices, d_output: np.ndarray) -> np.ndarray:
    n, c, h, w = indices.input_shape
    if d_output.shape != (n, c, h // 2, w // 2):
        raise ShapeMismatchError(f"d_output shape {d_output.shape} != pooled shape {(n, c, h // 2, w // 2)}")
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=d_output.dtype)
    np.put_along_axis(dwin, indices.argmax[..., None], d_output[..., None], axis=-1)
    return np.ascontiguousarray(
        dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch-norm inference."""

    mean: np.ndarray
    var: np.ndarray


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray  # (C,)
    train: bool


def batchnorm2d_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                        stats: RunningStats, train: bool,
                        eps: float = BN_EPS, momentum: float = BN_MOMENTUM
                        ) -> tuple[np.ndarray, BNCache]:
    """Batch normalization over N, H, W per channel.

    Train mode normalizes by batch statistics and folds them into the running
    stats with the given momentum; inference mode uses the running stats.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeMismatchError(
            f"batchnorm channel mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        # in-place so external references to the stat arrays stay valid
        stats.mean *= 1.0 - momentum
        stats.mean += momentum * mean
        stats.var *= 1.0 - momentum
        stats.var += momentum * var
    else:
        mean, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, BNCache(xhat, inv_std, train)


def batchnorm2d_backward(cache: BNCache, gamma: np.ndarray, d_output: np.ndarray) -> LayerGrads:
    """Exact batch-statistics gradient (or plain affine gradient in inference mode)."""
    xhat, inv_std = cache.xhat, cache.inv_std
    if d_output.shape != xhat.shape:
        raise ShapeMismatchError(f"d_output shape {d_output.shape} != input shape {xhat.shape}")
    d_gamma = (d_output * xhat).sum(axis=(0, 2, 3))
    d_beta = d_output.sum(axis=(0, 2, 3))
    dxhat = d_output * gamma[None, :, None, None]
    if cache.train:
        n, _, h, w = xhat.shape
        m = n * h * w
        d_x = (dxhat - dxhat.mean(axis=(0, 2, 3))[None, :, None, None]
               - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None] / m
               ) * inv_std[None, :, None, None]
    else:
        d_x = dxhat * inv_std[None, :, None, None]
    return LayerGrads(d_x, [d_gamma, d_beta])


def _reject_nonfinite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")


def relu(x: np.ndarray) -> np.ndarray:
    _reject_nonfinite(x, "relu input")
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, d_output: np.ndarray) -> np.ndarray:
    """Subgradient 0 at exactly 0."""
    return d_output * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    _reject_nonfinite(x, "sigmoid input")
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(y: np.ndarray, d_output: np.ndarray) -> np.ndarray:
    """Takes the forward OUTPUT y = sigmoid(x)."""
    return d_output * y * (1.0 - y)


def channel_softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis of NCHW, shift-invariant per pixel."""
    _reject_nonfinite(x, "softmax input")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def channel_softmax_backward(y: np.ndarray, d_output: np.ndarray) -> np.ndarray:
    """Takes the forward OUTPUT y = channel_softmax(x)."""
    return y * (d_output - (d_output * y).sum(axis=1, keepdims=True))


def fully_connected_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x: (N, F), weights: (F, G), bias: (G,)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeMismatchError(
            f"fully_connected feature mismatch: input {x.shape} vs weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeMismatchError(f"bias shape {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def fully_connected_backward(x: np.ndarray, weights: np.ndarray, d_output: np.ndarray) -> LayerGrads:
    if d_output.shape != (x.shape[0], weights.shape[1]):
        raise ShapeMismatchError(
            f"d_output shape {d_output.shape} != {(x.shape[0], weights.shape[1])}")
    return LayerGrads(d_output @ weights.T, [x.T @ d_output, d_output.sum(axis=0)])
