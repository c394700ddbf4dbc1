"""Composite network blocks: downsampler, Non-bottleneck-1D, vertical spatial
convolution, feature merge, and the information-exchange block.

Blocks own their parameters (``Param``) and cache the activations a train-mode
forward needs for the explicit backward pass. ``backward`` accumulates into
``Param.grad`` (so a shared trunk sums contributions from several heads) and
returns the gradient with respect to the block input.

``gates()`` exposes the non-smooth state of the last forward (ReLU masks,
pool argmaxes); the gradient-check harness uses it to reject finite-difference
steps that cross a kink.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import MissingCacheError, ShapeMismatchError
from .ops import ConvSpec


class Param:
    """Named tensor with a gradient accumulator.

    ``trainable=False`` marks buffers (batch-norm running stats) that are
    serialized with the model but never touched by the optimizer.
    """

    __slots__ = ("name", "data", "grad", "trainable")

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data) if trainable else None
        self.trainable = trainable

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Block:
    """Base class; subclasses set self._params and implement forward/backward."""

    def __init__(self):
        self._params: list[Param] = []
        self._children: list[Block] = []

    def params(self) -> list[Param]:
        out = list(self._params)
        for child in self._children:
            out.extend(child.params())
        return out

    def gates(self) -> list[np.ndarray]:
        out = []
        for child in self._children:
            out.extend(child.gates())
        return out

    def kink_margin(self) -> float:
        """Distance of the closest cached pre-activation to its ReLU/argmax
        switch point. Gradient checks resample inputs while this is below
        10x the finite-difference step."""
        return min((c.kink_margin() for c in self._children), default=np.inf)

    def _need_cache(self, cache):
        if cache is None:
            raise MissingCacheError(f"{type(self).__name__}.backward without train-mode forward")
        return cache


class Conv2d(Block):
    def __init__(self, name: str, spec: ConvSpec, rng, dtype):
        super().__init__()
        self.spec = spec
        shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        self.w = Param(name + ".w", he_normal(rng, shape, fan_in, dtype))
        self.b = Param(name + ".b", np.zeros(spec.out_channels, dtype=dtype)) if spec.has_bias else None
        self._params = [self.w] + ([self.b] if self.b else [])
        self._cache = None

    def forward(self, x, train):
        self._cache = x if train else None
        return ops.conv2d_forward(x, self.w.data, self.b.data if self.b else None, self.spec)

    def backward(self, d_out):
        x = self._need_cache(self._cache)
        g = ops.conv2d_backward(x, self.w.data, self.spec, d_out)
        self.w.grad += g.d_weights[0]
        if self.b:
            self.b.grad += g.d_weights[1]
        return g.d_input


class TransposedConv2d(Block):
    def __init__(self, name: str, spec: ConvSpec, rng, dtype):
        super().__init__()
        self.spec = spec
        shape = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        self.w = Param(name + ".w", he_normal(rng, shape, fan_in, dtype))
        self.b = Param(name + ".b", np.zeros(spec.out_channels, dtype=dtype)) if spec.has_bias else None
        self._params = [self.w] + ([self.b] if self.b else [])
        self._cache = None

    def forward(self, x, train):
        self._cache = x if train else None
        return ops.transposed_conv2d_forward(x, self.w.data, self.b.data if self.b else None, self.spec)

    def backward(self, d_out):
        x = self._need_cache(self._cache)
        g = ops.transposed_conv2d_backward(x, self.w.data, self.spec, d_out)
        self.w.grad += g.d_weights[0]
        if self.b:
            self.b.grad += g.d_weights[1]
        return g.d_input


class BatchNorm2d(Block):
    def __init__(self, name: str, channels: int, dtype):
        super().__init__()
        self.gamma = Param(name + ".gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(name + ".beta", np.zeros(channels, dtype=dtype))
        self.running_mean = Param(name + ".running_mean", np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = Param(name + ".running_var", np.ones(channels, dtype=dtype), trainable=False)
        self.stats = ops.RunningStats(self.running_mean.data, self.running_var.data)
        self._params = [self.gamma, self.beta, self.running_mean, self.running_var]
        self._cache = None

    def forward(self, x, train):
        y, cache = ops.batchnorm2d_forward(x, self.gamma.data, self.beta.data, self.stats, train)
        self._cache = cache if train else None
        return y

    def backward(self, d_out):
        cache = self._need_cache(self._cache)
        g = ops.batchnorm2d_backward(cache, self.gamma.data, d_out)
        self.gamma.grad += g.d_weights[0]
        self.beta.grad += g.d_weights[1]
        return g.d_input


class Linear(Block):
    def __init__(self, name: str, in_features: int, out_features: int, rng, dtype):
        super().__init__()
        self.w = Param(name + ".w", he_normal(rng, (in_features, out_features), in_features, dtype))
        self.b = Param(name + ".b", np.zeros(out_features, dtype=dtype))
        self._params = [self.w, self.b]
        self._cache = None

    def forward(self, x, train):
        self._cache = x if train else None
        return ops.fully_connected_forward(x, self.w.data, self.b.data)

    def backward(self, d_out):
        x = self._need_cache(self._cache)
        g = ops.fully_connected_backward(x, self.w.data, d_out)
        self.w.grad += g.d_weights[0]
        self.b.grad += g.d_weights[1]
        return g.d_input


def _conv1d_spec(channels, kh, kw, dil_h=1, dil_w=1):
    """Shape-preserving asymmetric conv spec (3x1 or 1x3, optionally dilated)."""
    return ConvSpec(in_channels=channels, out_channels=channels, kernel_h=kh, kernel_w=kw,
                    pad_h=dil_h * (kh - 1) // 2, pad_w=dil_w * (kw - 1) // 2,
                    dilation_h=dil_h, dilation_w=dil_w, has_bias=True)


class Downsampler(Block):
    """Stride-2 3x3 convolution concatenated with a 2x2 max pool, then BN + ReLU.

    Convolution fills channels [0, cout-cin), the pooled input the rest.
    """

    def __init__(self, name: str, cin: int, cout: int, rng, dtype):
        super().__init__()
        if cout <= cin:
            raise ShapeMismatchError(f"downsampler needs cout > cin, got {cin} -> {cout}")
        self.cin = cin
        self.conv = Conv2d(name + ".conv",
                           ConvSpec(in_channels=cin, out_channels=cout - cin, kernel_h=3, kernel_w=3,
                                    stride_h=2, stride_w=2, pad_h=1, pad_w=1, has_bias=True),
                           rng, dtype)
        self.bn = BatchNorm2d(name + ".bn", cout, dtype)
        self._children = [self.conv, self.bn]
        self._cache = None

    def forward(self, x, train):
        conv_y = self.conv.forward(x, train)
        pool_y, idx = ops.maxpool2x2_forward(x)
        pre = self.bn.forward(np.concatenate([conv_y, pool_y], axis=1), train)
        self._cache = (idx, pre) if train else None
        return ops.relu(pre)

    def backward(self, d_out):
        idx, pre = self._need_cache(self._cache)
        d_cat = self.bn.backward(ops.relu_backward(pre, d_out))
        split = d_cat.shape[1] - self.cin
        return (self.conv.backward(np.ascontiguousarray(d_cat[:, :split]))
                + ops.maxpool2x2_backward(idx, np.ascontiguousarray(d_cat[:, split:])))

    def gates(self):
        if self._cache is None:
            return []
        idx, pre = self._cache
        return [idx.argmax, pre > 0]

    def kink_margin(self):
        if self._cache is None:
            return np.inf
        _, pre = self._cache
        margin = float(np.abs(pre).min())
        x = self.conv._cache
        if x is not None:
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            top2 = np.sort(win, axis=1)[:, -2:]
            margin = min(margin, float((top2[:, 1] - top2[:, 0]).min()))
        return margin


class NonBottleneck1d(Block):
    """Residual block of factorized 3x1/1x3 convolutions, second pair dilated."""

    def __init__(self, name: str, channels: int, dilation: int, rng, dtype):
        super().__init__()
        self.dilation = dilation
        self.conv1 = Conv2d(name + ".conv1", _conv1d_spec(channels, 3, 1), rng, dtype)
        self.conv2 = Conv2d(name + ".conv2", _conv1d_spec(channels, 1, 3), rng, dtype)
        self.bn1 = BatchNorm2d(name + ".bn1", channels, dtype)
        self.conv3 = Conv2d(name + ".conv3", _conv1d_spec(channels, 3, 1, dil_h=dilation), rng, dtype)
        self.conv4 = Conv2d(name + ".conv4", _conv1d_spec(channels, 1, 3, dil_w=dilation), rng, dtype)
        self.bn2 = BatchNorm2d(name + ".bn2", channels, dtype)
        self._children = [self.conv1, self.conv2, self.bn1, self.conv3, self.conv4, self.bn2]
        self._cache = None

    def forward(self, x, train):
        a1 = self.conv1.forward(x, train)
        a2 = self.conv2.forward(ops.relu(a1), train)
        b1 = self.bn1.forward(a2, train)
        a3 = self.conv3.forward(ops.relu(b1), train)
        a4 = self.conv4.forward(ops.relu(a3), train)
        pre = self.bn2.forward(a4, train) + x
        self._cache = (a1, b1, a3, pre) if train else None
        return ops.relu(pre)

    def backward(self, d_out):
        a1, b1, a3, pre = self._need_cache(self._cache)
        d_pre = ops.relu_backward(pre, d_out)
        d = self.bn2.backward(d_pre)
        d = ops.relu_backward(a3, self.conv4.backward(d))
        d = ops.relu_backward(b1, self.conv3.backward(d))
        d = self.bn1.backward(d)
        d = ops.relu_backward(a1, self.conv2.backward(d))
        return self.conv1.backward(d) + d_pre

    def gates(self):
        if self._cache is None:
            return []
        a1, b1, a3, pre = self._cache
        return [a1 > 0, b1 > 0, a3 > 0, pre > 0]

    def kink_margin(self):
        if self._cache is None:
            return np.inf
        return min(float(np.abs(t).min()) for t in self._cache)


class SpatialConv(Block):
    """Row-sequential vertical message passing (downward or upward).

    The first row in the sweep direction is copied unchanged; every later row
    adds ReLU(already-updated neighbour row correlated with a C x C x w kernel)
    to its own activations. Rows are strictly sequential by definition.
    """

    def __init__(self, name: str, channels: int, width: int, direction: str, rng, dtype):
        super().__init__()
        if width < 1 or width % 2 == 0:
            raise ShapeMismatchError(f"spatial kernel width must be odd, got {width}")
        if direction not in ("down", "up"):
            raise ShapeMismatchError(f"direction must be 'down' or 'up', got {direction!r}")
        self.direction = direction
        self.channels = channels
        self.width = width
        std = 1.0 / np.sqrt(channels * width)
        self.kernel = Param(name + ".kernel",
                            (rng.standard_normal((channels, channels, width)) * std).astype(dtype))
        self._params = [self.kernel]
        self._cache = None

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"spatial conv expects N x {self.channels} x H x W, got {x.shape}")

    def _row_windows(self, row):
        """(N, C, W) -> (N*W, C*w) matrix of horizontal windows, zero padded.

        The (C, tap) pair is flattened with the tap index fastest, matching
        the kernel matrix layouts below.
        """
        n, c, w = row.shape
        half = self.width // 2
        padded = np.pad(row, ((0, 0), (0, 0), (half, half)))
        wins = np.lib.stride_tricks.sliding_window_view(padded, self.width, axis=2)
        return np.ascontiguousarray(wins.transpose(0, 2, 1, 3)).reshape(n * w, c * self.width)

    def forward(self, x, train):
        self._check(x)
        flip = self.direction == "up"
        xs = x[:, :, ::-1, :] if flip else x
        n, c, h, w = x.shape
        y = xs.copy()
        # (m, i, t) -> (m*t, i) so windows @ kmat correlates source channels/taps
        kmat = np.ascontiguousarray(self.kernel.data.transpose(0, 2, 1)).reshape(-1, c)
        pre = np.zeros((h, n, c, w), dtype=x.dtype) if train else None
        for j in range(1, h):
            s = (self._row_windows(y[:, :, j - 1, :]) @ kmat).reshape(n, w, c).transpose(0, 2, 1)
            if train:
                pre[j] = s
            y[:, :, j, :] += np.maximum(s, 0.0)
        self._cache = (y, pre) if train else None
        return np.ascontiguousarray(y[:, :, ::-1, :]) if flip else y

    def backward(self, d_out):
        y, pre = self._need_cache(self._cache)
        flip = self.direction == "up"
        g = (d_out[:, :, ::-1, :] if flip else d_out).astype(y.dtype)  # private copy
        n, c, h, w = y.shape
        # flipped-tap kernel as (i*t, m) for the correlation transpose
        kflip = np.ascontiguousarray(
            self.kernel.data[:, :, ::-1].transpose(1, 2, 0)).reshape(-1, c)
        d_x = np.zeros_like(y)
        d_k = np.zeros((c, self.width, c), dtype=y.dtype)  # (m, t, i) while accumulating
        for j in range(h - 1, 0, -1):
            gj = g[:, :, j, :]
            d_x[:, :, j, :] = gj
            ds = gj * (pre[j] > 0)
            # d_k[m, t, i] += sum_{n, col} windows(prev)[n*col, m*t] * ds[n, i, col]
            ds_cols = np.ascontiguousarray(ds.transpose(0, 2, 1)).reshape(n * w, c)
            d_k += (self._row_windows(y[:, :, j - 1, :]).T @ ds_cols).reshape(c, self.width, c)
            d_prev = (self._row_windows(ds) @ kflip).reshape(n, w, c).transpose(0, 2, 1)
            g[:, :, j - 1, :] += d_prev
        d_x[:, :, 0, :] = g[:, :, 0, :]
        self.kernel.grad += d_k.transpose(0, 2, 1)
        return np.ascontiguousarray(d_x[:, :, ::-1, :]) if flip else d_x

    def gates(self):
        if self._cache is None:
            return []
        _, pre = self._cache
        return [pre > 0]

    def kink_margin(self):
        if self._cache is None:
            return np.inf
        _, pre = self._cache
        return float(np.abs(pre[1:]).min()) if pre.shape[0] > 1 else np.inf


class FeatureMerge(Block):
    """Fuses a just-downsampled skip map with the trunk: channel concat,
    3x3 reduction, 3x1/1x3 refinement, residual back onto the trunk."""

    def __init__(self, name: str, channels: int, rng, dtype):
        super().__init__()
        self.reduce = Conv2d(name + ".reduce",
                             ConvSpec(in_channels=2 * channels, out_channels=channels,
                                      kernel_h=3, kernel_w=3, pad_h=1, pad_w=1, has_bias=True),
                             rng, dtype)
        self.bn1 = BatchNorm2d(name + ".bn1", channels, dtype)
        self.conv_v = Conv2d(name + ".conv_v", _conv1d_spec(channels, 3, 1), rng, dtype)
        self.conv_h = Conv2d(name + ".conv_h", _conv1d_spec(channels, 1, 3), rng, dtype)
        self.bn2 = BatchNorm2d(name + ".bn2", channels, dtype)
        self._children = [self.reduce, self.bn1, self.conv_v, self.conv_h, self.bn2]
        self._cache = None

    def forward(self, skip, trunk, train):
        if skip.shape != trunk.shape:
            raise ShapeMismatchError(f"merge inputs differ: {skip.shape} vs {trunk.shape}")
        cat = np.concatenate([skip, trunk], axis=1)
        b1 = self.bn1.forward(self.reduce.forward(cat, train), train)
        a2 = self.conv_v.forward(ops.relu(b1), train)
        a3 = self.conv_h.forward(ops.relu(a2), train)
        pre = self.bn2.forward(a3, train) + trunk
        self._cache = (b1, a2, pre) if train else None
        return ops.relu(pre)

    def backward(self, d_out):
        b1, a2, pre = self._need_cache(self._cache)
        d_pre = ops.relu_backward(pre, d_out)
        d = self.bn2.backward(d_pre)
        d = ops.relu_backward(a2, self.conv_h.backward(d))
        d = ops.relu_backward(b1, self.conv_v.backward(d))
        d_cat = self.reduce.backward(self.bn1.backward(d))
        c = d_cat.shape[1] // 2
        d_skip = np.ascontiguousarray(d_cat[:, :c])
        d_trunk = np.ascontiguousarray(d_cat[:, c:]) + d_pre
        return d_skip, d_trunk

    def gates(self):
        if self._cache is None:
            return []
        b1, a2, pre = self._cache
        return [b1 > 0, a2 > 0, pre > 0]

    def kink_margin(self):
        if self._cache is None:
            return np.inf
        return min(float(np.abs(t).min()) for t in self._cache)


class InfoExchange(Block):
    """Dilated Non-bottleneck-1D blocks interleaved with a down/up vertical
    spatial pass: d=1, d=2, spatial down, spatial up, d=1, d=4."""

    def __init__(self, name: str, channels: int, spatial_width: int, rng, dtype):
        super().__init__()
        self.steps = [
            NonBottleneck1d(name + ".nb1", channels, 1, rng, dtype),
            NonBottleneck1d(name + ".nb2", channels, 2, rng, dtype),
            SpatialConv(name + ".spatial_down", channels, spatial_width, "down", rng, dtype),
            SpatialConv(name + ".spatial_up", channels, spatial_width, "up", rng, dtype),
            NonBottleneck1d(name + ".nb3", channels, 1, rng, dtype),
            NonBottleneck1d(name + ".nb4", channels, 4, rng, dtype),
        ]
        self._children = self.steps

    def forward(self, x, train):
        for step in self.steps:
            x = step.forward(x, train)
        return x

    def backward(self, d_out):
        for step in reversed(self.steps):
            d_out = step.backward(d_out)
        return d_out
