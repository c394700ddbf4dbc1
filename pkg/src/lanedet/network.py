"""Single-encoder / double-decoder lane detection model.

Encoder: downsample 3->c1->c2, five Non-bottleneck-1D blocks, feature merge,
downsample to c3, information exchange, second feature merge. The
segmentation decoder upsamples back to input resolution with transposed
convolutions and Non-bottleneck-1D blocks; the existence decoder squeezes the
encoder output through a strided convolution and two fully-connected layers
into 4 sigmoid probabilities.

Weight files ("LDNW", version 1, little-endian) store every parameter and
batch-norm running stat as float32 in construction order:
u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims, raw row-major values.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .blocks import (BatchNorm2d, Block, Conv2d, Downsampler, FeatureMerge,
                     InfoExchange, Linear, NonBottleneck1d, Param, SpatialConv,
                     TransposedConv2d)
from .errors import FormatError, MissingCacheError, ShapeMismatchError
from .ops import ConvSpec

MAGIC = b"LDNW"
VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 288
    input_w: int = 800
    num_lanes: int = 4
    num_classes: int = 5
    stage_channels: tuple[int, int, int] = (16, 64, 128)
    spatial_kernel_width: int = 9
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_h % 8 or self.input_w % 8:
            raise ShapeMismatchError(
                f"input size {self.input_h}x{self.input_w} must be divisible by 8")
        if self.input_h < 16 or self.input_w < 16:
            raise ShapeMismatchError("input size must be at least 16x16")
        if self.num_classes != self.num_lanes + 1:
            raise ShapeMismatchError("num_classes must equal num_lanes + 1")
        c1, c2, c3 = self.stage_channels
        if not 3 < c1 < c2 < c3:
            raise ShapeMismatchError(f"stage channels must grow from >3: {self.stage_channels}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


MINIATURE = ModelConfig(input_h=16, input_w=24, stage_channels=(4, 8, 16),
                        spatial_kernel_width=9, dtype="float64")


@dataclass
class ModelOutput:
    seg_logits: np.ndarray   # N x num_classes x H x W
    exist_probs: np.ndarray  # N x num_lanes in [0, 1]


class Encoder(Block):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c1, c2, c3 = cfg.stage_channels
        self.down1 = Downsampler("enc.down1", 3, c1, rng, dtype)
        self.down2 = Downsampler("enc.down2", c1, c2, rng, dtype)
        self.mid = [NonBottleneck1d(f"enc.mid{i + 1}", c2, 1, rng, dtype) for i in range(5)]
        self.merge1 = FeatureMerge("enc.merge1", c2, rng, dtype)
        self.down3 = Downsampler("enc.down3", c2, c3, rng, dtype)
        self.exchange = InfoExchange("enc.exchange", c3, cfg.spatial_kernel_width, rng, dtype)
        self.merge2 = FeatureMerge("enc.merge2", c3, rng, dtype)
        self._children = [self.down1, self.down2, *self.mid, self.merge1,
                          self.down3, self.exchange, self.merge2]

    def forward(self, x, train):
        d1 = self.down1.forward(x, train)
        d2 = self.down2.forward(d1, train)
        t = d2
        for nb in self.mid:
            t = nb.forward(t, train)
        m1 = self.merge1.forward(d2, t, train)
        d3 = self.down3.forward(m1, train)
        ex = self.exchange.forward(d3, train)
        return self.merge2.forward(d3, ex, train)

    def backward(self, d_out):
        d_skip2, d_trunk2 = self.merge2.backward(d_out)
        d_d3 = d_skip2 + self.exchange.backward(d_trunk2)
        d_m1 = self.down3.backward(d_d3)
        d_skip1, d_trunk1 = self.merge1.backward(d_m1)
        d_t = d_trunk1
        for nb in reversed(self.mid):
            d_t = nb.backward(d_t)
        d_d2 = d_skip1 + d_t
        return self.down1.backward(self.down2.backward(d_d2))


class Upsampler(Block):
    """Transposed conv (stride 2, exact doubling) followed by BN + ReLU."""

    def __init__(self, name, cin, cout, rng, dtype):
        super().__init__()
        self.deconv = TransposedConv2d(
            name + ".deconv",
            ConvSpec(in_channels=cin, out_channels=cout, kernel_h=3, kernel_w=3,
                     stride_h=2, stride_w=2, pad_h=1, pad_w=1, has_bias=True,
                     out_pad_h=1, out_pad_w=1),
            rng, dtype)
        self.bn = BatchNorm2d(name + ".bn", cout, dtype)
        self._children = [self.deconv, self.bn]
        self._cache = None

    def forward(self, x, train):
        pre = self.bn.forward(self.deconv.forward(x, train), train)
        self._cache = pre if train else None
        return ops.relu(pre)

    def backward(self, d_out):
        pre = self._need_cache(self._cache)
        return self.deconv.backward(self.bn.backward(ops.relu_backward(pre, d_out)))

    def gates(self):
        return [] if self._cache is None else [self._cache > 0]

    def kink_margin(self):
        return np.inf if self._cache is None else float(np.abs(self._cache).min())


class SegDecoder(Block):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c1, c2, c3 = cfg.stage_channels
        self.up1 = Upsampler("seg.up1", c3, c2, rng, dtype)
        self.nb1 = [NonBottleneck1d(f"seg.nb1{chr(97 + i)}", c2, 1, rng, dtype) for i in range(2)]
        self.up2 = Upsampler("seg.up2", c2, c1, rng, dtype)
        self.nb2 = [NonBottleneck1d(f"seg.nb2{chr(97 + i)}", c1, 1, rng, dtype) for i in range(2)]
        self.head = TransposedConv2d(
            "seg.head",
            ConvSpec(in_channels=c1, out_channels=cfg.num_classes, kernel_h=3, kernel_w=3,
                     stride_h=2, stride_w=2, pad_h=1, pad_w=1, has_bias=True,
                     out_pad_h=1, out_pad_w=1),
            rng, dtype)
        self._children = [self.up1, *self.nb1, self.up2, *self.nb2, self.head]

    def forward(self, x, train):
        t = self.up1.forward(x, train)
        for nb in self.nb1:
            t = nb.forward(t, train)
        t = self.up2.forward(t, train)
        for nb in self.nb2:
            t = nb.forward(t, train)
        return self.head.forward(t, train)

    def backward(self, d_out):
        d = self.head.backward(d_out)
        for nb in reversed(self.nb2):
            d = nb.backward(d)
        d = self.up2.backward(d)
        for nb in reversed(self.nb1):
            d = nb.backward(d)
        return self.up1.backward(d)


class ExistDecoder(Block):
    """Strided conv squeeze, two fully-connected layers, sigmoid."""

    HIDDEN = 64

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c3 = cfg.stage_channels[2]
        squeeze = max(c3 // 4, 1)
        self.conv = Conv2d("exist.conv",
                           ConvSpec(in_channels=c3, out_channels=squeeze, kernel_h=3, kernel_w=3,
                                    stride_h=2, stride_w=2, pad_h=1, pad_w=1, has_bias=True),
                           rng, dtype)
        self.bn = BatchNorm2d("exist.bn", squeeze, dtype)
        eh = (cfg.input_h // 8 - 1) // 2 + 1
        ew = (cfg.input_w // 8 - 1) // 2 + 1
        self.flat_features = squeeze * eh * ew
        self.fc1 = Linear("exist.fc1", self.flat_features, self.HIDDEN, rng, dtype)
        self.fc2 = Linear("exist.fc2", self.HIDDEN, cfg.num_lanes, rng, dtype)
        self._children = [self.conv, self.bn, self.fc1, self.fc2]
        self._cache = None

    def forward(self, x, train):
        pre = self.bn.forward(self.conv.forward(x, train), train)
        flat = ops.relu(pre).reshape(x.shape[0], -1)
        h1 = self.fc1.forward(flat, train)
        probs = ops.sigmoid(self.fc2.forward(ops.relu(h1), train))
        self._cache = (pre, h1, probs) if train else None
        return probs

    def backward(self, d_probs):
        pre, h1, probs = self._need_cache(self._cache)
        d = ops.sigmoid_backward(probs, d_probs)
        d = ops.relu_backward(h1, self.fc2.backward(d))
        d_flat = self.fc1.backward(d)
        d_pre = ops.relu_backward(pre, d_flat.reshape(pre.shape))
        return self.conv.backward(self.bn.backward(d_pre))

    def gates(self):
        if self._cache is None:
            return []
        pre, h1, _ = self._cache
        return [pre > 0, h1 > 0]

    def kink_margin(self):
        if self._cache is None:
            return np.inf
        pre, h1, _ = self._cache
        return min(float(np.abs(pre).min()), float(np.abs(h1).min()))


class Model(Block):
    """The assembled network plus its ordered parameter list."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = cfg.np_dtype
        self.encoder = Encoder(cfg, rng, dtype)
        self.seg = SegDecoder(cfg, rng, dtype)
        self.exist = ExistDecoder(cfg, rng, dtype)
        self._children = [self.encoder, self.seg, self.exist]
        names = [p.name for p in self.params()]
        assert len(names) == len(set(names)), "parameter names must be unique"

    def forward(self, x, train=False) -> ModelOutput:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.cfg.input_h \
                or x.shape[3] != self.cfg.input_w:
            raise ShapeMismatchError(
                f"input {x.shape} != (N, 3, {self.cfg.input_h}, {self.cfg.input_w})")
        x = np.ascontiguousarray(x, dtype=self.cfg.np_dtype)
        enc = self.encoder.forward(x, train)
        return ModelOutput(self.seg.forward(enc, train), self.exist.forward(enc, train))

    def backward(self, d_seg_logits, d_exist_probs):
        """Chain-rule gradients into Param.grad; the shared encoder receives
        the sum of both decoder contributions. Returns d_input."""
        d_enc = self.seg.backward(d_seg_logits) + self.exist.backward(d_exist_probs)
        return self.encoder.backward(d_enc)

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params() if p.trainable]

    def zero_grad(self):
        for p in self.trainable_params():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params() if p.trainable)


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def save_weights(model: Model, path: str) -> None:
    """Write the LDNW weight file atomically (temp file + rename)."""
    params = model.params()
    payload = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        payload.append(struct.pack("<H", len(name)))
        payload.append(name)
        payload.append(struct.pack("<B", arr.ndim))
        payload.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(arr.tobytes())
    blob = b"".join(payload)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"weight file truncated at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path: str, cfg: ModelConfig) -> Model:
    """Rebuild a model for cfg and fill it from an LDNW file.

    Tensor names and shapes must match the configuration's construction order
    exactly; the first mismatch is reported by name.
    """
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != MAGIC:
        raise FormatError("bad magic: not an LDNW weight file")
    version, count = rd.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    model = build_model(cfg)
    params = model.params()
    if count != len(params):
        raise FormatError(f"weight file has {count} tensors, model needs {len(params)}")
    for p in params:
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        if name != p.name:
            raise FormatError(f"tensor name mismatch: file has {name!r}, model expects {p.name!r}")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I") if ndim else ()
        if shape != p.data.shape:
            raise FormatError(f"tensor {name!r} shape {shape} != expected {p.data.shape}")
        raw = rd.take(int(np.prod(shape, dtype=np.int64)) * 4 if ndim else 4)
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        p.data[...] = arr.astype(p.data.dtype)
    if rd.pos != len(rd.blob):
        raise FormatError(f"{len(rd.blob) - rd.pos} trailing bytes after last tensor")
    return model
