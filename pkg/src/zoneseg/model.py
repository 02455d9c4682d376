"""Residual-UNet segmentation models and their weight serialisation.

Two architectures share one implementation, selected by config:

- ``skip_mode="addition"``: residual blocks (conv3x3-norm-ReLU-conv3x3-
  norm on the main path, a 1x1 convolution on the identity path, ReLU
  after the sum) and addition skip connections.  Addition requires the
  encoder and decoder channel counts to agree at every level, which is
  verified at build time.
- ``skip_mode="concatenation"``: plain double-conv blocks and channel
  concatenation skips; decoder block input channels double at each
  merge.  This is the conventional UNet baseline.

Channel plan for depth d and base channels b: encoder level i maps
(in_channels if i == 0 else b*2^(i-1)) -> b*2^i, the bottleneck maps
b*2^(d-1) -> b*2^d, and decoder level i upsamples b*2^(i+1) -> b*2^i
before merging with the level-i skip.  A 1x1 head maps b to num_classes
and a channel softmax turns logits into per-pixel probabilities.

Weight files use the MRWT layout documented in ``encode_weights``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import (
    BadMagicError,
    ConfigError,
    FingerprintMismatchError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .optim import Parameter

WEIGHT_MAGIC = b"MRWT"
WEIGHT_VERSION = 1

SKIP_MODES = ("addition", "concatenation")
UPSAMPLE_MODES = ("tconv", "nearest")


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters for one cascade stage."""

    in_channels: int = 1
    num_classes: int = 2
    depth: int = 4
    base_channels: int = 16
    skip_mode: str = "addition"
    use_norm: bool = True
    upsample: str = "tconv"

    def __post_init__(self):
        for name in ("in_channels", "num_classes", "depth", "base_channels"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"NetConfig.{name} must be a positive int, got {v!r}")
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(
                f"NetConfig.skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}"
            )
        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigError(
                f"NetConfig.upsample must be one of {UPSAMPLE_MODES}, got {self.upsample!r}"
            )

    def canonical_string(self) -> str:
        """Key-sorted text form hashed into the weight-file fingerprint."""
        return (
            f"base_channels={self.base_channels};depth={self.depth};"
            f"in_channels={self.in_channels};num_classes={self.num_classes};"
            f"skip_mode={self.skip_mode};upsample={self.upsample};"
            f"use_norm={int(self.use_norm)}"
        )

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical_string().encode("utf-8")).digest()


# ------------------------------------------------------------------ layers


class _Conv:
    def __init__(self, net: "SegNet", name: str, ci: int, co: int, k: int, pad: int):
        self.name = name
        self.pad = pad
        self.fan_in = ci * k * k
        self.w = net._add_param(f"{name}.w", (co, ci, k, k))
        self.b = net._add_param(f"{name}.b", (co,))

    def init(self, rng: np.random.Generator) -> None:
        self.w.value[...] = rng.normal(0.0, np.sqrt(2.0 / self.fan_in), self.w.value.shape)
        self.b.value[...] = 0.0

    def forward(self, x):
        return ops.conv2d(x, self.w.value, self.b.value, stride=1, padding=self.pad)

    def backward(self, gy, cache):
        dx, dw, db = ops.conv2d_backward(gy, cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class _TConv:
    def __init__(self, net: "SegNet", name: str, ci: int, co: int, k: int, stride: int):
        self.name = name
        self.stride = stride
        self.fan_in = ci * k * k
        self.w = net._add_param(f"{name}.w", (ci, co, k, k))
        self.b = net._add_param(f"{name}.b", (co,))

    def init(self, rng: np.random.Generator) -> None:
        self.w.value[...] = rng.normal(0.0, np.sqrt(2.0 / self.fan_in), self.w.value.shape)
        self.b.value[...] = 0.0

    def forward(self, x):
        return ops.transposed_conv2d(x, self.w.value, self.b.value, stride=self.stride)

    def backward(self, gy, cache):
        dx, dw, db = ops.transposed_conv2d_backward(gy, cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class _Norm:
    def __init__(self, net: "SegNet", name: str, c: int):
        self.name = name
        self.net = net
        self.gamma = net._add_param(f"{name}.gamma", (c,))
        self.beta = net._add_param(f"{name}.beta", (c,))
        self.mean_key = f"{name}.running_mean"
        self.var_key = f"{name}.running_var"
        net.buffers[self.mean_key] = np.zeros(c)
        net.buffers[self.var_key] = np.ones(c)

    def init(self, rng: np.random.Generator) -> None:
        self.gamma.value[...] = 1.0
        self.beta.value[...] = 0.0
        self.net.buffers[self.mean_key][...] = 0.0
        self.net.buffers[self.var_key][...] = 1.0

    def forward(self, x, train: bool, update_stats: bool):
        y, cache, new_mean, new_var = ops.batchnorm2d(
            x,
            self.gamma.value,
            self.beta.value,
            self.net.buffers[self.mean_key],
            self.net.buffers[self.var_key],
            train=train,
        )
        if train and update_stats:
            self.net.buffers[self.mean_key] = new_mean
            self.net.buffers[self.var_key] = new_var
        return y, cache

    def backward(self, gy, cache):
        dx, dgamma, dbeta = ops.batchnorm2d_backward(gy, cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class _NoNorm:
    """Stands in for _Norm when normalisation is disabled."""

    def __init__(self):
        pass

    def init(self, rng) -> None:
        pass

    def forward(self, x, train, update_stats):
        return x, None

    def backward(self, gy, cache):
        return gy


def _make_norm(net: "SegNet", name: str, c: int):
    return _Norm(net, name, c) if net.config.use_norm else _NoNorm()


class _ResidualBlock:
    """conv3x3-norm-ReLU-conv3x3-norm plus a 1x1 identity path, ReLU after the sum."""

    def __init__(self, net: "SegNet", name: str, ci: int, co: int):
        self.name = name
        self.conv1 = _Conv(net, f"{name}.conv1", ci, co, 3, pad=1)
        self.norm1 = _make_norm(net, f"{name}.norm1", co)
        self.conv2 = _Conv(net, f"{name}.conv2", co, co, 3, pad=1)
        self.norm2 = _make_norm(net, f"{name}.norm2", co)
        self.proj = _Conv(net, f"{name}.proj", ci, co, 1, pad=0)

    def init(self, rng: np.random.Generator) -> None:
        for layer in (self.conv1, self.norm1, self.conv2, self.norm2, self.proj):
            layer.init(rng)

    def forward(self, x, train: bool, update_stats: bool):
        a, c1 = self.conv1.forward(x)
        n1, cn1 = self.norm1.forward(a, train, update_stats)
        r1 = ops.relu(n1)
        a2, c2 = self.conv2.forward(r1)
        n2, cn2 = self.norm2.forward(a2, train, update_stats)
        shortcut, cp = self.proj.forward(x)
        pre = ops.add(n2, shortcut)
        out = ops.relu(pre)
        cache = (c1, cn1, n1, c2, cn2, cp, pre)
        return out, cache

    def backward(self, gout, cache):
        c1, cn1, n1, c2, cn2, cp, pre = cache
        gpre = ops.relu_backward(gout, pre)
        gn2 = self.norm2.backward(gpre, cn2)
        gr1 = self.conv2.backward(gn2, c2)
        gn1 = ops.relu_backward(gr1, n1)
        ga = self.norm1.backward(gn1, cn1)
        gx = self.conv1.backward(ga, c1)
        gx += self.proj.backward(gpre, cp)
        return gx


class _PlainBlock:
    """conv3x3-norm-ReLU twice, no shortcut (UNet baseline block)."""

    def __init__(self, net: "SegNet", name: str, ci: int, co: int):
        self.name = name
        self.conv1 = _Conv(net, f"{name}.conv1", ci, co, 3, pad=1)
        self.norm1 = _make_norm(net, f"{name}.norm1", co)
        self.conv2 = _Conv(net, f"{name}.conv2", co, co, 3, pad=1)
        self.norm2 = _make_norm(net, f"{name}.norm2", co)

    def init(self, rng: np.random.Generator) -> None:
        for layer in (self.conv1, self.norm1, self.conv2, self.norm2):
            layer.init(rng)

    def forward(self, x, train: bool, update_stats: bool):
        a, c1 = self.conv1.forward(x)
        n1, cn1 = self.norm1.forward(a, train, update_stats)
        r1 = ops.relu(n1)
        a2, c2 = self.conv2.forward(r1)
        n2, cn2 = self.norm2.forward(a2, train, update_stats)
        out = ops.relu(n2)
        cache = (c1, cn1, n1, c2, cn2, n2)
        return out, cache

    def backward(self, gout, cache):
        c1, cn1, n1, c2, cn2, n2 = cache
        gn2 = ops.relu_backward(gout, n2)
        gb = self.norm2.backward(gn2, cn2)
        gr1 = self.conv2.backward(gb, c2)
        gn1 = ops.relu_backward(gr1, n1)
        ga = self.norm1.backward(gn1, cn1)
        return self.conv1.backward(ga, c1)


class _Upsample:
    """2x spatial upsampling that also halves the channel count."""

    def __init__(self, net: "SegNet", name: str, ci: int, co: int):
        self.name = name
        self.out_channels = co
        self.mode = net.config.upsample
        if self.mode == "tconv":
            self.tconv = _TConv(net, name, ci, co, 2, stride=2)
        else:
            self.conv = _Conv(net, f"{name}.conv", ci, co, 1, pad=0)

    def init(self, rng: np.random.Generator) -> None:
        if self.mode == "tconv":
            self.tconv.init(rng)
        else:
            self.conv.init(rng)

    def forward(self, x):
        if self.mode == "tconv":
            return self.tconv.forward(x)
        up = ops.nearest_upsample2x(x)
        return self.conv.forward(up)

    def backward(self, gy, cache):
        if self.mode == "tconv":
            return self.tconv.backward(gy, cache)
        gup = self.conv.backward(gy, cache)
        return ops.nearest_upsample2x_backward(gup)


# -------------------------------------------------------------------- net


class SegNet:
    """One cascade stage: encoder, bottleneck, decoder, softmax head.

    Construction allocates zero-valued parameters in a fixed order (the
    order they appear in weight files); ``init_weights`` fills them with
    He fan-in normals, zero biases, and gamma = 1 / beta = 0.
    """

    def __init__(self, config: NetConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

        cfg = config
        block_cls = _ResidualBlock if cfg.skip_mode == "addition" else _PlainBlock
        enc_out = [cfg.base_channels * (2**i) for i in range(cfg.depth)]
        bott_out = cfg.base_channels * (2**cfg.depth)

        self.enc_blocks = []
        for i in range(cfg.depth):
            ci = cfg.in_channels if i == 0 else enc_out[i - 1]
            self.enc_blocks.append(block_cls(self, f"enc{i}", ci, enc_out[i]))
        self.bottleneck = block_cls(self, "bottleneck", enc_out[-1], bott_out)
        self.ups: list[_Upsample | None] = [None] * cfg.depth
        self.dec_blocks: list[_ResidualBlock | _PlainBlock | None] = [None] * cfg.depth
        for i in reversed(range(cfg.depth)):
            above = bott_out if i == cfg.depth - 1 else enc_out[i + 1]
            self.ups[i] = _Upsample(self, f"up{i}", above, enc_out[i])
            if cfg.skip_mode == "addition":
                # Addition merges by elementwise sum: the upsampled feature
                # and the encoder skip must agree in channels, and a
                # violation must fail here, never broadcast silently.
                if self.ups[i].out_channels != enc_out[i]:
                    raise ConfigError(
                        f"addition skip at level {i}: upsample produces "
                        f"{self.ups[i].out_channels} channels, encoder skip "
                        f"has {enc_out[i]}"
                    )
                dec_in = enc_out[i]
            else:
                dec_in = 2 * enc_out[i]
            self.dec_blocks[i] = block_cls(self, f"dec{i}", dec_in, enc_out[i])
        self.head = _Conv(self, "head", enc_out[0], cfg.num_classes, 1, pad=0)

        self._init_order = (
            list(self.enc_blocks)
            + [self.bottleneck]
            + [layer for i in reversed(range(cfg.depth)) for layer in (self.ups[i], self.dec_blocks[i])]
            + [self.head]
        )
        self._skip_channels = enc_out

    def _add_param(self, name: str, shape: tuple[int, ...]) -> Parameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.zeros(shape))
        self.params[name] = p
        return p

    def init_weights(self, rng: np.random.Generator) -> None:
        for layer in self._init_order:
            layer.init(rng)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def count_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # ------------------------------------------------------------ forward

    def _check_finite(self, name: str, arr: np.ndarray) -> None:
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite activation after layer {name}")

    def forward(self, x: np.ndarray, *, train: bool = False, update_stats: bool = False):
        """Run the network; returns (probabilities, tape for backward)."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected input (n, {cfg.in_channels}, h, w), got {x.shape}"
            )
        div = 2**cfg.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"input spatial dims {x.shape[2]}x{x.shape[3]} must be divisible "
                f"by 2^depth = {div}"
            )
        tape: dict = {}
        h = x
        skips = []
        for i, blk in enumerate(self.enc_blocks):
            h, tape[f"enc{i}"] = blk.forward(h, train, update_stats)
            self._check_finite(f"enc{i}", h)
            skips.append(h)
            h, tape[f"pool{i}"] = ops.maxpool2x2(h)
        h, tape["bottleneck"] = self.bottleneck.forward(h, train, update_stats)
        self._check_finite("bottleneck", h)
        for i in reversed(range(cfg.depth)):
            h, tape[f"up{i}"] = self.ups[i].forward(h)
            self._check_finite(f"up{i}", h)
            if cfg.skip_mode == "addition":
                h = ops.add(h, skips[i])
            else:
                h = ops.concat_channels(h, skips[i])
            h, tape[f"dec{i}"] = self.dec_blocks[i].forward(h, train, update_stats)
            self._check_finite(f"dec{i}", h)
        logits, tape["head"] = self.head.forward(h)
        self._check_finite("head", logits)
        probs = ops.softmax_channels(logits)
        tape["probs"] = probs
        return probs, tape

    def backward(self, dprobs: np.ndarray, tape: dict) -> np.ndarray:
        """Accumulate parameter grads; returns the input gradient."""
        cfg = self.config
        g = ops.softmax_channels_backward(dprobs, tape["probs"])
        g = self.head.backward(g, tape["head"])
        pending_skip = [None] * cfg.depth
        for i in range(cfg.depth):
            g = self.dec_blocks[i].backward(g, tape[f"dec{i}"])
            if cfg.skip_mode == "addition":
                g_up, g_skip = ops.add_backward(g)
            else:
                g_up, g_skip = ops.concat_channels_backward(g, self._skip_channels[i])
            pending_skip[i] = g_skip
            g = self.ups[i].backward(g_up, tape[f"up{i}"])
        g = self.bottleneck.backward(g, tape["bottleneck"])
        for i in reversed(range(cfg.depth)):
            g = ops.maxpool2x2_backward(g, tape[f"pool{i}"])
            g = g + pending_skip[i]
            g = self.enc_blocks[i].backward(g, tape[f"enc{i}"])
        return g


def build_mres_unet(config: NetConfig, rng: np.random.Generator) -> SegNet:
    """Residual blocks with addition skips (the primary architecture)."""
    if config.skip_mode != "addition":
        raise ConfigError("build_mres_unet requires skip_mode='addition'")
    net = SegNet(config)
    net.init_weights(rng)
    return net


def build_unet_baseline(config: NetConfig, rng: np.random.Generator) -> SegNet:
    """Plain double-conv blocks with concatenation skips (the baseline)."""
    if config.skip_mode != "concatenation":
        raise ConfigError("build_unet_baseline requires skip_mode='concatenation'")
    net = SegNet(config)
    net.init_weights(rng)
    return net


def build_net(config: NetConfig, rng: np.random.Generator) -> SegNet:
    if config.skip_mode == "addition":
        return build_mres_unet(config, rng)
    return build_unet_baseline(config, rng)


def parameter_count_formula(config: NetConfig) -> int:
    """Closed-form trainable parameter count for a config.

    Walks the channel plan arithmetically (never touching arrays), so it
    is an independent cross-check of the constructed model:

    - conv k x k, ci -> co: co*ci*k^2 + co
    - norm on c channels: 2c (gamma, beta; running stats are buffers)
    - residual block ci -> co: conv3(ci,co) + conv3(co,co) + conv1(ci,co)
      + 2 norms on co
    - plain block ci -> co: conv3(ci,co) + conv3(co,co) + 2 norms on co
    - tconv upsample ci -> co: ci*co*4 + co; nearest upsample: conv1(ci,co)
    - head: conv1(base, num_classes)
    """

    def conv(ci, co, k):
        return co * ci * k * k + co

    def norm(c):
        return 2 * c if config.use_norm else 0

    def block(ci, co):
        n = conv(ci, co, 3) + conv(co, co, 3) + 2 * norm(co)
        if config.skip_mode == "addition":
            n += conv(ci, co, 1)
        return n

    def upsample(ci, co):
        if config.upsample == "tconv":
            return ci * co * 4 + co
        return conv(ci, co, 1)

    b, d = config.base_channels, config.depth
    total = 0
    for i in range(d):
        ci = config.in_channels if i == 0 else b * 2 ** (i - 1)
        total += block(ci, b * 2**i)
    total += block(b * 2 ** (d - 1), b * 2**d)
    for i in range(d):
        above = b * 2 ** (i + 1)
        total += upsample(above, b * 2**i)
        dec_in = b * 2**i if config.skip_mode == "addition" else 2 * b * 2**i
        total += block(dec_in, b * 2**i)
    total += conv(b, config.num_classes, 1)
    return total


# ------------------------------------------------------------ weight file


def encode_entry(name: str, arr: np.ndarray) -> bytes:
    """One named-array record: name len u16, UTF-8 name, rank u8,
    dims u32 each, float64 values, all little-endian."""
    nb = name.encode("utf-8")
    return b"".join(
        (
            struct.pack("<H", len(nb)),
            nb,
            struct.pack("<B", arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            np.ascontiguousarray(arr, dtype=np.float64).tobytes(),
        )
    )


def encode_weights(net: SegNet) -> bytes:
    """Serialise parameters and buffers to the MRWT byte layout.

    Little-endian throughout: magic "MRWT", version u32, config
    fingerprint (32 bytes, sha256 of the canonical config string), entry
    count u32, then named-array entries (see ``encode_entry``).
    Parameters come first in construction order, then normalisation
    buffers.
    """
    entries = [(n, p.value) for n, p in net.params.items()]
    entries += [(n, b) for n, b in net.buffers.items()]
    parts = [
        WEIGHT_MAGIC,
        struct.pack("<I", WEIGHT_VERSION),
        net.config.fingerprint(),
        struct.pack("<I", len(entries)),
    ]
    parts.extend(encode_entry(name, arr) for name, arr in entries)
    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buf: bytes, context: str):
        self.buf = buf
        self.pos = 0
        self.context = context

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.context}: needed {self.pos + n} bytes, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def decode_entry(reader: _Reader) -> tuple[str, np.ndarray]:
    """Parse one named-array record written by ``encode_entry``."""
    name_len = reader.u16()
    name = reader.take(name_len).decode("utf-8")
    rank = reader.u8()
    shape = tuple(reader.u32() for _ in range(rank))
    n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = reader.take(8 * n_values)
    arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return name, arr


def decode_weights(reader: _Reader, config: NetConfig) -> SegNet:
    """Parse one MRWT block at the reader cursor into a fresh SegNet."""
    magic = reader.take(4)
    if magic != WEIGHT_MAGIC:
        raise BadMagicError(
            f"{reader.context}: bad magic {magic!r}, expected {WEIGHT_MAGIC!r}"
        )
    version = reader.u32()
    if version != WEIGHT_VERSION:
        raise UnsupportedVersionError(
            f"{reader.context}: weight format version {version}, "
            f"reader supports {WEIGHT_VERSION}"
        )
    fingerprint = reader.take(32)
    if fingerprint != config.fingerprint():
        raise FingerprintMismatchError(
            f"{reader.context}: weights were saved for a different architecture "
            f"config (fingerprint mismatch; expected config "
            f"{config.canonical_string()!r})"
        )
    net = SegNet(config)
    count = reader.u32()
    expected = len(net.params) + len(net.buffers)
    if count != expected:
        raise FormatError(
            f"{reader.context}: {count} entries, config implies {expected}"
        )
    seen = set()
    for _ in range(count):
        name, arr = decode_entry(reader)
        shape = arr.shape
        if name in net.params:
            target = net.params[name].value
        elif name in net.buffers:
            target = net.buffers[name]
        else:
            raise FormatError(f"{reader.context}: unknown entry name {name!r}")
        if name in seen:
            raise FormatError(f"{reader.context}: duplicate entry {name!r}")
        seen.add(name)
        if target.shape != shape:
            raise FormatError(
                f"{reader.context}: entry {name!r} has shape {shape}, "
                f"config implies {target.shape}"
            )
        target[...] = arr
    return net


def save_weights(net: SegNet, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_weights(net))


def load_weights(path, config: NetConfig) -> SegNet:
    with open(path, "rb") as f:
        buf = f.read()
    reader = _Reader(buf, str(path))
    net = decode_weights(reader, config)
    if reader.pos != len(buf):
        raise FormatError(
            f"{path}: {len(buf) - reader.pos} trailing bytes after weight block"
        )
    return net
