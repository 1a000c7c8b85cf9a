"""Siamese feature-extraction networks built from convolution, transposed
convolution (deconvolution), batch normalization and ReLU layers.

Tensors are numpy arrays laid out (height, width, channels); the batched
internals used by the trainer add a leading batch axis. Convolutions are
valid cross-correlations; a deconvolution is the exact adjoint of the
corresponding convolution, so for single-channel layers both can be
materialized as dense structured matrices (see layer_matrix) with the
deconvolution matrix equal to the transpose of the convolution one.

Networks are immutable during inference and may serve concurrent forward
passes; training-mode batch norm mutates running statistics and needs
exclusive access.
"""

import re
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GeometryError(ValueError):
    """A layer stack produces a non-positive or non-integral feature size."""


class ConfigError(ValueError):
    """A network configuration string cannot be parsed."""


def conv_output_size(input_size, kernel, stride=1, padding=0):
    """Output feature size of a convolution: (I - k + 2p)/s + 1."""
    span = input_size - kernel + 2 * padding
    if span < 0 or span % stride != 0:
        raise GeometryError(
            f"convolution k={kernel} s={stride} p={padding} does not fit input size {input_size}"
        )
    return span // stride + 1


def deconv_output_size(input_size, kernel, stride=1, padding=0):
    """Output feature size of a deconvolution: s(I - 1) - 2p + k."""
    out = stride * (input_size - 1) - 2 * padding + kernel
    if out < 1:
        raise GeometryError(
            f"deconvolution k={kernel} s={stride} p={padding} collapses input size {input_size}"
        )
    return out


@dataclass
class ConvLayer:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    weights: np.ndarray = None  # (out, in, k, k)
    bias: np.ndarray = None  # (out,) or None when followed by BN

    def output_size(self, input_size):
        return conv_output_size(input_size, self.kernel_size, self.stride, self.padding)


@dataclass
class DeconvLayer:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    weights: np.ndarray = None
    bias: np.ndarray = None

    def output_size(self, input_size):
        return deconv_output_size(input_size, self.kernel_size, self.stride, self.padding)


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def identity(cls, channels, eps=1e-5, momentum=0.9):
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]


@dataclass
class Block:
    """One network stage: conv or deconv, optionally BN, optionally ReLU."""

    op: object
    bn: BatchNorm = None
    relu: bool = False


@dataclass
class FeatureExtractor:
    """Ordered layer blocks; the learnable parameter set of one branch."""

    blocks: list = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.op.out_channels != nxt.op.in_channels:
                raise ConfigError(
                    f"channel chain broken: {prev.op.out_channels} -> {nxt.op.in_channels}"
                )

    @property
    def input_channels(self):
        return self.blocks[0].op.in_channels if self.blocks else 0

    @property
    def output_channels(self):
        return self.blocks[-1].op.out_channels if self.blocks else 0


# ---------------------------------------------------------------------------
# batched layer primitives, (B, H, W, C) layout
# ---------------------------------------------------------------------------


def _conv2d(x, w, b=None, stride=1, padding=0, return_windows=False):
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    k = w.shape[2]
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # materialize once so the weight-gradient pass can reuse it
    if return_windows:
        win = np.ascontiguousarray(win)
    y = np.tensordot(win, w, axes=([3, 4, 5], [1, 2, 3]))
    if b is not None:
        y = y + b
    if return_windows:
        return y, win
    return y


def _upsample(x, stride):
    if stride == 1:
        return x
    b, h, w, c = x.shape
    up = np.zeros((b, stride * (h - 1) + 1, stride * (w - 1) + 1, c), dtype=x.dtype)
    up[:, ::stride, ::stride] = x
    return up


def _deconv2d(x, w, b=None, stride=1, padding=0, return_windows=False):
    k = w.shape[2]
    up = _upsample(x, stride)
    y, win = _conv2d(up, w[:, :, ::-1, ::-1], None, stride=1, padding=k - 1,
                     return_windows=True)
    if padding:
        y = y[:, padding:y.shape[1] - padding, padding:y.shape[2] - padding]
    if b is not None:
        y = y + b
    if return_windows:
        return y, win
    return y


def _conv2d_backward(g, x, w, stride=1, padding=0, windows=None):
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    if windows is None:
        windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    gw = np.tensordot(g, windows, axes=([0, 1, 2], [0, 1, 2]))
    gb = g.sum(axis=(0, 1, 2))
    # input gradient by scattering each kernel tap; avoids re-windowing the
    # (much larger) padded upstream gradient
    b, ho, wo, co = g.shape
    gxp = np.zeros_like(xp)
    g_flat = g.reshape(-1, co)
    for r in range(k):
        for c in range(k):
            contrib = g_flat @ w[:, :, r, c]
            gxp[:, r:r + stride * ho:stride, c:c + stride * wo:stride, :] += (
                contrib.reshape(b, ho, wo, -1)
            )
    if padding:
        gxp = gxp[:, padding:gxp.shape[1] - padding, padding:gxp.shape[2] - padding, :]
    return gxp, gw, gb


def _deconv2d_backward(g, x, w, stride=1, padding=0, windows=None):
    k = w.shape[2]
    g_full = np.pad(g, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else g
    if windows is None:
        up = np.pad(_upsample(x, stride), ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
        windows = sliding_window_view(up, (k, k), axis=(1, 2))
    gv = np.tensordot(g_full, windows, axes=([0, 1, 2], [0, 1, 2]))
    gw = gv[:, :, ::-1, ::-1]
    gb = g.sum(axis=(0, 1, 2))
    gx = _conv2d(g, w.transpose(1, 0, 2, 3), None, stride, padding)
    return gx, gw, gb


def _bn_forward(x, bn, training):
    if training:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    else:
        mean, var = bn.running_mean, bn.running_var
    ivar = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean) * ivar
    y = bn.gamma * xhat + bn.beta
    cache = (xhat, ivar, mean, var) if training else None
    return y, cache


def _bn_backward(g, bn, cache):
    xhat, ivar, _, _ = cache
    n = g.size // g.shape[-1]
    gbeta = g.sum(axis=(0, 1, 2))
    ggamma = (g * xhat).sum(axis=(0, 1, 2))
    gx = (bn.gamma * ivar / n) * (n * g - gbeta - xhat * ggamma)
    return gx, ggamma, gbeta


def _op_forward(op, x, return_windows=False):
    fn = _deconv2d if isinstance(op, DeconvLayer) else _conv2d
    return fn(x, op.weights, op.bias, op.stride, op.padding,
              return_windows=return_windows)


def _op_backward(op, g, x, windows=None):
    fn = _deconv2d_backward if isinstance(op, DeconvLayer) else _conv2d_backward
    return fn(g, x, op.weights, op.stride, op.padding, windows=windows)


def forward_blocks(extractor, x, training=False):
    """Run a (B, H, W, C) batch through all blocks.

    Returns (output, caches); caches hold what backward_blocks needs (input,
    im2col windows, BN batch statistics, ReLU masks) when training.
    """
    caches = []
    for block in extractor.blocks:
        cache = {"x": x}
        if training:
            x, cache["win"] = _op_forward(block.op, x, return_windows=True)
        else:
            x = _op_forward(block.op, x)
        if block.bn is not None:
            x, cache["bn"] = _bn_forward(x, block.bn, training)
        if block.relu:
            cache["mask"] = x > 0
            x = np.maximum(x, 0.0)
        caches.append(cache)
    return x, caches


def backward_blocks(extractor, caches, g):
    """Reverse-mode pass; returns gradients parallel to parameters()."""
    grads = [None] * len(extractor.blocks)
    for i in range(len(extractor.blocks) - 1, -1, -1):
        block, cache = extractor.blocks[i], caches[i]
        if block.relu:
            g = g * cache["mask"]
        entry = {}
        if block.bn is not None:
            g, entry["gamma"], entry["beta"] = _bn_backward(g, block.bn, cache["bn"])
        g, entry["w"], gb = _op_backward(block.op, g, cache["x"],
                                         windows=cache.get("win"))
        if block.op.bias is not None:
            entry["b"] = gb
        grads[i] = entry
    flat = []
    for block, entry in zip(extractor.blocks, grads):
        flat.append(entry["w"])
        if block.op.bias is not None:
            flat.append(entry["b"])
        if block.bn is not None:
            flat.append(entry["gamma"])
            flat.append(entry["beta"])
    return flat


def parameters(extractor):
    """Learnable arrays in a fixed traversal order (views, not copies)."""
    out = []
    for block in extractor.blocks:
        out.append(block.op.weights)
        if block.op.bias is not None:
            out.append(block.op.bias)
        if block.bn is not None:
            out.append(block.bn.gamma)
            out.append(block.bn.beta)
    return out


def update_running_stats(extractor, caches):
    """Fold the batch statistics recorded in caches into the running stats."""
    for block, cache in zip(extractor.blocks, caches):
        bn = block.bn
        if bn is None or cache.get("bn") is None:
            continue
        _, _, mean, var = cache["bn"]
        m = bn.momentum
        bn.running_mean = m * bn.running_mean + (1.0 - m) * mean
        bn.running_var = m * bn.running_var + (1.0 - m) * var


# ---------------------------------------------------------------------------
# public single-tensor operations
# ---------------------------------------------------------------------------


def _as_tensor(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError("expected an (H, W, C) tensor")
    return x


def conv_forward(x, layer):
    """Valid cross-correlation of an (H, W, C) tensor with a ConvLayer."""
    x = _as_tensor(x)
    if x.shape[2] != layer.in_channels:
        raise ValueError(f"expected {layer.in_channels} channels, got {x.shape[2]}")
    layer.output_size(x.shape[0])
    layer.output_size(x.shape[1])
    return _conv2d(x[None], layer.weights, layer.bias, layer.stride, layer.padding)[0]


def deconv_forward(x, layer):
    """Transposed convolution (adjoint of the valid cross-correlation)."""
    x = _as_tensor(x)
    if x.shape[2] != layer.in_channels:
        raise ValueError(f"expected {layer.in_channels} channels, got {x.shape[2]}")
    layer.output_size(x.shape[0])
    layer.output_size(x.shape[1])
    return _deconv2d(x[None], layer.weights, layer.bias, layer.stride, layer.padding)[0]


def batchnorm_forward(x, bn, training=False):
    """Normalize per channel; training mode uses the tensor's own statistics
    and folds them into the running estimates."""
    x = _as_tensor(x)
    y, cache = _bn_forward(x[None], bn, training)
    if training:
        _, _, mean, var = cache
        m = bn.momentum
        bn.running_mean = m * bn.running_mean + (1.0 - m) * mean
        bn.running_var = m * bn.running_var + (1.0 - m) * var
    return y[0]


def extract_features(extractor, tensor):
    """Inference-mode forward pass over a single (H, W, C) tensor.

    Fully convolutional: a (P+200, P)-sized strip yields the 201 feature
    columns of its P-wide sub-windows.
    """
    x = _as_tensor(tensor)
    if x.shape[2] != extractor.input_channels:
        raise ValueError(
            f"expected {extractor.input_channels} input channels, got {x.shape[2]}"
        )
    size_chain(extractor, x.shape[0])
    size_chain(extractor, x.shape[1])
    y, _ = forward_blocks(extractor, x[None], training=False)
    return y[0]


def similarity_scores(o_left, o_right):
    """Dot-product match scores of one left feature against N right features."""
    o_left = np.asarray(o_left, dtype=np.float64).reshape(-1)
    o_right = np.asarray(o_right, dtype=np.float64)
    o_right = o_right.reshape(-1, o_right.shape[-1])
    if o_right.shape[1] != o_left.shape[0]:
        raise ValueError(
            f"feature length mismatch: {o_left.shape[0]} vs {o_right.shape[1]}"
        )
    return o_right @ o_left


def count_parameters(extractor):
    """Learnable parameter count: CHi*k*k*CHo per layer, + CHo for the bias
    unless BN follows it, + 2 per BN channel."""
    total = 0
    for block in extractor.blocks:
        op = block.op
        total += op.in_channels * op.kernel_size * op.kernel_size * op.out_channels
        if block.op.bias is not None:
            total += op.out_channels
        if block.bn is not None:
            total += 2 * block.bn.channels
    return total


def size_chain(extractor, input_size):
    """Feature sizes along one axis: [input, after block 1, ...]."""
    chain = [input_size]
    for block in extractor.blocks:
        chain.append(block.op.output_size(chain[-1]))
    return chain


def validate_geometry(extractor, input_size):
    """Fold the size formulas over the layers; returns the final size."""
    return size_chain(extractor, input_size)[-1]


def natural_patch_size(extractor):
    """Input size that this network folds down to a single cell."""
    size = 1
    for block in reversed(extractor.blocks):
        op = block.op
        if isinstance(op, DeconvLayer):
            span = size + 2 * op.padding - op.kernel_size
            if span < 0 or span % op.stride != 0:
                raise GeometryError("network has no integral 1x1 input size")
            size = span // op.stride + 1
        else:
            size = op.stride * (size - 1) + op.kernel_size - 2 * op.padding
        if size < 1:
            raise GeometryError("network has no positive 1x1 input size")
    return size


def layer_matrix(layer, input_hw):
    """Dense matrix of a single-channel layer acting on row-major vec(x).

    Built directly from kernel index arithmetic, independent of the forward
    implementation, so it can serve as an oracle for it. Deconvolution
    matrices are exact transposes of the matching convolution matrices.
    """
    if layer.in_channels != 1 or layer.out_channels != 1:
        raise ValueError("layer_matrix supports single-channel layers only")
    h, w = input_hw
    ker = layer.weights[0, 0]
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    if isinstance(layer, DeconvLayer):
        oh, ow = deconv_output_size(h, k, s, p), deconv_output_size(w, k, s, p)
        mat = np.zeros((oh * ow, h * w))
        for u in range(h):
            for v in range(w):
                for r in range(k):
                    for c in range(k):
                        y, x = u * s + r - p, v * s + c - p
                        if 0 <= y < oh and 0 <= x < ow:
                            mat[y * ow + x, u * w + v] = ker[r, c]
    else:
        oh, ow = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
        mat = np.zeros((oh * ow, h * w))
        for u in range(oh):
            for v in range(ow):
                for r in range(k):
                    for c in range(k):
                        y, x = u * s + r - p, v * s + c - p
                        if 0 <= y < h and 0 <= x < w:
                            mat[u * ow + v, y * w + x] = ker[r, c]
    return mat


# ---------------------------------------------------------------------------
# configuration grammar and presets
# ---------------------------------------------------------------------------

_STAGE_RE = re.compile(r"^(\d+)(Deconv|Conv)\((\d+)\)$")

_TABLE1_KERNELS = {
    "37-3Conv": [13, 13, 13],
    "37-4Conv": [10, 10, 10, 10],
    "37-6Conv": [9, 9, 7, 7, 5, 5],
    "37-7Conv": [7, 7, 7, 7, 5, 5, 5],
    "37-9Conv": [5] * 9,
    "37-11Conv": [5] * 7 + [3] * 4,
}

_TABLE2_KERNELS = {
    "37-1Deconv(5)&4Conv": ([5], [11, 11, 11, 11]),
    "37-1Deconv(3)&4Conv": ([3], [11, 11, 10, 10]),
    "37-2Deconv&6Conv": ([3, 5], [9, 9, 9, 7, 7, 7]),
    "37-3Deconv&6Conv": ([3, 5, 7], [9, 9, 9, 7, 7, 7]),
}

PRESETS = {}
for _name, _ks in _TABLE1_KERNELS.items():
    PRESETS[_name] = [("conv", k) for k in _ks]
for _name, (_ds, _cs) in _TABLE2_KERNELS.items():
    PRESETS[_name] = [("deconv", k) for k in _ds] + [("conv", k) for k in _cs]


def _expand_grammar(text):
    stages = []
    for part in text.split("&"):
        m = _STAGE_RE.match(part.strip())
        if m is None:
            raise ConfigError(
                f"cannot parse stage {part.strip()!r}; expected COUNTConv(K) or COUNTDeconv(K)"
            )
        count, kind, kernel = int(m.group(1)), m.group(2).lower(), int(m.group(3))
        if count < 1:
            raise ConfigError(f"stage count must be >= 1 in {part.strip()!r}")
        if kernel < 1:
            raise ConfigError(f"kernel size must be >= 1 in {part.strip()!r}")
        stages.extend([(kind, kernel)] * count)
    return stages


def parse_network_config(text):
    """Resolve a preset name or grammar string to a (kind, kernel) list.

    Accepts canonical preset names ("37-4Conv"), the "@" alias form
    ("4Conv@37"), bare table names ("1Deconv(5)&4Conv"), and grammar strings
    with explicit kernels ("1Deconv(5)&4Conv(11)").
    """
    name = text.strip()
    if "@" in name:
        body, _, size = name.partition("@")
        name = f"{size.strip()}-{body.strip()}"
    if name in PRESETS:
        return list(PRESETS[name])
    if f"37-{name}" in PRESETS:
        return list(PRESETS[f"37-{name}"])
    return _expand_grammar(name)


def build_network(config, channels=64, input_channels=1, seed=0, batch_norm=True):
    """Build a FeatureExtractor from a preset name or grammar string.

    Every block except the last carries BN (so no bias); ReLU follows
    non-last conv blocks; the last block is bare with a bias. Weights are
    initialized uniformly in +-sqrt(6/(fan_in+fan_out)). With
    batch_norm=False the hidden blocks keep a bias instead of BN.
    """
    stages = parse_network_config(config) if isinstance(config, str) else list(config)
    if not stages:
        raise ConfigError("network must have at least one layer")
    rng = np.random.default_rng(seed)
    blocks = []
    in_ch = input_channels
    for i, (kind, kernel) in enumerate(stages):
        last = i == len(stages) - 1
        out_ch = channels
        fan = (in_ch + out_ch) * kernel * kernel
        limit = np.sqrt(6.0 / fan)
        weights = rng.uniform(-limit, limit, size=(out_ch, in_ch, kernel, kernel))
        with_bn = batch_norm and not last
        cls = DeconvLayer if kind == "deconv" else ConvLayer
        op = cls(
            kernel_size=kernel,
            in_channels=in_ch,
            out_channels=out_ch,
            stride=1,
            padding=0,
            weights=weights,
            bias=None if with_bn else np.zeros(out_ch),
        )
        bn = BatchNorm.identity(out_ch) if with_bn else None
        blocks.append(Block(op=op, bn=bn, relu=(not last) and kind == "conv"))
        in_ch = out_ch
    return FeatureExtractor(blocks)


# ---------------------------------------------------------------------------
# weights file codec
# ---------------------------------------------------------------------------

WEIGHTS_MAGIC = b"ADSM"
WEIGHTS_VERSION = 1
_TAG_CONV, _TAG_DECONV, _TAG_BN = 1, 2, 3


def save_weights(extractor, path):
    """Serialize to the binary weights format (32-bit little-endian floats).

    Record stream: magic, version, record count, then one record per
    conv/deconv/BN layer. Conv and deconv records always carry a bias array
    (zeros when the layer has none because BN follows); the loader drops it
    again, so file round trips are byte-exact.
    """
    records = bytearray()
    count = 0
    for block in extractor.blocks:
        op = block.op
        tag = _TAG_DECONV if isinstance(op, DeconvLayer) else _TAG_CONV
        records += struct.pack(
            "<BIIIII", tag, op.kernel_size, op.stride, op.padding,
            op.in_channels, op.out_channels,
        )
        records += op.weights.astype("<f4").tobytes()
        bias = op.bias if op.bias is not None else np.zeros(op.out_channels)
        records += bias.astype("<f4").tobytes()
        count += 1
        if block.bn is not None:
            bn = block.bn
            records += struct.pack("<BIIIII", _TAG_BN, 0, 0, 0, bn.channels, bn.channels)
            for arr in (bn.gamma, bn.beta, bn.running_mean, bn.running_var):
                records += arr.astype("<f4").tobytes()
            count += 1
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, count))
        fh.write(records)


def load_weights(path):
    """Read a weights file back into a FeatureExtractor."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError("not a weights file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights format version {version}")
    offset = 12
    raw = []
    for _ in range(count):
        tag, k, s, p, in_ch, out_ch = struct.unpack_from("<BIIIII", data, offset)
        offset += struct.calcsize("<BIIIII")

        def take(n):
            nonlocal offset
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            return arr.astype(np.float64)

        if tag in (_TAG_CONV, _TAG_DECONV):
            weights = take(out_ch * in_ch * k * k).reshape(out_ch, in_ch, k, k)
            bias = take(out_ch)
            raw.append((tag, k, s, p, in_ch, out_ch, weights, bias))
        elif tag == _TAG_BN:
            gamma, beta, rmean, rvar = take(in_ch), take(in_ch), take(in_ch), take(in_ch)
            raw.append((tag, in_ch, gamma, beta, rmean, rvar))
        else:
            raise ValueError(f"unknown layer tag {tag}")
    if offset != len(data):
        raise ValueError("trailing bytes in weights file")

    blocks = []
    i = 0
    while i < len(raw):
        rec = raw[i]
        if rec[0] == _TAG_BN:
            raise ValueError("BN record without a preceding conv/deconv layer")
        tag, k, s, p, in_ch, out_ch, weights, bias = rec
        cls = DeconvLayer if tag == _TAG_DECONV else ConvLayer
        bn = None
        if i + 1 < len(raw) and raw[i + 1][0] == _TAG_BN:
            _, ch, gamma, beta, rmean, rvar = raw[i + 1]
            if ch != out_ch:
                raise ValueError("BN channel count does not match its layer")
            bn = BatchNorm(gamma, beta, rmean, rvar)
            i += 1
        op = cls(
            kernel_size=k, in_channels=in_ch, out_channels=out_ch,
            stride=s, padding=p, weights=weights,
            bias=None if bn is not None else bias,
        )
        blocks.append(Block(op=op, bn=bn, relu=False))
        i += 1
    for block in blocks[:-1]:
        block.relu = isinstance(block.op, ConvLayer)
    return FeatureExtractor(blocks)
