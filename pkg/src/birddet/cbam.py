"""Convolutional block attention: channel gate, then spatial gate.

Functions accept ndarrays or graph Nodes and return Nodes, so the same code
serves inference (read ``.value``) and gradient computation.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import make_rng

SPATIAL_KERNEL = 7


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ChannelAttentionParams:
    w0: object  # (C/r, C)
    w1: object  # (C, C/r)
    reduction: int

    def __post_init__(self):
        c = np.shape(_val(self.w0))[1]
        if self.reduction < 1 or c % self.reduction:
            raise ValueError(f"reduction ratio {self.reduction} must divide channel count {c}")
        hidden = c // self.reduction
        if np.shape(_val(self.w0)) != (hidden, c) or np.shape(_val(self.w1)) != (c, hidden):
            raise ValueError(f"W0/W1 shapes {np.shape(_val(self.w0))}/{np.shape(_val(self.w1))} "
                             f"inconsistent with C={c}, r={self.reduction}")

    @property
    def channels(self):
        return np.shape(_val(self.w0))[1]

    @classmethod
    def init(cls, channels, reduction=16, rng=0):
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction ratio {reduction} must divide channel count {channels}")
        rng = make_rng(rng)
        hidden = channels // reduction
        return cls(_uniform(rng, (hidden, channels), channels),
                   _uniform(rng, (channels, hidden), hidden), reduction)

    @classmethod
    def zeros(cls, channels, reduction=16):
        hidden = channels // reduction if reduction and channels % reduction == 0 else 0
        if not hidden:
            raise ValueError(f"reduction ratio {reduction} must divide channel count {channels}")
        return cls(np.zeros((hidden, channels)), np.zeros((channels, hidden)), reduction)


@dataclass
class SpatialAttentionParams:
    kernel: object  # (1, 2, 7, 7)
    bias: object    # (1,)

    def __post_init__(self):
        if np.shape(_val(self.kernel)) != (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL):
            raise ValueError(f"spatial kernel must be 1x2x7x7, got {np.shape(_val(self.kernel))}")
        if isinstance(self.bias, (int, float)):
            self.bias = np.array([float(self.bias)])

    @classmethod
    def init(cls, rng=0):
        rng = make_rng(rng)
        fan_in = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL
        return cls(_uniform(rng, (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), fan_in),
                   _uniform(rng, (1,), fan_in))

    @classmethod
    def zeros(cls):
        return cls(np.zeros((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL)), np.zeros(1))


def _val(x):
    return x.value if isinstance(x, ad.Node) else x


def _mlp(w0, w1, d):
    return ad.channel_linear(w1, ad.relu(ad.channel_linear(w0, d)))


def channel_attention(feature, params):
    """Channel gate, shape (C, 1, 1), values in (0, 1)."""
    feature, w0, w1 = ad.bind(feature, params.w0, params.w1)
    if feature.shape[-3] != w0.shape[1]:
        raise ValueError(f"feature has {feature.shape[-3]} channels, params expect {w0.shape[1]}")
    avg = _mlp(w0, w1, ad.global_pool(feature, "avg"))
    mx = _mlp(w0, w1, ad.global_pool(feature, "max"))
    return ad.sigmoid(avg + mx)


def spatial_attention(feature, params):
    """Spatial gate, shape (1, H, W), values in (0, 1)."""
    feature, kernel, bias = ad.bind(feature, params.kernel, params.bias)
    pooled = ad.concat([ad.channelwise_pool(feature, "avg"), ad.channelwise_pool(feature, "max")])
    return ad.sigmoid(ad.conv2d(pooled, kernel, bias, stride=1, padding=SPATIAL_KERNEL // 2))


def cbam_apply(feature, channel_params, spatial_params):
    feature = ad.bind(feature)[0]
    refined = channel_attention(feature, channel_params) * feature
    return spatial_attention(refined, spatial_params) * refined


# ------------------------------------------------------------------ params io

def cbam_tensors(cp, sp, prefix="cbam"):
    return {f"{prefix}.w0": _val(cp.w0), f"{prefix}.w1": _val(cp.w1),
            f"{prefix}.spatial.kernel": _val(sp.kernel), f"{prefix}.spatial.bias": _val(sp.bias)}


def cbam_from_tensors(tensors, reduction, prefix="cbam"):
    cp = ChannelAttentionParams(tensors[f"{prefix}.w0"], tensors[f"{prefix}.w1"], reduction)
    sp = SpatialAttentionParams(tensors[f"{prefix}.spatial.kernel"], tensors[f"{prefix}.spatial.bias"])
    return cp, sp


def bind_cbam(graph, cp, sp, prefix="cbam"):
    """Register CBAM parameters on ``graph``; return Node-backed copies."""
    t = cbam_tensors(cp, sp, prefix)
    return (ChannelAttentionParams(graph.param(t[f"{prefix}.w0"], f"{prefix}.w0"),
                                   graph.param(t[f"{prefix}.w1"], f"{prefix}.w1"), cp.reduction),
            SpatialAttentionParams(graph.param(t[f"{prefix}.spatial.kernel"], f"{prefix}.spatial.kernel"),
                                   graph.param(t[f"{prefix}.spatial.bias"], f"{prefix}.spatial.bias")))


# ------------------------------------------------------------------ toy nets

@dataclass
class ConvLayer:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 1
    activation: str = "relu"

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @classmethod
    def init(cls, c_in, c_out, size=3, rng=0, **kw):
        rng = make_rng(rng)
        fan_in = c_in * size * size
        return cls(_uniform(rng, (c_out, c_in, size, size), fan_in), _uniform(rng, (c_out,), fan_in), **kw)


@dataclass
class CBAMLayer:
    channel: ChannelAttentionParams
    spatial: SpatialAttentionParams


@dataclass
class ToyNet:
    """A plain sequential conv net used to host CBAM blocks."""
    in_channels: int
    layers: list

    def channels_at(self, position):
        """Channel count of the activation entering layer ``position``."""
        if not 0 <= position <= len(self.layers):
            raise IndexError(f"position {position} outside 0..{len(self.layers)}")
        c = self.in_channels
        for layer in self.layers[:position]:
            if isinstance(layer, ConvLayer):
                c = layer.out_channels
        return c

    def tensors(self):
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConvLayer):
                out[f"layers.{i}.kernel"] = layer.kernel
                out[f"layers.{i}.bias"] = layer.bias
            else:
                out.update(cbam_tensors(layer.channel, layer.spatial, prefix=f"layers.{i}.cbam"))
        return out

    def forward(self, x, graph=None, params=None):
        """Run the net. With ``graph``, parameters are registered for backward."""
        if graph is not None:
            params = {k: graph.param(v, k) for k, v in self.tensors().items()} if params is None else params
            x = graph.lift(x)
        else:
            params = self.tensors()
            x = ad.bind(x)[0]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConvLayer):
                x = ad.conv2d(x, params[f"layers.{i}.kernel"], params[f"layers.{i}.bias"],
                              layer.stride, layer.padding)
                if layer.activation != "none":
                    x = ad.activation(x, layer.activation)
            else:
                pre = f"layers.{i}.cbam"
                cp = ChannelAttentionParams(params[f"{pre}.w0"], params[f"{pre}.w1"], layer.channel.reduction)
                sp = SpatialAttentionParams(params[f"{pre}.spatial.kernel"], params[f"{pre}.spatial.bias"])
                x = cbam_apply(x, cp, sp)
        return x


def insert_cbam(net, position, reduction=16, rng=0, params=None):
    """Return a copy of ``net`` with a CBAM block placed before layer ``position``."""
    if not 0 <= position <= len(net.layers):
        raise IndexError(f"position {position} outside 0..{len(net.layers)}")
    c = net.channels_at(position)
    if params is None:
        rng = make_rng(rng)
        params = (ChannelAttentionParams.init(c, reduction, rng), SpatialAttentionParams.init(rng))
    cp, sp = params
    if cp.channels != c:
        raise ValueError(f"CBAM built for {cp.channels} channels, position {position} carries {c}")
    layers = list(net.layers)
    layers.insert(position, CBAMLayer(cp, sp))
    return ToyNet(net.in_channels, layers)
