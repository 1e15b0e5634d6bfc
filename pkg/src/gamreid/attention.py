"""Grouped attention module: channel gating followed by spatial gating.

The channel gate squeezes the feature map to per-channel means, maps them
through a square affine layer, and produces per-channel weights in (0, 1).
The spatial gate pools the channel-refined map across channels and runs a
single 7x7 convolution to produce per-pixel weights. The module output is
spatial_gate * (channel_gate * input), preserving the input shape.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError
from .imageops import write_pgm


class ChannelAttention:
    """Per-channel sigmoid gate driven by globally pooled features."""

    def __init__(self, channels, rng, dtype=np.float64):
        self.channels = channels
        self.fc_weight = T.kaiming_uniform(rng, (channels, channels), channels, dtype)
        self.fc_bias = T.zeros_param((channels,), dtype)

    def forward(self, x):
        if x.data.ndim != 4 or x.data.shape[1] != self.channels:
            raise ShapeError(
                f"channel attention built for {self.channels} channels, got {x.data.shape}")
        pooled = T.global_avg_pool(x)
        return T.sigmoid(T.linear(pooled, self.fc_weight, self.fc_bias))

    def params(self, prefix):
        return [(f"{prefix}.fc_weight", self.fc_weight), (f"{prefix}.fc_bias", self.fc_bias)]


class SpatialAttention:
    """Per-pixel sigmoid gate from a 7x7 convolution over the channel mean."""

    KERNEL = 7

    def __init__(self, rng, dtype=np.float64):
        k = self.KERNEL
        self.conv_weight = T.kaiming_uniform(rng, (1, 1, k, k), k * k, dtype)
        self.conv_bias = T.zeros_param((1,), dtype)

    def forward(self, x):
        pooled = T.channel_avg_pool(x)
        logits = T.conv2d(pooled, self.conv_weight, self.conv_bias,
                          stride=1, padding=self.KERNEL // 2)
        return T.sigmoid(logits)

    def params(self, prefix):
        return [(f"{prefix}.conv_weight", self.conv_weight),
                (f"{prefix}.conv_bias", self.conv_bias)]


class GroupedAttentionModule:
    """Channel gate then spatial gate, applied multiplicatively."""

    def __init__(self, channels, rng, dtype=np.float64):
        self.channels = channels
        self.channel = ChannelAttention(channels, rng, dtype)
        self.spatial = SpatialAttention(rng, dtype)

    def forward(self, x, sink=None):
        """Refine [N, C, H, W] features; shape is preserved.

        When sink is a dict, the channel weights [N, C] and spatial
        weights [N, 1, H, W] are stored under "channel" and "spatial".
        """
        gate_c = self.channel.forward(x)
        n, c = gate_c.data.shape
        refined = T.mul(T.reshape(gate_c, (n, c, 1, 1)), x)
        gate_s = self.spatial.forward(refined)
        out = T.mul(gate_s, refined)
        if sink is not None:
            sink["channel"] = gate_c
            sink["spatial"] = gate_s
        return out

    def params(self, prefix):
        return self.channel.params(f"{prefix}.channel") + self.spatial.params(f"{prefix}.spatial")


def attention_map_to_bytes(spatial_gate, index):
    """Convert one spatial attention map to an 8-bit grayscale image.

    spatial_gate is [N, 1, H, W] (Tensor or array); the selected map is
    min-max scaled to [0, 255] with floor rounding. A constant map has no
    range to scale and comes back all zeros.
    """
    arr = spatial_gate.data if isinstance(spatial_gate, T.Tensor) else np.asarray(spatial_gate)
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeError(f"expected spatial attention of shape [N, 1, H, W], got {arr.shape}")
    n = arr.shape[0]
    if not 0 <= index < n:
        raise UsageError(f"attention map index {index} out of range for batch of {n}")
    plane = arr[index, 0].astype(np.float64)
    if plane.size == 0:
        raise UsageError("attention map has an empty spatial extent")
    if not np.isfinite(plane).all():
        raise UsageError("attention map contains non-finite values")
    lo = plane.min()
    hi = plane.max()
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    scaled = np.floor((plane - lo) / (hi - lo) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def export_attention_map(spatial_gate, index, path):
    """Write one spatial attention map as a binary PGM file."""
    write_pgm(path, attention_map_to_bytes(spatial_gate, index))
