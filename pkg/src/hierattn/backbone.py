"""Densely connected convolutional backbone.

One dense block per scale: every layer consumes the concatenation of all
earlier layer outputs and contributes `growth_k` new channels, so the output
channel count is forced to in_channels + depth * growth_k. Each composite
starts with channel_norm: normalization by the current batch's per-channel
statistics followed by a learned per-channel affine (scale, shift), stored
pre-shaped as (1, C, 1, 1) so the parameter leaves are consumed directly by
the recorded ops. The normalization keeps no running state, and without it
activations shrink multiplicatively through the stack under the fan-in
kernel init and gradient flow collapses at this depth.

Parameters are plain name -> tensor mappings. Each scale of the full network
owns an independent copy; this module is scale-agnostic and just runs whatever
parameter set it is handed.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError


@dataclass
class DenseBlockConfig:
    in_channels: int
    growth_k: int = 4
    depth: int = 6
    bottleneck: int = 8

    def validate(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.growth_k < 1:
            raise ConfigError(f"growth_k must be >= 1, got {self.growth_k}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")
        return self

    @property
    def out_channels(self):
        return self.in_channels + self.depth * self.growth_k


@dataclass
class BackboneConfig:
    """Stem + one dense block. image_size is the square input side."""

    image_channels: int = 1
    image_size: int = 48
    stem_channels: int = 8
    stem_pool: int = 4
    growth_k: int = 4
    depth: int = 6
    bottleneck: int = 8

    def validate(self):
        if self.image_channels < 1:
            raise ConfigError(f"image_channels must be >= 1, got {self.image_channels}")
        if self.image_size < 2:
            raise ConfigError(f"image_size must be >= 2, got {self.image_size}")
        if self.stem_channels < 1:
            raise ConfigError(f"stem_channels must be >= 1, got {self.stem_channels}")
        if self.stem_pool < 1:
            raise ConfigError(f"stem_pool must be >= 1, got {self.stem_pool}")
        if self.image_size % self.stem_pool != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by stem_pool {self.stem_pool}")
        self.block().validate()
        return self

    def block(self):
        return DenseBlockConfig(in_channels=self.stem_channels,
                                growth_k=self.growth_k, depth=self.depth,
                                bottleneck=self.bottleneck)

    @property
    def out_channels(self):
        return self.block().out_channels

    @property
    def map_size(self):
        return self.image_size // self.stem_pool


def uniform_fan_in(rng, shape, fan_in):
    """Zero-mean uniform init with bound 1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_dense_block(cfg, rng):
    cfg.validate()
    params = {}
    c = cfg.in_channels
    for layer in range(cfg.depth):
        pre = f"layer{layer}."
        params[pre + "norm1.scale"] = np.ones((1, c, 1, 1))
        params[pre + "norm1.shift"] = np.zeros((1, c, 1, 1))
        params[pre + "squeeze.kernel"] = uniform_fan_in(
            rng, (cfg.bottleneck, c, 1, 1), c)
        params[pre + "norm2.scale"] = np.ones((1, cfg.bottleneck, 1, 1))
        params[pre + "norm2.shift"] = np.zeros((1, cfg.bottleneck, 1, 1))
        params[pre + "conv.kernel"] = uniform_fan_in(
            rng, (cfg.growth_k, cfg.bottleneck, 3, 3), cfg.bottleneck * 9)
        c += cfg.growth_k
    return params


def init_backbone(cfg, rng):
    cfg.validate()
    params = {
        "stem.kernel": uniform_fan_in(
            rng, (cfg.stem_channels, cfg.image_channels, 3, 3),
            cfg.image_channels * 9),
        "stem.norm.scale": np.ones((1, cfg.stem_channels, 1, 1)),
        "stem.norm.shift": np.zeros((1, cfg.stem_channels, 1, 1)),
    }
    params.update(init_dense_block(cfg.block(), rng))
    c_out = cfg.out_channels
    params["final.norm.scale"] = np.ones((1, c_out, 1, 1))
    params["final.norm.shift"] = np.zeros((1, c_out, 1, 1))
    return params


# Variance floor: bounds the normalization backward (~1/sqrt(eps)) when a
# channel is nearly constant, at negligible distortion for active channels.
NORM_EPS = 1e-3


def channel_norm(x, scale, shift, eps=NORM_EPS):
    """Per-channel normalization by the statistics of the current batch,
    then a learned affine. Stateless: no running statistics are kept, so
    the output is a pure function of (batch, parameters) and identical
    re-runs stay bit-identical."""
    mu = ad.tmean(x, axis=(0, 2, 3), keepdims=True)
    centered = x - mu
    var = ad.tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
    return centered / ad.sqrt(var + eps) * scale + shift


def dense_block_forward(x, params, cfg, return_layers=False):
    """Run the dense block. Returns the concatenated feature map; with
    return_layers=True also the list of per-layer contributions, in order."""
    cfg.validate()
    x = ad.as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"dense block input must be NCHW, got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"dense block input has {x.shape[1]} channels, config says {cfg.in_channels}")
    feat = x
    layers = []
    for layer in range(cfg.depth):
        pre = f"layer{layer}."
        h = ad.relu(channel_norm(feat, params[pre + "norm1.scale"],
                                 params[pre + "norm1.shift"]))
        h = ad.conv2d(h, params[pre + "squeeze.kernel"])
        h = ad.relu(channel_norm(h, params[pre + "norm2.scale"],
                                 params[pre + "norm2.shift"]))
        m = ad.conv2d(h, params[pre + "conv.kernel"], pad=1)
        layers.append(m)
        feat = ad.concat_channels([feat, m])
    if return_layers:
        return feat, layers
    return feat


def backbone_forward(image, params, cfg):
    """Stem (3x3 conv, channel_norm, relu, average pool), the dense block,
    then a final channel_norm + relu so every consumer of the map sees
    features on a common unit scale regardless of depth."""
    cfg.validate()
    image = ad.as_tensor(image)
    if image.ndim != 4:
        raise DimensionError(f"backbone input must be NCHW, got {image.shape}")
    if image.shape[1] != cfg.image_channels:
        raise DimensionError(
            f"backbone input has {image.shape[1]} channels, config says {cfg.image_channels}")
    if image.shape[2] != cfg.image_size or image.shape[3] != cfg.image_size:
        raise DimensionError(
            f"backbone input is {image.shape[2]}x{image.shape[3]}, "
            f"expected {cfg.image_size}x{cfg.image_size}")
    h = ad.conv2d(image, params["stem.kernel"], pad=1)
    h = ad.relu(channel_norm(h, params["stem.norm.scale"],
                             params["stem.norm.shift"]))
    if cfg.stem_pool > 1:
        h = ad.avg_pool(h, cfg.stem_pool)
    h = dense_block_forward(h, params, cfg.block())
    return ad.relu(channel_norm(h, params["final.norm.scale"],
                                params["final.norm.shift"]))
