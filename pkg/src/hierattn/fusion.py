"""Joint scale attention: squeeze, excite, and gated fusion.

The three per-scale feature maps are pooled to vectors, concatenated, and a
tiny two-layer excitation head produces one sigmoid gate per scale. The fused
representation is the concatenation of the pooled vectors, each segment
multiplied by its scale's gate. Gates are not mutually exclusive and do not
sum to anything.

The excitation chain applies relu after BOTH layers before the sigmoid,
so a gate can never fall below sigmoid(0) = 0.5: the relu clamps the
pre-sigmoid value at zero from below. Deliberate; the floor is part of the
contract here.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .backbone import uniform_fan_in


@dataclass
class FusedRepresentation:
    m_f: ad.Tensor    # (N, C1+C2+C3) pooled concatenation
    gates: ad.Tensor  # (N, 3)
    f: ad.Tensor      # (N, C1+C2+C3) gated concatenation


def init_scale_attention(total_features, rng, reduction=4):
    if total_features < 1:
        raise ConfigError(f"total_features must be >= 1, got {total_features}")
    if reduction < 1:
        raise ConfigError(f"reduction must be >= 1, got {reduction}")
    bottleneck = math.ceil(total_features / reduction)
    return {
        "w1": uniform_fan_in(rng, (bottleneck, total_features), total_features),
        "w2": uniform_fan_in(rng, (3, bottleneck), bottleneck),
    }


def squeeze(maps):
    """Global-average-pool each NCHW map and concatenate: (N, sum of C)."""
    if len(maps) != 3:
        raise DimensionError(f"expected three scale maps, got {len(maps)}")
    parts = [ad.global_avg_pool(ad.as_tensor(m)) for m in maps]
    n = parts[0].shape[0]
    for p in parts[1:]:
        if p.shape[0] != n:
            raise DimensionError(
                f"scale maps disagree on batch size: {n} vs {p.shape[0]}")
    return ad.concat_channels(parts)


def excite(m_f, params):
    """Per-scale gates sigmoid(relu(W2 @ relu(W1 @ m_f))), shape (N, 3)."""
    m_f = ad.as_tensor(m_f)
    if m_f.ndim != 2:
        raise DimensionError(f"expected (N, features) input, got {m_f.shape}")
    hidden = ad.relu(ad.fully_connected(m_f, params["w1"]))
    pre = ad.relu(ad.fully_connected(hidden, params["w2"]))
    return ad.sigmoid(pre)


def reweight_fuse(pooled, gates):
    """f = concat(c1*p1, c2*p2, c3*p3): each pooled segment scaled by its
    gate. Linear in each gate; gradients reach gates and features."""
    if len(pooled) != 3:
        raise DimensionError(f"expected three pooled vectors, got {len(pooled)}")
    gates = ad.as_tensor(gates)
    if gates.ndim != 2 or gates.shape[1] != 3:
        raise DimensionError(f"expected (N, 3) gates, got {gates.shape}")
    segments = []
    for k, p in enumerate(pooled):
        p = ad.as_tensor(p)
        gate = ad.slice_channels(gates, k, k + 1)  # (N, 1), broadcasts
        segments.append(p * gate)
    return ad.concat_channels(segments)


def scale_fusion(maps, params):
    """Full chain over the three scale maps: squeeze, excite, fuse."""
    pooled = [ad.global_avg_pool(ad.as_tensor(m)) for m in maps]
    m_f = ad.concat_channels(pooled)
    gates = excite(m_f, params)
    f = reweight_fuse(pooled, gates)
    return FusedRepresentation(m_f=m_f, gates=gates, f=f)
