"""Hierarchical region attention.

Each scale owns a small proposal head that reads the pooled feature map and
emits a square attention region plus expression logits. The region drives a
differentiable crop: a smooth boxcar mask multiplied into the source image,
followed by bilinear resampling of the region window back to full resolution.
The coarse-to-fine chain is trained with a margin ranking loss that demands
each finer scale be more confident on the true class than its predecessor.

Region coordinates are normalized to [0, 1]. The boxcar transition profile is
evaluated on distances in PIXEL units (normalized offsets scaled by the image
side): a given slope then has a resolution-independent transition width of a
few pixels, and at high slope the mask saturates all the way to the border
pixels, which is what makes a full-image crop reproduce its input.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .backbone import uniform_fan_in

L_MIN_DEFAULT = 0.1
MASK_SLOPE_DEFAULT = 10.0
RANK_MARGIN_DEFAULT = 0.05
SEARCH_HALF_SIDE_DEFAULT = 0.35


@dataclass
class Region:
    """Square attention window: center (x, y), half side l, all normalized."""

    x: float
    y: float
    l: float

    def validate(self, l_min=L_MIN_DEFAULT):
        if not (l_min <= self.l <= 0.5):
            raise ConfigError(f"half side {self.l} outside [{l_min}, 0.5]")
        for name, c in (("x", self.x), ("y", self.y)):
            if not (self.l - 1e-12 <= c <= 1.0 - self.l + 1e-12):
                raise ConfigError(
                    f"center {name}={c} puts the window outside the image (l={self.l})")
        return self

    def clamped(self, l_min=L_MIN_DEFAULT):
        l = min(max(self.l, l_min), 0.5)
        x = min(max(self.x, l), 1.0 - l)
        y = min(max(self.y, l), 1.0 - l)
        return Region(x, y, l)


@dataclass
class RegionTensors:
    """Batched differentiable region: x, y, l are (N,) tensors."""

    x: ad.Tensor
    y: ad.Tensor
    l: ad.Tensor

    def detached(self):
        return RegionTensors(self.x.detach(), self.y.detach(), self.l.detach())

    def at(self, i):
        return Region(float(self.x.data[i]), float(self.y.data[i]),
                      float(self.l.data[i]))


@dataclass
class ScaleOutput:
    feature_map: ad.Tensor
    region: RegionTensors  # proposal for the next scale; None at the last
    expr_logits: ad.Tensor
    expr_probs: ad.Tensor


def init_pan(in_features, classes, hidden, rng):
    """Two stacked fully-connected layers: pooled features -> 3 + classes.

    The three region rows of the output layer start at zero so the first
    proposal is the centered square (sigmoid(0) = 0.5 everywhere).
    """
    w2 = uniform_fan_in(rng, (3 + classes, hidden), hidden)
    w2[:3] = 0.0
    return {
        "fc1.weight": uniform_fan_in(rng, (hidden, in_features), in_features),
        "fc1.bias": np.zeros(hidden),
        "fc2.weight": w2,
        "fc2.bias": np.zeros(3 + classes),
    }


def pan_forward(feature_map, params, l_min=L_MIN_DEFAULT, propose_region=True):
    """Proposal head. Region coords go through sigmoid then an affine map
    that nests the window inside the image by construction:
    l in (l_min, 0.5), then x, y in (l, 1-l)."""
    feature_map = ad.as_tensor(feature_map)
    if feature_map.ndim != 4:
        raise DimensionError(f"expected NCHW feature map, got {feature_map.shape}")
    pooled = ad.global_avg_pool(feature_map)
    hidden = ad.relu(ad.fully_connected(pooled, params["fc1.weight"],
                                        params["fc1.bias"]))
    head = ad.fully_connected(hidden, params["fc2.weight"], params["fc2.bias"])
    classes = head.shape[1] - 3
    if classes < 1:
        raise DimensionError(f"head width {head.shape[1]} leaves no class logits")
    expr_logits = ad.slice_channels(head, 3, head.shape[1])
    expr_probs = ad.softmax(expr_logits)
    region = None
    if propose_region:
        n = head.shape[0]
        raw = ad.sigmoid(ad.slice_channels(head, 0, 3))
        rx = ad.reshape(ad.slice_channels(raw, 0, 1), (n,))
        ry = ad.reshape(ad.slice_channels(raw, 1, 2), (n,))
        rl = ad.reshape(ad.slice_channels(raw, 2, 3), (n,))
        l = rl * (0.5 - l_min) + l_min
        one_minus_2l = l * (-2.0) + 1.0
        x = rx * one_minus_2l + l
        y = ry * one_minus_2l + l
        region = RegionTensors(x, y, l)
    return ScaleOutput(feature_map=feature_map, region=region,
                       expr_logits=expr_logits, expr_probs=expr_probs)


def init_region_search(feature_map, l0=SEARCH_HALF_SIDE_DEFAULT,
                       l_min=L_MIN_DEFAULT):
    """Seed region for the second scale: exhaustive scan for the window of
    half side l0 with the largest accumulated peak response, where each
    pixel's response is its strongest channel activation. The channel max
    keys on locally distinctive features; a channel sum would favor broadly
    bright areas over them.

    Not differentiable; runs on the raw array. Ties break toward the
    smallest (row, col) in row-major order. Returns one Region per sample.
    """
    data = feature_map.data if isinstance(feature_map, ad.Tensor) else np.asarray(feature_map)
    if data.ndim != 4:
        raise DimensionError(f"expected NCHW feature map, got {data.shape}")
    n, _, gh, gw = data.shape
    response = data.max(axis=1)
    wh = max(1, min(gh, round(2.0 * l0 * gh)))
    ww = max(1, min(gw, round(2.0 * l0 * gw)))
    windows = np.lib.stride_tricks.sliding_window_view(response, (wh, ww),
                                                       axis=(1, 2))
    sums = windows.sum(axis=(3, 4))  # (n, gh-wh+1, gw-ww+1)
    regions = []
    rows = sums.shape[1]
    cols = sums.shape[2]
    for i in range(n):
        flat = int(np.argmax(sums[i]))  # first max in row-major order
        r, c = divmod(flat, cols)
        y = (r + wh / 2.0) / gh
        x = (c + ww / 2.0) / gw
        regions.append(Region(x, y, l0).clamped(l_min))
    return regions


def regions_to_tensors(regions):
    return RegionTensors(
        x=ad.Tensor(np.array([r.x for r in regions])),
        y=ad.Tensor(np.array([r.y for r in regions])),
        l=ad.Tensor(np.array([r.l for r in regions])))


def _transition(t, slope):
    # h(t) = (tanh(slope * t) + 1) / 2, evaluated on a tensor of distances
    return ad.tanh(t * slope) * 0.5 + 0.5


def boxcar_mask(region, height, width, slope=MASK_SLOPE_DEFAULT):
    """Smooth boxcar over the region window, shape (N, 1, height, width).

    Pixel (i, j) sits at normalized center ((j+0.5)/W, (i+0.5)/H); its four
    signed distances to the window edges are scaled to pixel units before the
    tanh profile, so the transition band is `1/slope` pixels wide regardless
    of resolution. Values are strictly inside (0, 1) and differentiable in
    x, y, l.
    """
    if slope <= 0:
        raise ConfigError(f"slope must be > 0, got {slope}")
    if isinstance(region, Region):
        region = regions_to_tensors([region])
    n = region.x.shape[0]
    u = (np.arange(width) + 0.5) / width   # (W,) normalized column centers
    v = (np.arange(height) + 0.5) / height
    x = ad.reshape(region.x, (n, 1))
    y = ad.reshape(region.y, (n, 1))
    l = ad.reshape(region.l, (n, 1))
    left = x - l
    right = x + l
    top = y - l
    bottom = y + l
    row = (_transition((ad.Tensor(u[None, :]) - left) * width, slope)
           * _transition((right - ad.Tensor(u[None, :])) * width, slope))
    col = (_transition((ad.Tensor(v[None, :]) - top) * height, slope)
           * _transition((bottom - ad.Tensor(v[None, :])) * height, slope))
    row4 = ad.reshape(row, (n, 1, 1, width))
    col4 = ad.reshape(col, (n, 1, height, 1))
    return row4 * col4


def crop_and_zoom(source, region, out_h, out_w, slope=MASK_SLOPE_DEFAULT):
    """Differentiable crop: mask the source with the region boxcar, then
    bilinearly resample the region window to (out_h, out_w). Gradients flow
    to the source pixels and to the region coordinates through both steps."""
    source = ad.as_tensor(source)
    if source.ndim != 4:
        raise DimensionError(f"expected NCHW source, got {source.shape}")
    single = isinstance(region, Region)
    if single:
        region = regions_to_tensors([region])
    if region.x.shape[0] != source.shape[0]:
        raise DimensionError(
            f"{region.x.shape[0]} regions for batch of {source.shape[0]}")
    mask = boxcar_mask(region, source.shape[2], source.shape[3], slope)
    masked = source * mask
    return ad.window_resample(masked, region.x, region.y, region.l,
                              out_h, out_w)


def scale_expression_loss(out, y_e):
    """Cross-entropy of the scale's expression head; batch mean."""
    ce = ad.softmax_cross_entropy(out.expr_logits, y_e)
    return ce if ce.ndim == 0 else ce.mean()


def ranking_loss(p_prev, p_curr, mar=RANK_MARGIN_DEFAULT):
    """max{0, p_prev - p_curr + mar}, per element.

    p_prev is detached: the previous scale's confidence is the fixed bar the
    current scale must clear, so the gradient only pushes p_curr up. The
    subgradient at the hinge point is 0 (relu convention).
    """
    p_prev = ad.as_tensor(p_prev)
    p_curr = ad.as_tensor(p_curr)
    return ad.relu(p_prev.detach() - p_curr + mar)


def attention_loss(prev, curr, y_e, mar=RANK_MARGIN_DEFAULT):
    """Ranking term on the true-class probability plus the current scale's
    expression loss; scalar (batch mean)."""
    p_prev = ad.take_class(prev.expr_probs, y_e)
    p_curr = ad.take_class(curr.expr_probs, y_e)
    rank = ranking_loss(p_prev, p_curr, mar)
    rank = rank if rank.ndim == 0 else rank.mean()
    return rank + scale_expression_loss(curr, y_e)
