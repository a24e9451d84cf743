"""Procedural multi-view expression dataset.

Each image is a face-like template (oval, two eye blobs, a mouth bar) with a
class-defining glyph painted into a fixed mid-face window. The glyph is a
4x4 cell pattern chosen from a binary code with pairwise Hamming distance at
least 8, so classes stay separable under noise by construction. The pose
label applies a horizontal shear plus translation, implemented as an inverse
per-row resampling; the middle pose bin is the exact identity. Small bright
clutter rectangles outside the glyph window make a whole-image classifier's
life harder without touching class information.

The glyph window is fully repainted, and the clutter/noise random draws do
not depend on the class label: two renders with the same rng state and
different expressions differ only inside the (frontal) glyph window.

Geometry constants (window center/half side, shear and translate ranges) are
module-level: they define the task, not a tuning surface.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import Region
from .errors import ConfigError, DimensionError

GLYPH_CENTER = (0.5, 0.60)   # (x, y) of the class glyph window
GLYPH_HALF = 0.18
SHEAR_MAX = 0.35
TRANSLATE_MAX = 0.10
CLUTTER_COUNT = 3
TEST_FRACTION = 0.2

# 4x4 cell patterns: all nonzero XOR combinations of four basis masks.
# Every pairwise XOR is again a nonzero combination, and each of those has
# at least 8 of the 16 bits set, so any two patterns disagree on >= 8 cells.
_BASIS = (0x5555, 0x3333, 0x0F0F, 0x00FF)


def _codewords():
    words = []
    for bits in range(1, 16):
        w = 0
        for i in range(4):
            if bits & (1 << i):
                w ^= _BASIS[i]
        words.append(w)
    return words


CODEWORDS = _codewords()


@dataclass
class SynthConfig:
    n_expressions: int = 7
    n_poses: int = 5
    image_size: int = 48
    samples_per_cell: int = 20
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if self.n_expressions < 2:
            raise ConfigError(f"n_expressions must be >= 2, got {self.n_expressions}")
        if self.n_expressions > len(CODEWORDS):
            raise ConfigError(
                f"at most {len(CODEWORDS)} expression glyphs available, "
                f"got {self.n_expressions}")
        if self.n_poses < 2:
            raise ConfigError(f"n_poses must be >= 2, got {self.n_poses}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.samples_per_cell < 1:
            raise ConfigError(
                f"samples_per_cell must be >= 1, got {self.samples_per_cell}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        return self


@dataclass
class Sample:
    image: np.ndarray          # (1, 1, H, W) float64 in [0, 1]
    y_e: int
    y_p: int
    gt_region: Region
    id: str


def pose_parameters(y_p, n_poses):
    """Shear and translate for a pose bin, evenly spaced and symmetric; the
    middle bin of an odd count is exactly (0, 0)."""
    if not 0 <= y_p < n_poses:
        raise ConfigError(f"pose bin {y_p} outside [0, {n_poses})")
    u = 2.0 * y_p / (n_poses - 1) - 1.0   # in [-1, 1]
    return SHEAR_MAX * u, TRANSLATE_MAX * u


def _fill_ellipse(img, cx, cy, rx, ry, value):
    h, w = img.shape
    v, u = np.mgrid[0:h, 0:w]
    un = (u + 0.5) / w
    vn = (v + 0.5) / h
    inside = ((un - cx) / rx) ** 2 + ((vn - cy) / ry) ** 2 <= 1.0
    img[inside] = value


def _fill_rect(img, cx, cy, hx, hy, value):
    h, w = img.shape
    r0 = max(0, int(round((cy - hy) * h)))
    r1 = min(h, int(round((cy + hy) * h)))
    c0 = max(0, int(round((cx - hx) * w)))
    c1 = min(w, int(round((cx + hx) * w)))
    img[r0:r1, c0:c1] = value


def _paint_template(img):
    _fill_ellipse(img, 0.5, 0.5, 0.34, 0.44, 0.45)
    _fill_ellipse(img, 0.35, 0.33, 0.06, 0.05, 0.85)
    _fill_ellipse(img, 0.65, 0.33, 0.06, 0.05, 0.85)
    _fill_rect(img, 0.5, 0.85, 0.10, 0.025, 0.80)


def _paint_glyph(img, y_e):
    """Repaint the whole glyph window: gray base, then the 4x4 cell code."""
    cx, cy = GLYPH_CENTER
    size = img.shape[0]
    r0 = int(round((cy - GLYPH_HALF) * size))
    c0 = int(round((cx - GLYPH_HALF) * size))
    span = int(round(2 * GLYPH_HALF * size))
    img[r0:r0 + span, c0:c0 + span] = 0.45
    word = CODEWORDS[y_e]
    edges = np.linspace(0, span, 5).round().astype(int)
    for cell in range(16):
        rr, cc = divmod(cell, 4)
        value = 0.85 if word & (1 << cell) else 0.15
        img[r0 + edges[rr]:r0 + edges[rr + 1],
            c0 + edges[cc]:c0 + edges[cc + 1]] = value


def _paint_clutter(img, rng):
    """Bright little rectangles outside the glyph window. Placement draws a
    fixed-length rng sequence (no rejection loops), so the consumed stream
    is identical for every class."""
    cx, cy = GLYPH_CENTER
    for _ in range(CLUTTER_COUNT):
        hx = rng.uniform(0.03, 0.06)
        hy = rng.uniform(0.03, 0.06)
        value = rng.uniform(0.65, 0.95)
        side = rng.integers(0, 4)
        a = rng.uniform(0.08, 0.92)
        b = rng.uniform(0.08, 0.25)
        # b <= 0.25 keeps the rectangle center within a quarter of the gap
        # between the window edge and the image border, so even the largest
        # rectangle stays clear of the window
        if side == 0:    # above the window
            px, py = a, (cy - GLYPH_HALF) * b
        elif side == 1:  # below
            px, py = a, 1.0 - (1.0 - (cy + GLYPH_HALF)) * b
        elif side == 2:  # left
            px, py = (cx - GLYPH_HALF) * b, a
        else:            # right
            px, py = 1.0 - (1.0 - (cx + GLYPH_HALF)) * b, a
        _fill_rect(img, px, py, hx, hy, value)


def _shear_rows(img, shear, translate):
    """Inverse-map each row: destination column u samples the source at
    u - shift(row). Outside the image reads as background 0."""
    if shear == 0.0 and translate == 0.0:
        return img.copy()
    h, w = img.shape
    out = np.empty_like(img)
    cols = (np.arange(w) + 0.5) / w
    for r in range(h):
        vn = (r + 0.5) / h
        shift = shear * (vn - 0.5) + translate
        out[r] = np.interp(cols - shift, cols, img[r], left=0.0, right=0.0)
    return out


def transform_region(region, shear, translate):
    """Bounding square of the sheared glyph window: the center slides by the
    shift at the window's own row band; the half side grows by the shear
    spread across the band."""
    cx = region.x + shear * (region.y - 0.5) + translate
    half = region.l * (1.0 + abs(shear))
    return Region(cx, region.y, half).clamped()


def render_sample(cfg, y_e, y_p, rng, sample_id=""):
    cfg.validate()
    if not 0 <= y_e < cfg.n_expressions:
        raise ConfigError(f"expression label {y_e} outside [0, {cfg.n_expressions})")
    clutter_rng, noise_rng = rng.spawn(2)
    size = cfg.image_size
    img = np.zeros((size, size))
    _paint_template(img)
    _paint_clutter(img, clutter_rng)
    _paint_glyph(img, y_e)
    shear, translate = pose_parameters(y_p, cfg.n_poses)
    img = _shear_rows(img, shear, translate)
    if cfg.noise_sigma > 0:
        img = img + noise_rng.normal(0.0, cfg.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    gt = transform_region(Region(GLYPH_CENTER[0], GLYPH_CENTER[1], GLYPH_HALF),
                          shear, translate)
    return Sample(image=img[None, None], y_e=y_e, y_p=y_p, gt_region=gt,
                  id=sample_id)


def generate_dataset(cfg):
    """All cells x samples_per_cell, split 80/20 inside every cell with a
    dedicated per-cell split stream. Deterministic given cfg.seed."""
    cfg.validate()
    train, test = [], []
    n_test = max(1, round(TEST_FRACTION * cfg.samples_per_cell))
    if cfg.samples_per_cell == 1:
        n_test = 0
    for e in range(cfg.n_expressions):
        for p in range(cfg.n_poses):
            cell = []
            for k in range(cfg.samples_per_cell):
                rng = np.random.default_rng(
                    np.random.SeedSequence((cfg.seed, e, p, k)))
                cell.append(render_sample(cfg, e, p, rng,
                                          sample_id=f"e{e}_p{p}_{k:04d}"))
            split_rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, e, p, 0xA5A5)))
            test_idx = set(split_rng.choice(cfg.samples_per_cell, n_test,
                                            replace=False).tolist())
            for k, s in enumerate(cell):
                (test if k in test_idx else train).append(s)
    return train, test


def region_iou(a, b):
    """Intersection over union of two square regions, in [0, 1]."""
    ix = min(a.x + a.l, b.x + b.l) - max(a.x - a.l, b.x - b.l)
    iy = min(a.y + a.l, b.y + b.l) - max(a.y - a.l, b.y - b.l)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = 4.0 * a.l * a.l + 4.0 * b.l * b.l - inter
    return inter / union


def stack_images(samples):
    """(N, 1, H, W) batch from a list of samples."""
    return np.concatenate([s.image for s in samples], axis=0)


def labels_of(samples):
    y_e = np.array([s.y_e for s in samples], dtype=np.int64)
    y_p = np.array([s.y_p for s in samples], dtype=np.int64)
    return y_e, y_p
