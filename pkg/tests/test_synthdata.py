import itertools
import math

import numpy as np
import pytest

import hierattn.autodiff as ad
from hierattn.attention import Region
from hierattn.errors import ConfigError, DatasetError
from hierattn.pgm import load_dataset, load_pgm, save_dataset, save_pgm
from hierattn.synthdata import (CODEWORDS, GLYPH_CENTER, GLYPH_HALF,
                                SynthConfig, generate_dataset,
                                pose_parameters, region_iou, render_sample,
                                transform_region)

FRONTAL = 2  # middle of the default 5 pose bins


def _render(y_e, y_p, seed=7, **kw):
    cfg = SynthConfig(**kw) if kw else SynthConfig()
    return render_sample(cfg, y_e, y_p, np.random.default_rng(seed))


def _window_bounds(size=48):
    r0 = round((GLYPH_CENTER[1] - GLYPH_HALF) * size)
    c0 = round((GLYPH_CENTER[0] - GLYPH_HALF) * size)
    span = round(2 * GLYPH_HALF * size)
    return r0, c0, span


def test_codewords_pairwise_hamming_at_least_8():
    for a, b in itertools.combinations(CODEWORDS, 2):
        assert bin(a ^ b).count("1") >= 8


def test_render_deterministic():
    a = _render(3, 1, noise_sigma=0.0)
    b = _render(3, 1, noise_sigma=0.0)
    assert np.array_equal(a.image, b.image)
    c = _render(3, 1)  # with noise, same rng seed
    d = _render(3, 1)
    assert np.array_equal(c.image, d.image)


def test_render_range_and_shape():
    s = _render(0, 4)
    assert s.image.shape == (1, 1, 48, 48)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    s.gt_region.validate()


def test_frontal_gt_region_is_untransformed_window():
    s = _render(2, FRONTAL)
    assert s.gt_region == Region(GLYPH_CENTER[0], GLYPH_CENTER[1], GLYPH_HALF)


def test_frontal_pose_is_identity_transform():
    assert pose_parameters(FRONTAL, 5) == (0.0, 0.0)
    sh, t = pose_parameters(4, 5)
    assert math.isclose(sh, 0.35) and math.isclose(t, 0.10)
    sh, t = pose_parameters(0, 5)
    assert math.isclose(sh, -0.35) and math.isclose(t, -0.10)
    with pytest.raises(ConfigError):
        pose_parameters(5, 5)


def test_class_difference_confined_to_glyph_window():
    a = _render(0, FRONTAL, seed=11, noise_sigma=0.0).image[0, 0]
    b = _render(5, FRONTAL, seed=11, noise_sigma=0.0).image[0, 0]
    diff = np.abs(a - b)
    r0, c0, span = _window_bounds()
    outside = diff.copy()
    outside[r0:r0 + span, c0:c0 + span] = 0.0
    assert outside.max() == 0.0
    assert diff[r0:r0 + span, c0:c0 + span].max() > 0.5


def test_frontal_glyph_cells_painted_exactly():
    y_e = 4
    img = _render(y_e, FRONTAL, noise_sigma=0.0).image[0, 0]
    r0, c0, span = _window_bounds()
    edges = np.linspace(0, span, 5).round().astype(int)
    word = CODEWORDS[y_e]
    for cell in range(16):
        rr, cc = divmod(cell, 4)
        want = 0.85 if word & (1 << cell) else 0.15
        block = img[r0 + edges[rr]:r0 + edges[rr + 1],
                    c0 + edges[cc]:c0 + edges[cc + 1]]
        assert np.array_equal(block, np.full(block.shape, want))


def test_transform_region_hand_values():
    base = Region(0.5, 0.6, 0.18)
    assert transform_region(base, 0.0, 0.0) == base
    moved = transform_region(base, 0.35, 0.10)
    assert math.isclose(moved.x, 0.5 + 0.35 * 0.1 + 0.10)
    assert math.isclose(moved.y, 0.6)
    assert math.isclose(moved.l, 0.18 * 1.35)


def test_generate_dataset_counts_and_balance():
    cfg = SynthConfig(samples_per_cell=20, seed=3)
    train, test = generate_dataset(cfg)
    assert len(train) == 560 and len(test) == 140
    for part, per_cell in ((train, 16), (test, 4)):
        counts = {}
        for s in part:
            counts[(s.y_e, s.y_p)] = counts.get((s.y_e, s.y_p), 0) + 1
        assert set(counts.values()) == {per_cell}
    ids = [s.id for s in train] + [s.id for s in test]
    assert len(set(ids)) == 700


def test_generate_dataset_deterministic():
    a_train, a_test = generate_dataset(SynthConfig(samples_per_cell=3, seed=9))
    b_train, b_test = generate_dataset(SynthConfig(samples_per_cell=3, seed=9))
    assert [s.id for s in a_train] == [s.id for s in b_train]
    assert [s.id for s in a_test] == [s.id for s in b_test]
    for x, y in zip(a_train[::17], b_train[::17]):
        assert np.array_equal(x.image, y.image)


def test_region_iou_cases():
    a = Region(0.5, 0.5, 0.25)
    assert region_iou(a, a) == 1.0
    assert region_iou(a, Region(0.1, 0.1, 0.1)) == 0.0
    nested = Region(0.5, 0.5, 0.125)
    assert math.isclose(region_iou(a, nested), 0.25, rel_tol=1e-12)


def test_region_iou_symmetric_and_bounded():
    rng = np.random.default_rng(5)
    for _ in range(200):
        la, lb = rng.uniform(0.1, 0.5, 2)
        a = Region(rng.uniform(la, 1 - la), rng.uniform(la, 1 - la), la)
        b = Region(rng.uniform(lb, 1 - lb), rng.uniform(lb, 1 - lb), lb)
        ab, ba = region_iou(a, b), region_iou(b, a)
        assert abs(ab - ba) < 1e-15
        assert 0.0 <= ab <= 1.0


def test_nearest_centroid_on_gt_crops_separates_classes():
    # the task must be learnable by construction: averaging ground-truth
    # crops per class and assigning test crops to the nearest centroid has
    # to clear 95% at this noise level
    cfg = SynthConfig(samples_per_cell=10, noise_sigma=0.05, seed=21)
    train, test = generate_dataset(cfg)

    def crop(sample):
        out = ad.window_resample(ad.Tensor(sample.image),
                                 sample.gt_region.x, sample.gt_region.y,
                                 sample.gt_region.l, 16, 16)
        return out.data.ravel()

    sums = np.zeros((cfg.n_expressions, 256))
    counts = np.zeros(cfg.n_expressions)
    for s in train:
        sums[s.y_e] += crop(s)
        counts[s.y_e] += 1
    centroids = sums / counts[:, None]
    hits = 0
    for s in test:
        d = ((centroids - crop(s)[None, :]) ** 2).sum(axis=1)
        hits += int(np.argmin(d)) == s.y_e
    assert hits / len(test) >= 0.95


def test_pgm_roundtrip_quantized(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 1, (20, 30))
    path = tmp_path / "x.pgm"
    save_pgm(path, img)
    back = load_pgm(path)
    assert back.shape == (20, 30)
    assert np.array_equal(back, np.rint(img * 255) / 255.0)


def test_pgm_rejects_garbage(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P6\n2 2\n255\n....")
    with pytest.raises(DatasetError):
        load_pgm(p)
    p.write_bytes(b"P5\n2 2\n255\n..")  # truncated pixels
    with pytest.raises(DatasetError):
        load_pgm(p)
    p.write_bytes(b"P5\n2 2\n65535\n" + b"\0" * 8)
    with pytest.raises(DatasetError):
        load_pgm(p)


def test_dataset_save_load_roundtrip(tmp_path):
    train, _ = generate_dataset(SynthConfig(samples_per_cell=2, seed=4))
    out = tmp_path / "ds"
    save_dataset(train, out)
    back = load_dataset(out)
    assert len(back) == len(train)
    for a, b in zip(train, back):
        assert a.id == b.id and a.y_e == b.y_e and a.y_p == b.y_p
        assert math.isclose(a.gt_region.x, b.gt_region.x)
        assert math.isclose(a.gt_region.l, b.gt_region.l)
        assert np.array_equal(b.image[0, 0],
                              np.rint(a.image[0, 0] * 255) / 255.0)


def test_load_dataset_missing_labels(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope")


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(n_expressions=1).validate()
    with pytest.raises(ConfigError):
        SynthConfig(n_expressions=16).validate()
    with pytest.raises(ConfigError):
        SynthConfig(n_poses=1).validate()
    with pytest.raises(ConfigError):
        SynthConfig(noise_sigma=-0.1).validate()
