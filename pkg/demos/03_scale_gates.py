"""Squeeze three scale maps into pooled vectors, gate them, and fuse. Shows
the gate floor, the unit-gate identity, and per-segment locality."""

import numpy as np

import _path  # noqa: F401
from hierattn import autodiff as ad
from hierattn.fusion import excite, init_scale_attention, reweight_fuse, squeeze


def main():
    rng = np.random.default_rng(7)
    maps = [ad.Tensor(rng.normal(size=(2, c, 6, 6))) for c in (5, 4, 3)]

    pooled_all = squeeze(maps)
    print(f"squeeze: {[m.shape for m in maps]} -> {pooled_all.shape}")

    params = {k: ad.param(v) for k, v in
              init_scale_attention(pooled_all.shape[1], rng, reduction=4).items()}
    gates = excite(pooled_all, params)
    print(f"gates = {np.round(gates.data, 4)}")
    # relu before the sigmoid keeps every gate in [0.5, 1): a scale can be
    # discounted to half strength but never switched off.
    print(f"gate range ok: {bool((gates.data >= 0.5).all() and (gates.data < 1).all())}")

    pooled = [ad.global_avg_pool(m) for m in maps]
    fused = reweight_fuse(pooled, gates)
    print(f"fused width = {fused.shape[1]} "
          f"(= {' + '.join(str(p.shape[1]) for p in pooled)})")

    # Unit gates reduce fusion to plain concatenation, bit for bit.
    ones = ad.Tensor(np.ones((2, 3)))
    plain = np.concatenate([p.data for p in pooled], axis=1)
    same = np.array_equal(reweight_fuse(pooled, ones).data, plain)
    print(f"unit gates == concat: {same}")

    # Each gate touches only its own segment.
    bumped = gates.data.copy()
    bumped[:, 1] *= 0.9
    refused = reweight_fuse(pooled, ad.Tensor(bumped))
    delta = np.abs(refused.data - fused.data)
    w0, w1 = pooled[0].shape[1], pooled[1].shape[1]
    print(f"segment deltas: s1={delta[:, :w0].max():.2e} "
          f"s2={delta[:, w0:w0 + w1].max():.2e} "
          f"s3={delta[:, w0 + w1:].max():.2e}")


if __name__ == "__main__":
    main()
