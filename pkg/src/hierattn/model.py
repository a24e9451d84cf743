"""Whole-network assembly: the zooming scale cascade, gated fusion, and
task heads, plus the finite-difference check of the assembled loss."""

from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import autodiff as ad
from .attention import (Region, attention_loss, crop_and_zoom, init_pan,
                        init_region_search, pan_forward, regions_to_tensors)
from .backbone import backbone_forward, init_backbone
from .config import TrainConfig
from .errors import ContractError, DimensionError
from .fusion import init_scale_attention, scale_fusion
from .gradcheck import SuiteRow, grad_check
from .multitask import init_dcml, multi_loss_terms, predict
from .synthdata import SynthConfig, render_sample


def init_model(cfg, rng):
    """Flat name -> array dictionary for every component the flags enable.

    Initialization order is fixed (scales, then gating, then heads), so one
    rng always yields the same parameters for the same config.
    """
    cfg.validate()
    bcfg = cfg.backbone()
    params = {}
    for s in cfg.scales():
        for k, v in init_backbone(bcfg, rng).items():
            params[f"s{s}.backbone.{k}"] = v
        for k, v in init_pan(bcfg.out_channels, cfg.n_expressions,
                             cfg.pan_hidden, rng).items():
            params[f"s{s}.pan.{k}"] = v
    if cfg.use_scale_attention:
        for k, v in init_scale_attention(3 * bcfg.out_channels, rng,
                                         reduction=cfg.r).items():
            params[f"sa.{k}"] = v
    width = bcfg.out_channels * len(cfg.fused_scales())
    for k, v in init_dcml(width, cfg.n_expressions, cfg.n_poses, rng,
                          lambda_p_init=cfg.lambda_p_init).items():
        params[f"head.{k}"] = v
    return params


def as_parameters(arrays):
    """Trainable leaves: gradients accumulate, data is updated in place."""
    return {k: ad.param(v) for k, v in arrays.items()}


def as_constants(arrays):
    """Plain tensors for evaluation passes; nothing records, nothing flows."""
    return {k: ad.Tensor(v) for k, v in arrays.items()}


def _sub(params, prefix):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class Forward:
    """Everything one pass produces, for losses, metrics, and dumps."""

    scale_outputs: dict       # scale name -> ScaleOutput
    seed_regions: list        # scale-2 input windows (constants); None if no S2
    proposal: object          # scale-2 head's window in scale-2 coords, or None
    inputs: dict              # scale name -> zoomed input tensor ("2", "3")
    f: ad.Tensor              # fused representation (N, width)
    gates: ad.Tensor          # (N, 3) when scale gating is on, else None


def forward(params, x, cfg, noise_rng=None, seed_regions=None):
    """Run the cascade on a batch. params values are tensors (trainable
    leaves during training, plain constants during evaluation); x is the
    (N, 1, H, W) image batch, on a tape if gradients are wanted.

    seed_regions overrides the scale-1 window search with fixed windows;
    the gradient checks use this to pin the search's piecewise-constant
    output while parameters are perturbed.
    """
    x = ad.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"expected (N, 1, H, W) image batch, got {x.shape}")
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise DimensionError(f"config expects {cfg.image_size}x{cfg.image_size} "
                             f"images, batch is {x.shape[2]}x{x.shape[3]}")
    bcfg = cfg.backbone()
    m1 = backbone_forward(x, _sub(params, "s1.backbone."), bcfg)
    out1 = pan_forward(m1, _sub(params, "s1.pan."), l_min=cfg.l_min,
                       propose_region=False)
    scale_outputs = {"1": out1}
    inputs = {}
    seeds = None
    proposal = None
    if cfg.use_S2:
        seeds = list(seed_regions) if seed_regions is not None else \
            init_region_search(m1, l0=cfg.l0, l_min=cfg.l_min)
        x2 = crop_and_zoom(x, regions_to_tensors(seeds), cfg.image_size,
                           cfg.image_size, slope=cfg.slope)
        inputs["2"] = x2
        m2 = backbone_forward(x2, _sub(params, "s2.backbone."), bcfg)
        out2 = pan_forward(m2, _sub(params, "s2.pan."), l_min=cfg.l_min,
                           propose_region=cfg.use_S3)
        scale_outputs["2"] = out2
        if cfg.use_S3:
            proposal = out2.region
            if cfg.s3_noise:
                if noise_rng is None:
                    raise ContractError("s3_noise requires a noise rng")
                x3 = ad.Tensor(noise_rng.uniform(0.0, 1.0, x2.shape))
            else:
                x3 = crop_and_zoom(x2, proposal, cfg.image_size,
                                   cfg.image_size, slope=cfg.slope)
            inputs["3"] = x3
            m3 = backbone_forward(x3, _sub(params, "s3.backbone."), bcfg)
            out3 = pan_forward(m3, _sub(params, "s3.pan."), l_min=cfg.l_min,
                               propose_region=False)
            scale_outputs["3"] = out3
    if cfg.use_scale_attention:
        fused = scale_fusion([scale_outputs[s].feature_map
                              for s in ("1", "2", "3")], _sub(params, "sa."))
        f, gates = fused.f, fused.gates
    else:
        pooled = [ad.global_avg_pool(scale_outputs[s].feature_map)
                  for s in cfg.fused_scales()]
        f = pooled[0] if len(pooled) == 1 else ad.concat_channels(pooled)
        gates = None
    return Forward(scale_outputs=scale_outputs, seed_regions=seeds,
                   proposal=proposal, inputs=inputs, f=f, gates=gates)


def losses(params, fw, y_e, y_p, cfg, frozen_prev_probs=None):
    """Loss dictionary for one batch: the training total plus every part
    the metrics log. Ranking terms exist only for computed finer scales.

    frozen_prev_probs (dict scale -> array, gradient checking only) replaces
    the coarser scale's class probabilities in each ranking term with fixed
    values. The ranking reference is a stopped gradient, so finite
    differences must hold it constant to probe the same function the
    analytic gradient describes.
    """

    def _prev(scale):
        out = fw.scale_outputs[scale]
        if frozen_prev_probs is None or scale not in frozen_prev_probs:
            return out
        return dc_replace(out, expr_probs=ad.Tensor(frozen_prev_probs[scale]))

    att_terms = []
    att2 = att3 = None
    if cfg.use_attention_loss:
        if "2" in fw.scale_outputs:
            att2 = attention_loss(_prev("1"), fw.scale_outputs["2"],
                                  y_e, mar=cfg.mar)
            att_terms.append(att2)
        if "3" in fw.scale_outputs:
            att3 = attention_loss(_prev("2"), fw.scale_outputs["3"],
                                  y_e, mar=cfg.mar)
            att_terms.append(att3)
    parts = multi_loss_terms(fw.f, y_e, y_p, att_terms, _sub(params, "head."),
                             use_dynamic_weights=cfg.use_dynamic_weights,
                             use_constraint_factor=cfg.use_constraint_factor,
                             use_pose_task=cfg.use_pose_loss)
    return {"total": parts["total"], "data_total": parts["data_total"],
            "ce_e": parts["ce_e"], "ce_p": parts["ce_p"],
            "att2": att2, "att3": att3, "att_total": parts["att"],
            "weights": parts["weights"], "expr_logits": parts["expr_logits"],
            "pose_logits": parts["pose_logits"]}


def predict_classes(params, f):
    """(expression, pose) argmax labels from the fused representation."""
    return predict(f, _sub(params, "head."))


def compose_region(outer, inner):
    """Map a window expressed in the outer window's own coordinates back to
    the outer window's parent frame. Exact under the corner-aligned resample
    convention: local coordinate u lands at (outer.x - outer.l) + u * 2*outer.l.
    """
    side = 2.0 * outer.l
    return Region(x=outer.x - outer.l + inner.x * side,
                  y=outer.y - outer.l + inner.y * side,
                  l=inner.l * side)


def discovered_regions(fw):
    """Per-sample attended window in image coordinates: the scale-2 proposal
    composed through its seed window when present, else the seed window."""
    if fw.seed_regions is None:
        return None
    if fw.proposal is None:
        return list(fw.seed_regions)
    return [compose_region(seed, fw.proposal.at(i))
            for i, seed in enumerate(fw.seed_regions)]


# ---------------------------------------------------------------------------
# finite-difference check of the assembled loss


def gradcheck_config():
    """Tiny assembly for finite-difference verification: small enough that
    perturbing every single parameter element stays fast."""
    return TrainConfig(image_size=16, stem_channels=2, stem_pool=4,
                       growth_k=1, depth=1, bottleneck=2, pan_hidden=4,
                       n_expressions=3, n_poses=2, lambda_p_init=0.35,
                       batch_size=2, epochs=1).validate()


def assembled_loss_check(seed=0, instances=20, step=1e-3, tol=1e-3):
    """Check the gradient of the full training loss against central
    differences, perturbing every parameter of a tiny assembly on a
    2-sample synthetic batch.

    Two quantities are frozen at the base point so the differences probe the
    same function the analytic gradient describes. The scale-1 window search
    is data-dependent and piecewise constant: the analytic gradient treats
    the window as constant by construction, and a parameter nudge that flips
    the argmax would only measure that discontinuity. The ranking reference
    probabilities are stopped gradients: the loss is defined to not pull on
    the coarser scale through them, so the check holds them at their base
    values rather than re-deriving them at each perturbed point. Parameters
    are jittered away from their init so activation kinks (relu zeros, the
    weight clamp at 0.5) sit at generic positions.

    The jitter cannot guarantee every activation clears the finite-difference
    window, so an instance that fails at the nominal step is re-measured at a
    10x finer step: a discrepancy from straddling a kink shrinks with the
    step, while a genuine backward error is step-independent and still fails.
    A kink can also sit closer to the base point than any practical step, in
    which case the error stays flat as the step shrinks; such base points are
    measure zero in parameter space, so the instance is retried once from a
    freshly jittered base point. A wrong backward rule fails at every base
    point and every step, and still fails the suite.
    """
    cfg = gradcheck_config()
    scfg = SynthConfig(n_expressions=cfg.n_expressions, n_poses=cfg.n_poses,
                       image_size=cfg.image_size, samples_per_cell=1,
                       noise_sigma=0.05, seed=seed)
    worst = 0.0
    ok = True
    for inst in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x10AD, inst)))
        arrays0 = init_model(cfg, rng)
        arrays0 = {k: v + rng.uniform(-0.05, 0.05, v.shape)
                   for k, v in arrays0.items()}
        labels = [(int(rng.integers(cfg.n_expressions)),
                   int(rng.integers(cfg.n_poses))) for _ in range(2)]
        samples = [render_sample(scfg, e, p, np.random.default_rng(
            np.random.SeedSequence((seed, 0xDA7A, inst, i))))
            for i, (e, p) in enumerate(labels)]
        x = np.concatenate([s.image for s in samples])
        y_e = np.array([e for e, _ in labels])
        y_p = np.array([p for _, p in labels])

        def measure(arrays):
            base = forward(as_constants(arrays), ad.Tensor(x), cfg)
            frozen = base.seed_regions
            frozen_probs = {s: base.scale_outputs[s].expr_probs.data.copy()
                            for s in ("1", "2") if s in base.scale_outputs}
            names = sorted(arrays)

            def fn(*tensors):
                p = dict(zip(names, tensors))
                fw = forward(p, ad.Tensor(x), cfg, seed_regions=frozen)
                return losses(p, fw, y_e, y_p, cfg,
                              frozen_prev_probs=frozen_probs)["total"]

            r = grad_check(fn, [arrays[n] for n in names], step=step, tol=tol)
            if not r.passed:
                r = grad_check(fn, [arrays[n] for n in names],
                               step=step / 10.0, tol=tol)
            return r

        report = measure(arrays0)
        if not report.passed:
            rj = np.random.default_rng(
                np.random.SeedSequence((seed, 0x2E31, inst)))
            report = measure({k: v + rj.uniform(-0.02, 0.02, v.shape)
                              for k, v in arrays0.items()})
        worst = max(worst, report.max_error)
        ok = ok and report.passed
    return SuiteRow(name="assembled_loss", passed=ok, max_error=worst,
                    instances=instances)
