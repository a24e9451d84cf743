"""Evaluation, ablation sweeps, and artifact exports."""

import dataclasses
import json
import os

import numpy as np

from . import autodiff as ad
from . import model
from .attention import boxcar_mask
from .pgm import save_pgm
from .synthdata import labels_of, region_iou, stack_images
from .training import check_dataset, train


def confusion_matrix(y_true, y_pred, k):
    """k x k counts, rows = true class, columns = predicted class."""
    m = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
        m[int(t), int(p)] += 1
    return m


@dataclasses.dataclass
class EvalReport:
    acc_e: float
    acc_p: float
    confusion_e: np.ndarray
    confusion_p: np.ndarray
    per_pose_acc: np.ndarray   # expression accuracy within each pose bin
    pose_counts: np.ndarray
    ious: np.ndarray           # per-sample attended-window IoU vs gt_region

    @property
    def mean_iou(self):
        return float(self.ious.mean()) if self.ious.size else 0.0

    def iou_fraction(self, threshold):
        """Fraction of samples whose attended window reaches the threshold."""
        if not self.ious.size:
            return 0.0
        return float(np.mean(self.ious >= threshold))


def _eval_chunks(arrays, cfg, samples, batch_size, noise_seed=0):
    """Forward the samples in chunks without recording gradients; yields
    (index array, Forward, predicted expressions, predicted poses).

    batch_size None processes everything in one chunk. Feature normalization
    uses the statistics of the processed chunk, so predictions depend on the
    chunk composition; the whole-set default keeps the statistics stable,
    while small ordered chunks (often single-class) would skew them."""
    pt = model.as_constants(arrays)
    images = stack_images(samples)
    if batch_size is None:
        batch_size = len(samples)
    noise_rng = np.random.default_rng(
        np.random.SeedSequence((noise_seed, 0x703E))) if cfg.s3_noise else None
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        fw = model.forward(pt, ad.Tensor(images[idx]), cfg, noise_rng=noise_rng)
        e_hat, p_hat = model.predict_classes(pt, fw.f)
        yield idx, fw, e_hat, p_hat


def evaluate(arrays, cfg, samples, batch_size=None):
    """Accuracies, both confusion matrices, expression accuracy per pose
    bin, and per-sample IoU of the attended window against gt_region.

    By default the whole set is evaluated as a single batch; see
    _eval_chunks for why the chunking matters."""
    cfg.validate()
    check_dataset(samples, cfg)
    y_e, y_p = labels_of(samples)
    e_pred = np.zeros(len(samples), dtype=np.int64)
    p_pred = np.zeros(len(samples), dtype=np.int64)
    ious = np.zeros(len(samples))
    for idx, fw, e_hat, p_hat in _eval_chunks(arrays, cfg, samples,
                                              batch_size, noise_seed=cfg.seed):
        e_pred[idx] = e_hat
        p_pred[idx] = p_hat
        discovered = model.discovered_regions(fw)
        if discovered is not None:
            for j, i in enumerate(idx):
                ious[i] = region_iou(discovered[j], samples[i].gt_region)
    per_pose = np.zeros(cfg.n_poses)
    counts = np.zeros(cfg.n_poses, dtype=np.int64)
    for p in range(cfg.n_poses):
        mask = y_p == p
        counts[p] = int(mask.sum())
        per_pose[p] = float(np.mean(e_pred[mask] == y_e[mask])) if counts[p] else 0.0
    return EvalReport(
        acc_e=float(np.mean(e_pred == y_e)),
        acc_p=float(np.mean(p_pred == y_p)),
        confusion_e=confusion_matrix(y_e, e_pred, cfg.n_expressions),
        confusion_p=confusion_matrix(y_p, p_pred, cfg.n_poses),
        per_pose_acc=per_pose, pose_counts=counts, ious=ious)


# ---------------------------------------------------------------------------
# ablation sweep

# Which scale features feed the classifier, from single scales to the full
# gated combination. Scale 3 always needs scale 2 computed (its input is
# cropped from scale 2's zoomed view), even when only scale-3 features are
# classified.
ATTENTION_ROWS = [
    ("scale1_only", dict(use_S2=False, use_S3=False, use_scale_attention=False,
                         fuse_scales="1")),
    ("scale2_only", dict(use_S3=False, use_scale_attention=False,
                         fuse_scales="2")),
    ("scale3_only", dict(use_scale_attention=False, fuse_scales="3")),
    ("scales_12", dict(use_S3=False, use_scale_attention=False,
                       fuse_scales="12")),
    ("scales_13", dict(use_scale_attention=False, fuse_scales="13")),
    ("scales_23", dict(use_scale_attention=False, fuse_scales="23")),
    ("scales_123", dict(use_scale_attention=False, fuse_scales="123")),
    ("scales_123_gated", dict(use_scale_attention=True, fuse_scales="123")),
]

# Loss-term sweep on the full architecture: expression-only up to the
# dynamically weighted total with the balance factor.
LOSS_ROWS = [
    ("expr_only", dict(use_pose_loss=False, use_attention_loss=False,
                       use_dynamic_weights=False, use_constraint_factor=False)),
    ("expr_plus_attention", dict(use_pose_loss=False, use_attention_loss=True,
                                 use_dynamic_weights=False,
                                 use_constraint_factor=False)),
    ("expr_plus_pose", dict(use_pose_loss=True, use_attention_loss=False,
                            use_dynamic_weights=False,
                            use_constraint_factor=False)),
    ("all_terms_fixed", dict(use_pose_loss=True, use_attention_loss=True,
                             use_dynamic_weights=False,
                             use_constraint_factor=False)),
    ("all_terms_dynamic", dict(use_pose_loss=True, use_attention_loss=True,
                               use_dynamic_weights=True,
                               use_constraint_factor=True)),
]


def ablation_rows():
    return [("attention", name, dict(flags)) for name, flags in ATTENTION_ROWS] \
        + [("loss", name, dict(flags)) for name, flags in LOSS_ROWS]


def ablate(train_samples, test_samples, base_cfg, log=None):
    """Train and evaluate every ablation configuration with the base seed.

    Returns rows of (group, name, flags, acc_e, acc_p, mean_iou).
    """
    base_cfg.validate()
    results = []
    for group, name, flags in ablation_rows():
        cfg = dataclasses.replace(base_cfg, **flags).validate()
        trained = train(train_samples, cfg)
        report = evaluate(trained.params, cfg, test_samples)
        results.append({"group": group, "name": name, "flags": flags,
                        "acc_e": report.acc_e, "acc_p": report.acc_p,
                        "mean_iou": report.mean_iou})
        if log is not None:
            log(results[-1])
    return results


def ablation_to_csv(results, base_cfg):
    lines = [f"# ablation sweep; every row trains with seed {base_cfg.seed} "
             f"on the same data"]
    lines.append("# flag mapping per row (unlisted flags keep the base config):")
    for row in results:
        flags = " ".join(f"{k}={v}" for k, v in sorted(row["flags"].items()))
        lines.append(f"#   {row['group']},{row['name']}: {flags}")
    lines.append("group,name,acc_e,acc_p,mean_iou")
    for row in results:
        lines.append(f"{row['group']},{row['name']},{row['acc_e']!r},"
                     f"{row['acc_p']!r},{row['mean_iou']!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# artifact dumps


def _region_list(region):
    return [float(region.x), float(region.y), float(region.l)]


def dump_attention(arrays, cfg, samples, n, out_dir):
    """Write mask and crop images plus a region sidecar for the first n
    samples: the seed window mask on the image, the proposal mask on the
    scale-2 view, the composed proposal mask back on the image, and the
    zoomed inputs of scales 2 and 3."""
    cfg.validate()
    if n > len(samples):
        raise ValueError(f"asked for {n} dumps but dataset has {len(samples)}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for idx, fw, e_hat, p_hat in _eval_chunks(arrays, cfg, samples[:n],
                                              batch_size=None,
                                              noise_seed=cfg.seed):
        for j, i in enumerate(int(k) for k in idx):
            sample = samples[i]
            stem = os.path.join(out_dir, f"{i:03d}")
            record = {"id": sample.id, "expression": sample.y_e,
                      "pose": sample.y_p,
                      "pred_expression": int(e_hat[j]),
                      "pred_pose": int(p_hat[j]),
                      "gt_region": _region_list(sample.gt_region)}
            size = cfg.image_size
            if fw.seed_regions is not None:
                seed = fw.seed_regions[j]
                record["seed_region"] = _region_list(seed)
                mask = boxcar_mask(seed, size, size, slope=cfg.slope)
                save_pgm(stem + "_mask_scale1.pgm", mask.data[0, 0])
                written.append(stem + "_mask_scale1.pgm")
                save_pgm(stem + "_input_scale2.pgm", fw.inputs["2"].data[j, 0])
                written.append(stem + "_input_scale2.pgm")
            if fw.proposal is not None:
                local = fw.proposal.at(j)
                record["proposal_region"] = _region_list(local)
                mask2 = boxcar_mask(local, size, size, slope=cfg.slope)
                save_pgm(stem + "_mask_scale2.pgm", mask2.data[0, 0])
                written.append(stem + "_mask_scale2.pgm")
                composed = model.compose_region(fw.seed_regions[j], local)
                record["composed_region"] = _region_list(composed)
                mask3 = boxcar_mask(composed, size, size, slope=cfg.slope)
                save_pgm(stem + "_mask_composed.pgm", mask3.data[0, 0])
                written.append(stem + "_mask_composed.pgm")
                save_pgm(stem + "_input_scale3.pgm",
                         np.clip(fw.inputs["3"].data[j, 0], 0.0, 1.0))
                written.append(stem + "_input_scale3.pgm")
            with open(stem + "_regions.json", "w") as fh:
                json.dump(record, fh, indent=2)
                fh.write("\n")
            written.append(stem + "_regions.json")
    return written


def export_embeddings(arrays, cfg, samples, out_path, batch_size=None):
    """One CSV row per sample: id, labels, and the fused representation.

    Defaults to a single whole-set pass so the feature normalization sees
    stable statistics (see _eval_chunks)."""
    cfg.validate()
    check_dataset(samples, cfg)
    width = None
    lines = []
    for idx, fw, _, _ in _eval_chunks(arrays, cfg, samples, batch_size,
                                      noise_seed=cfg.seed):
        f = fw.f.data
        if width is None:
            width = f.shape[1]
            lines.append("id,y_e,y_p," + ",".join(f"f{j}" for j in range(width)))
        for j, i in enumerate(idx):
            s = samples[i]
            vec = ",".join(repr(float(v)) for v in f[j])
            lines.append(f"{s.id},{s.y_e},{s.y_p},{vec}")
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        with open(out_path, "w") as fh:
            fh.write(text)
    return text
