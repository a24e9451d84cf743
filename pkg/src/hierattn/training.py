"""SGD training loop with per-epoch metrics."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model
from .errors import DatasetError, NumericError
from .synthdata import labels_of, region_iou, stack_images

METRIC_COLUMNS = ["epoch", "loss_total", "loss_e", "loss_p", "loss_att2",
                  "loss_att3", "lambda_e", "lambda_p", "factor",
                  "c1", "c2", "c3", "acc_e", "acc_p", "iou_s2"]


@dataclass
class TrainResult:
    params: dict     # name -> trained array
    metrics: list    # one dict per epoch, keys = METRIC_COLUMNS
    cfg: object


def learning_rate_at(epoch, cfg):
    """Step decay at the halfway and three-quarter milestones."""
    lr = cfg.learning_rate
    for frac in (0.5, 0.75):
        milestone = int(frac * cfg.epochs)
        if milestone >= 1 and epoch >= milestone:
            lr *= cfg.lr_decay
    return lr


def check_dataset(samples, cfg):
    if not samples:
        raise DatasetError("dataset is empty")
    s = cfg.image_size
    for sample in samples:
        if sample.image.shape != (1, 1, s, s):
            raise DatasetError(
                f"sample {sample.id}: image shape {sample.image.shape} does "
                f"not match configured size {s}x{s}")
        if not 0 <= sample.y_e < cfg.n_expressions:
            raise DatasetError(f"sample {sample.id}: expression label "
                               f"{sample.y_e} outside [0, {cfg.n_expressions})")
        if not 0 <= sample.y_p < cfg.n_poses:
            raise DatasetError(f"sample {sample.id}: pose label {sample.y_p} "
                               f"outside [0, {cfg.n_poses})")


class _EpochStats:
    """Sample-weighted running means for one epoch's metric row."""

    def __init__(self):
        self.sums = {}
        self.count = 0

    def add(self, bs, **values):
        self.count += bs
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v) * bs

    def row(self, epoch):
        out = {"epoch": epoch}
        for k in METRIC_COLUMNS[1:]:
            out[k] = self.sums.get(k, 0.0) / self.count
        return out


def _batch_stats(fw, parts, pt, y_e, y_p, gt_regions, cfg):
    weights = parts["weights"]
    if weights is None:
        lam_e, lam_p, factor = 1.0, 0.0, 1.0
    else:
        lam_e, lam_p, factor = weights.floats()
    if fw.gates is not None:
        c1, c2, c3 = fw.gates.data.mean(axis=0)
    else:
        fused = cfg.fused_scales()
        c1, c2, c3 = (1.0 if s in fused else 0.0 for s in ("1", "2", "3"))
    e_hat = np.argmax(parts["expr_logits"].data, axis=1)
    if parts["pose_logits"] is not None:
        p_hat = np.argmax(parts["pose_logits"].data, axis=1)
    else:
        p_hat = model.predict_classes(pt, fw.f)[1]
    discovered = model.discovered_regions(fw)
    if discovered is None:
        iou = 0.0
    else:
        iou = float(np.mean([region_iou(d, g)
                             for d, g in zip(discovered, gt_regions)]))
    return {
        "loss_total": parts["data_total"].item(),
        "loss_e": parts["ce_e"].item(),
        "loss_p": parts["ce_p"].item() if parts["ce_p"] is not None else 0.0,
        "loss_att2": parts["att2"].item() if parts["att2"] is not None else 0.0,
        "loss_att3": parts["att3"].item() if parts["att3"] is not None else 0.0,
        "lambda_e": lam_e, "lambda_p": lam_p, "factor": factor,
        "c1": c1, "c2": c2, "c3": c3,
        "acc_e": float(np.mean(e_hat == y_e)),
        "acc_p": float(np.mean(p_hat == y_p)),
        "iou_s2": iou,
    }


def train(train_samples, cfg, log=None):
    """Train from scratch on the given samples; deterministic for a fixed
    (seed, config, dataset). Returns the trained parameters and one metrics
    row per epoch, metrics taken as running means over the training batches.

    Every step sees exactly batch_size samples: the shuffled index stream
    cycles when the set is smaller than a full batch, so tiny sets repeat
    within the step. Each step minimizes the batch-summed loss (the
    per-sample mean scaled by batch_size); metric rows stay per-sample
    means, with the constraint factor in its own column.
    """
    cfg.validate()
    check_dataset(train_samples, cfg)
    images = stack_images(train_samples)
    y_e_all, y_p_all = labels_of(train_samples)
    gt = [s.gt_region for s in train_samples]
    n = len(train_samples)

    rng_init = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x1417)))
    pt = model.as_parameters(model.init_model(cfg, rng_init))
    rows = []
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(epoch, cfg)
        order = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 0x0EDE, epoch))).permutation(n)
        noise_rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 0x703E, epoch))) \
            if cfg.s3_noise else None
        stats = _EpochStats()
        steps = -(-n // cfg.batch_size)
        stream = np.resize(order, steps * cfg.batch_size)
        for step in range(steps):
            idx = stream[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            y_e, y_p = y_e_all[idx], y_p_all[idx]
            tape = ad.Tape()
            xt = tape.leaf(images[idx])
            fw = model.forward(pt, xt, cfg, noise_rng=noise_rng)
            parts = model.losses(pt, fw, y_e, y_p, cfg)
            if not np.isfinite(parts["total"].data):
                ids = [train_samples[i].id for i in idx[:6]]
                raise NumericError(
                    f"non-finite training loss at epoch {epoch} step {step}; "
                    f"batch sample ids {ids}")
            stats.add(len(idx), **_batch_stats(fw, parts, pt, y_e, y_p,
                                               [gt[i] for i in idx], cfg))
            objective = parts["total"]
            if epoch < cfg.att_warmup_epochs and parts["att_total"] is not None:
                objective = parts["att_total"]
            objective = objective * float(cfg.batch_size)
            tape.backward(objective)
            for t in pt.values():
                if t.grad is not None:
                    t.data -= lr * t.grad
                    t.grad = None
            # Free this step's graph before the next forward allocates;
            # otherwise two full episodes are alive at the peak.
            del tape, xt, fw, parts, objective
        rows.append(stats.row(epoch))
        if log is not None:
            log(rows[-1])
    return TrainResult(params={k: t.data for k, t in pt.items()},
                       metrics=rows, cfg=cfg)


def metrics_to_csv(rows):
    """Fixed-column CSV; floats via repr so identical runs produce identical
    bytes and values round-trip exactly."""
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        cells = []
        for c in METRIC_COLUMNS:
            cells.append(str(int(r[c])) if c == "epoch" else repr(float(r[c])))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def parse_metrics_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split(",") != METRIC_COLUMNS:
        raise DatasetError("metrics CSV header does not match the expected columns")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(METRIC_COLUMNS):
            raise DatasetError(f"metrics CSV row has {len(cells)} cells, "
                               f"expected {len(METRIC_COLUMNS)}")
        row = {c: (int(v) if c == "epoch" else float(v))
               for c, v in zip(METRIC_COLUMNS, cells)}
        rows.append(row)
    return rows
