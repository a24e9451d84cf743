"""Dynamically weighted two-task loss with a collapse-suppressing factor.

A tiny sigmoid head reads the batch-mean fused vector and emits raw weights
for the expression and pose tasks. The raw pair is normalized to sum to one,
then the pose weight is clamped to at most 0.5 so the expression task always
carries at least half the weight. An additional penalty exp(-12*lp*(1-lp)) is
strictly decreasing in lp on [0, 0.5]: adding it to the loss pushes lp back
toward 0.5 under gradient descent, preventing the pose weight from collapsing
to zero when one task starts dominating.

One weight pair per batch (computed from the batch mean), so each optimizer
step sees a single (lambda_e, lambda_p).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError
from .backbone import uniform_fan_in

FACTOR_CURVATURE = 12.0


@dataclass
class TaskWeights:
    """lambda_e + lambda_p == 1, lambda_e >= lambda_p >= 0. Fields are scalar
    tensors during training; floats() gives plain numbers for reporting."""

    lambda_e: ad.Tensor
    lambda_p: ad.Tensor
    factor: ad.Tensor

    def floats(self):
        return (float(self.lambda_e.data), float(self.lambda_p.data),
                float(self.factor.data))


def logit(q):
    if not 0.0 < q < 1.0:
        raise ValueError(f"logit needs q in (0, 1), got {q}")
    return math.log(q / (1.0 - q))


def init_dcml(features, expr_classes, pose_classes, rng, lambda_p_init=0.5):
    """Weight head starts at exactly lambda_p_init: zero weight matrix plus
    logit biases make the raw pair (1-q, q), which normalizes to itself."""
    return {
        "weight_head.weight": np.zeros((2, features)),
        "weight_head.bias": np.array([logit(1.0 - lambda_p_init),
                                      logit(lambda_p_init)]),
        "expr_head.weight": uniform_fan_in(rng, (expr_classes, features), features),
        "expr_head.bias": np.zeros(expr_classes),
        "pose_head.weight": uniform_fan_in(rng, (pose_classes, features), features),
        "pose_head.bias": np.zeros(pose_classes),
    }


def weights_from_raw(raw):
    """Normalize a raw sigmoid pair (e, p) to sum one, clamp the pose side
    at 0.5. The clamp's subgradient is 0 when active, so a clamped weight
    stops feeding gradient back into the head."""
    raw = ad.as_tensor(raw)
    if raw.shape != (2,):
        raise DimensionError(f"expected raw weight pair of shape (2,), got {raw.shape}")
    raw_e = ad.take_class(raw, 0)
    raw_p = ad.take_class(raw, 1)
    lam_p = ad.minimum(raw_p / (raw_e + raw_p), 0.5)
    lam_e = 1.0 - lam_p
    return TaskWeights(lambda_e=lam_e, lambda_p=lam_p,
                       factor=constraint_factor(lam_p))


def constraint_factor(lambda_p):
    """exp(-12 * lp * (1 - lp)); 1 at lp=0, e^-3 at lp=0.5, strictly
    decreasing in between. Accepts a float or a tensor."""
    if isinstance(lambda_p, ad.Tensor):
        return ad.exp(lambda_p * (lambda_p - 1.0) * FACTOR_CURVATURE)
    return math.exp(-FACTOR_CURVATURE * lambda_p * (1.0 - lambda_p))


def dynamic_weights(f, params):
    """Task weights for this batch, from the batch-mean fused vector."""
    f = ad.as_tensor(f)
    fm = f.mean(axis=0) if f.ndim == 2 else f
    raw = ad.sigmoid(ad.fully_connected(fm, params["weight_head.weight"],
                                        params["weight_head.bias"]))
    return weights_from_raw(raw)


def _mean_ce(logits, labels):
    ce = ad.softmax_cross_entropy(logits, labels)
    return ce if ce.ndim == 0 else ce.mean()


def multi_loss_terms(f, y_e, y_p, att_losses, params,
                     use_dynamic_weights=True, use_constraint_factor=True,
                     use_pose_task=True):
    """All pieces of the total loss, so callers can log them individually.

    With use_dynamic_weights off the weights are fixed at (0.5, 0.5); with
    use_pose_task off the expression loss enters unweighted and the pose and
    weighting machinery is skipped entirely.
    """
    f = ad.as_tensor(f)
    expr_logits = ad.fully_connected(f, params["expr_head.weight"],
                                     params["expr_head.bias"])
    ce_e = _mean_ce(expr_logits, y_e)
    att_total = None
    for a in att_losses:
        att_total = a if att_total is None else att_total + a

    if not use_pose_task:
        total = ce_e if att_total is None else ce_e + att_total
        return {"total": total, "data_total": total, "ce_e": ce_e, "ce_p": None,
                "att": att_total, "weights": None, "expr_logits": expr_logits,
                "pose_logits": None}

    pose_logits = ad.fully_connected(f, params["pose_head.weight"],
                                     params["pose_head.bias"])
    ce_p = _mean_ce(pose_logits, y_p)
    if use_dynamic_weights:
        weights = dynamic_weights(f, params)
    else:
        half = ad.Tensor(np.array(0.5))
        weights = TaskWeights(lambda_e=half, lambda_p=half,
                              factor=constraint_factor(half))
    total = weights.lambda_e * ce_e + weights.lambda_p * ce_p
    if att_total is not None:
        total = total + att_total
    # Weighted data losses alone; the factor is a parameter-only penalty and
    # is logged in its own metrics column rather than folded into loss_total.
    data_total = total
    if use_constraint_factor:
        total = total + weights.factor
    return {"total": total, "data_total": data_total, "ce_e": ce_e,
            "ce_p": ce_p, "att": att_total, "weights": weights,
            "expr_logits": expr_logits, "pose_logits": pose_logits}


def multi_loss(f, y_e, y_p, att_losses, params, use_constraint_factor=True):
    """Scalar training loss: lambda_e*CE_e + lambda_p*CE_p + attention terms
    + constraint factor."""
    return multi_loss_terms(f, y_e, y_p, att_losses, params,
                            use_constraint_factor=use_constraint_factor)["total"]


def predict(f, params):
    """Argmax class for each head; ties break toward the smaller index."""
    f = ad.as_tensor(f)
    expr = ad.fully_connected(f, params["expr_head.weight"],
                              params["expr_head.bias"])
    pose = ad.fully_connected(f, params["pose_head.weight"],
                              params["pose_head.bias"])
    axis = expr.ndim - 1
    return np.argmax(expr.data, axis=axis), np.argmax(pose.data, axis=axis)
