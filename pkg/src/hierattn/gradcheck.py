"""Finite-difference verification of every differentiable primitive.

grad_check compares tape gradients of a scalar-valued function against
central differences on every element of every input. The per-input error is

    max_i |analytic_i - numeric_i| / max(1, ||analytic||_inf, ||numeric||_inf)

so well-scaled functions are judged on absolute deviation and large-gradient
functions on relative deviation.

PRIMITIVE_CASES maps each registered primitive to a builder that returns a
(fn, inputs) pair on random data; check_all_primitives runs them all and
fails if any primitive lacks a case, which keeps coverage honest as ops are
added.
"""

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError


@dataclass
class GradCheckReport:
    passed: bool
    max_error: float
    per_input: list
    step: float
    tol: float


@dataclass
class SuiteRow:
    name: str
    passed: bool
    max_error: float
    instances: int


@dataclass
class SuiteReport:
    rows: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.rows)


def grad_check(fn, inputs, step=1e-3, tol=1e-4):
    """Check d(fn)/d(inputs) against central finite differences.

    fn takes len(inputs) tensors and returns a scalar tensor. inputs are
    arrays or tensors; every element of every input is perturbed by +-step.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
              for x in inputs]

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(*leaves)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar output, got {out.data.shape}")
    tape.backward(out)
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(a)
                for lf, a in zip(leaves, arrays)]

    def value_at(mats):
        res = fn(*[Tensor(m) for m in mats])
        return float(res.data.reshape(()))

    per_input = []
    for k, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        flat = numeric.reshape(-1)
        work = [m.copy() for m in arrays]
        wflat = work[k].reshape(-1)
        for i in range(wflat.size):
            orig = wflat[i]
            wflat[i] = orig + step
            hi = value_at(work)
            wflat[i] = orig - step
            lo = value_at(work)
            wflat[i] = orig
            flat[i] = (hi - lo) / (2.0 * step)
        denom = max(1.0, float(np.abs(analytic[k]).max(initial=0.0)),
                    float(np.abs(numeric).max(initial=0.0)))
        err = float(np.abs(analytic[k] - numeric).max(initial=0.0)) / denom
        per_input.append(err)

    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(passed=worst < tol, max_error=worst,
                           per_input=per_input, step=step, tol=tol)


# ---------------------------------------------------------------------------
# one finite-difference case per primitive

def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _away_from(rng, shape, gap=0.05):
    # values bounded away from 0 so kinked ops stay inside a smooth branch
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < gap, gap * np.sign(x) + (x == 0) * gap, x)
    return x


def _smooth_image(rng, n, c, h, w):
    # low-frequency mixture; keeps bilinear sampling away from its
    # piecewise-linear kinks during finite differencing
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.zeros((n, c, h, w))
    for i in range(n):
        for j in range(c):
            a, b, ph1, ph2 = rng.uniform(-1, 1, 4)
            img[i, j] = a * np.cos(2 * np.pi * (xx + ph1)) + \
                b * np.sin(2 * np.pi * (yy + ph2))
    return img


def _case_add(rng):
    return (lambda a, b: (a + b).sum(), [_rand(rng, 3, 4), _rand(rng, 3, 4)])


def _case_sub(rng):
    return (lambda a, b: (a - b).sum(), [_rand(rng, 3, 4), _rand(rng, 1, 4)])


def _case_mul(rng):
    return (lambda a, b: (a * b).sum(), [_rand(rng, 2, 5), _rand(rng, 2, 1)])


def _case_div(rng):
    num = _rand(rng, 3, 3)
    den = _away_from(rng, (3, 3), gap=0.5)
    return (lambda a, b: (a / b).sum(), [num, den])


def _case_neg(rng):
    return (lambda a: (-a).sum(), [_rand(rng, 4)])


def _case_exp(rng):
    return (lambda a: ad.exp(a).sum(), [rng.uniform(-2, 2, (3, 3))])


def _case_sqrt(rng):
    # positive domain, kept clear of 0 where the derivative blows up
    return (lambda a: ad.sqrt(a).sum(), [rng.uniform(0.5, 4.0, (3, 3))])


def _case_relu(rng):
    return (lambda a: ad.relu(a).sum(), [_away_from(rng, (4, 4))])


def _case_sigmoid(rng):
    return (lambda a: ad.sigmoid(a).sum(), [_rand(rng, 4, 4)])


def _case_tanh(rng):
    return (lambda a: ad.tanh(a).sum(), [_rand(rng, 4, 4)])


def _case_minimum(rng):
    x = _rand(rng, 5)
    x = np.where(np.abs(x - 0.5) < 0.05, x + 0.1, x)
    return (lambda a: ad.minimum(a, 0.5).sum(), [x])


def _case_tsum(rng):
    return (lambda a: ad.tsum(a, axis=1).sum(), [_rand(rng, 3, 4)])


def _case_tmean(rng):
    return (lambda a: ad.tmean(a, axis=0).sum(), [_rand(rng, 4, 3)])


def _case_reshape(rng):
    return (lambda a: (ad.reshape(a, (2, 6)) * np.arange(12.).reshape(2, 6)).sum(),
            [_rand(rng, 3, 4)])


def _case_transpose(rng):
    w = _rand(rng, 4, 3)
    return (lambda a: (ad.transpose(a) * w).sum(), [_rand(rng, 3, 4)])


def _case_matmul(rng):
    return (lambda a, b: ad.matmul(a, b).sum(), [_rand(rng, 3, 4), _rand(rng, 4, 2)])


def _case_concat_channels(rng):
    w = _rand(rng, 2, 5)
    return (lambda a, b: (ad.concat_channels([a, b]) * w).sum(),
            [_rand(rng, 2, 2), _rand(rng, 2, 3)])


def _case_slice_channels(rng):
    return (lambda a: ad.slice_channels(a, 1, 3).sum(), [_rand(rng, 2, 4)])


def _case_fully_connected(rng):
    return (lambda x, w, b: ad.fully_connected(x, w, b).sum(),
            [_rand(rng, 3, 4), _rand(rng, 2, 4), _rand(rng, 2)])


def _case_conv2d(rng):
    return (lambda x, k: ad.conv2d(x, k, stride=1, pad=1).sum(),
            [_rand(rng, 2, 2, 5, 5), _rand(rng, 3, 2, 3, 3)])


def _case_conv2d_strided(rng):
    return (lambda x, k: ad.conv2d(x, k, stride=2, pad=0).sum(),
            [_rand(rng, 1, 2, 6, 6), _rand(rng, 2, 2, 3, 3)])


def _case_avg_pool(rng):
    w = _rand(rng, 1, 2, 2, 2)
    return (lambda x: (ad.avg_pool(x, 2) * w).sum(), [_rand(rng, 1, 2, 4, 4)])


def _case_global_avg_pool(rng):
    w = _rand(rng, 2, 3)
    return (lambda x: (ad.global_avg_pool(x) * w).sum(), [_rand(rng, 2, 3, 4, 4)])


def _case_bilinear_resize(rng):
    w = _rand(rng, 1, 2, 7, 5)
    return (lambda x: (ad.bilinear_resize(x, 7, 5) * w).sum(),
            [_rand(rng, 1, 2, 4, 4)])


def _case_window_resample(rng):
    # Bilinear sampling is piecewise-linear in the window coordinates, so a
    # finite-difference probe must not cross an integer pixel position
    # (the sampler's analogue of the relu-kink exclusion). With rl ~ 0.25 on
    # a 9x9 source and a 5x5 output, sample positions share one fractional
    # part, which the draws below keep well inside (0.2, 0.8).
    img = _smooth_image(rng, 2, 1, 9, 9)
    rl = 0.25 + rng.uniform(-0.005, 0.005, 2)
    rx = rl + (rng.integers(1, 3, 2) + rng.uniform(0.3, 0.7, 2)) / 8.0
    ry = rl + (rng.integers(1, 3, 2) + rng.uniform(0.3, 0.7, 2)) / 8.0
    w = _rand(rng, 2, 1, 5, 5)
    return (lambda x, a, b, c: (ad.window_resample(x, a, b, c, 5, 5) * w).sum(),
            [img, rx, ry, rl])


def _case_softmax(rng):
    w = _rand(rng, 2, 5)
    return (lambda a: (ad.softmax(a) * w).sum(), [_rand(rng, 2, 5)])


def _case_take_class(rng):
    labels = rng.integers(0, 4, 3)
    return (lambda a: ad.take_class(a, labels).sum(), [_rand(rng, 3, 4)])


def _case_softmax_cross_entropy(rng):
    labels = rng.integers(0, 6, 4)
    return (lambda a: ad.softmax_cross_entropy(a, labels).sum(), [_rand(rng, 4, 6)])


PRIMITIVE_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "neg": _case_neg,
    "exp": _case_exp,
    "sqrt": _case_sqrt,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "tanh": _case_tanh,
    "minimum": _case_minimum,
    "tsum": _case_tsum,
    "tmean": _case_tmean,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "matmul": _case_matmul,
    "concat_channels": _case_concat_channels,
    "slice_channels": _case_slice_channels,
    "fully_connected": _case_fully_connected,
    "conv2d": _case_conv2d,
    "conv2d_strided": _case_conv2d_strided,
    "avg_pool": _case_avg_pool,
    "global_avg_pool": _case_global_avg_pool,
    "bilinear_resize": _case_bilinear_resize,
    "window_resample": _case_window_resample,
    "softmax": _case_softmax,
    "take_class": _case_take_class,
    "softmax_cross_entropy": _case_softmax_cross_entropy,
}


def _broken_square(t):
    """Deliberately wrong backward rule (forward x^2, backward 3x).

    Negative control: grad_check must flag it. Never use outside tests.
    """
    tape = ad._tape_of(t)
    out = Tensor(t.data ** 2, tape=tape)
    if tape is not None:
        def backward():
            if out.grad is not None and ad._tracked(t):
                ad._acc(t, out.grad * 3.0 * t.data)
        tape._record(backward)
    return out


def _case_broken_backward(rng):
    return (lambda a: _broken_square(a).sum(), [_away_from(rng, (3,))])


def check_all_primitives(seed=0, instances=20, step=1e-3, tol=1e-4,
                         inject_broken=False):
    """Run grad_check on every registered primitive, `instances` times each.

    Any primitive without a registered case yields a failing row, so the
    report doubles as a coverage check. inject_broken adds the deliberately
    wrong-backward case, which is expected to fail.
    """
    report = SuiteReport()
    names = list(dict.fromkeys(ad.PRIMITIVE_OPS))
    case_names = list(PRIMITIVE_CASES)
    for name in names:
        if name not in PRIMITIVE_CASES and not any(
                c == name or c.startswith(name + "_") for c in case_names):
            report.rows.append(SuiteRow(name=name, passed=False,
                                        max_error=float("inf"), instances=0))
    for name, builder in PRIMITIVE_CASES.items():
        worst = 0.0
        ok = True
        for i in range(instances):
            rng = np.random.default_rng(
                seed * 100003 + zlib.crc32(name.encode()) % 65521 + i)
            fn, inputs = builder(rng)
            r = grad_check(fn, inputs, step=step, tol=tol)
            worst = max(worst, r.max_error)
            ok = ok and r.passed
        report.rows.append(SuiteRow(name=name, passed=ok, max_error=worst,
                                    instances=instances))
    if inject_broken:
        rng = np.random.default_rng(seed)
        fn, inputs = _case_broken_backward(rng)
        r = grad_check(fn, inputs, step=step, tol=tol)
        report.rows.append(SuiteRow(name="broken_square", passed=r.passed,
                                    max_error=r.max_error, instances=1))
    return report
