"""Walk through the task-weight head: raw sigmoid pair, normalization, the
pose-side clamp, and the constraint factor that resists weight collapse."""

import math

import numpy as np

import _path  # noqa: F401
from hierattn import autodiff as ad
from hierattn.multitask import constraint_factor, weights_from_raw


def show(raw):
    w = weights_from_raw(np.array(raw))
    le, lp, fac = w.floats()
    print(f"raw {raw}: lambda_e={le:.4f} lambda_p={lp:.4f} "
          f"sum={le + lp:.4f} factor={fac:.6f}")


def main():
    show([0.6, 0.6])   # symmetric -> (0.5, 0.5)
    show([0.9, 0.3])   # plain normalization
    show([0.2, 0.8])   # pose side would exceed 0.5 -> clamped

    print()
    for lp in (0.0, 0.1, 0.25, 0.4, 0.5):
        print(f"factor({lp:.2f}) = {constraint_factor(lp):.6f}")
    print(f"factor(0.5) == e^-3: {math.isclose(constraint_factor(0.5), math.exp(-3), rel_tol=0, abs_tol=1e-12)}")

    # The factor decreases in lambda_p, so minimizing it pushes lambda_p up:
    # a run that starts lopsided is pulled back toward the 0.5 ceiling.
    lp = ad.param(np.array([0.05]))
    tape = ad.Tape()
    anchor = tape.leaf(np.zeros(1))
    fac = constraint_factor(lp + anchor)
    tape.backward(fac.sum())
    print(f"d factor / d lambda_p at 0.05 = {lp.grad[0]:+.4f} "
          f"(negative: descent raises lambda_p)")


if __name__ == "__main__":
    main()
