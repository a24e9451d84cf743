"""Record a small computation on a tape, run it backward, and confirm the
gradients against central finite differences."""

import numpy as np

import _path  # noqa: F401
from hierattn import autodiff as ad
from hierattn.errors import TapeError
from hierattn.gradcheck import grad_check


def loss_fn(w, b, x):
    h = ad.tanh(ad.fully_connected(x, w, b))
    return (h * h).mean()


def main():
    rng = np.random.default_rng(0)
    w = ad.param(rng.normal(size=(3, 4)))
    b = ad.param(rng.normal(size=3))

    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=4))
    loss = loss_fn(w, b, x)
    tape.backward(loss)

    print(f"loss = {loss.item():.6f}")
    print(f"dloss/dw row 0 = {np.round(w.grad[0], 6)}")
    print(f"dloss/db       = {np.round(b.grad, 6)}")

    # Central differences on the same function, one bias element at a time.
    step = 1e-5
    fd = np.empty_like(b.data)
    for i in range(b.data.size):
        vals = []
        for sign in (+1.0, -1.0):
            shifted = b.data.copy()
            shifted[i] += sign * step
            t = ad.Tape()
            vals.append(loss_fn(ad.param(w.data), ad.param(shifted),
                                t.leaf(x.data)).item())
        fd[i] = (vals[0] - vals[1]) / (2 * step)
    print(f"finite diff db = {np.round(fd, 6)}")
    print(f"max abs gap    = {np.abs(fd - b.grad).max():.2e}")

    # The bundled checker does the same comparison for every input at once.
    report = grad_check(loss_fn, [w.data, b.data, x.data], step=1e-3, tol=1e-4)
    print(f"grad_check: passed={report.passed} "
          f"max_rel_err={report.max_error:.2e}")

    # A tape replays exactly once; a second backward is a usage bug.
    try:
        tape.backward(loss)
    except TapeError as exc:
        print(f"second backward refused: {exc}")


if __name__ == "__main__":
    main()
