"""Central finite-difference gradient oracle.

Intentionally independent of the reverse-mode tape: it only calls the
forward function, perturbing one parameter entry at a time.
"""

import numpy as np

from selafd import tensor as T

EPS = 1e-5


def numeric_grad(fn, leaf: T.Tensor, eps: float = EPS) -> np.ndarray:
    """d fn() / d leaf via central differences, entry by entry."""
    g = np.zeros_like(leaf.data)
    flat = leaf.data.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data)
        flat[i] = orig - eps
        lo = float(fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-6) -> float:
    """Worst-case relative error.

    `floor` guards near-zero entries: at eps=1e-5 on an O(1) loss the
    central-difference quotient itself carries ~1e-11 of absolute roundoff,
    so entries far below `floor` cannot be compared relatively.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(fn, leaves, eps: float = EPS, tol: float = 1e-6) -> float:
    """Run fn once with backward, compare every leaf's grad to the oracle.

    Returns the worst relative error across all leaves; asserts <= tol.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss = fn()
    T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf did not receive a gradient"
        err = max_rel_error(leaf.grad, numeric_grad(fn, leaf, eps))
        worst = max(worst, err)
    assert worst < tol, f"gradient mismatch: rel error {worst:.3e} >= {tol}"
    return worst
