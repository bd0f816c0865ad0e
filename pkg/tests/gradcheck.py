"""Central finite-difference gradient checking shared by the test modules."""

import numpy as np


def rel_error(analytic, numeric, floor=1e-10):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f, arr, idx, h=1e-4):
    """d f / d arr at flat indices ``idx``; ``arr`` is perturbed in place and restored."""
    flat = arr.reshape(-1)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def check_grads(f, tensors: dict, grads: dict, rng, n_samples=25, h=1e-4) -> dict:
    """Relative error per tensor between ``grads`` and finite differences of scalar ``f``."""
    errors = {}
    for name, arr in tensors.items():
        size = arr.size
        idx = rng.choice(size, size=min(n_samples, size), replace=False)
        num = numeric_grad(f, arr, idx, h)
        errors[name] = rel_error(np.ravel(grads[name])[idx], num)
    return errors


def projected(fwd, R):
    """Scalar objective sum(fwd() * R) for a fixed random projection R."""
    return lambda: float(np.sum(fwd() * R))
