"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np


def numeric_grad(fn, arrays, eps=1e-5):
    """Central finite differences of a scalar function of several arrays.

    ``fn`` maps a list of float64 arrays to a python float. Returns one
    gradient array per input. Arrays are perturbed element by element,
    so keep them small.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(arrays)
            flat[i] = orig - eps
            lo = fn(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom))
