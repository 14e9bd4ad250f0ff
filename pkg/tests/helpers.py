import numpy as np


def numeric_grad(fn, arr, eps=1e-6):
    """Central differences of scalar ``fn()`` with respect to ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = fn()
        arr[idx] = old - eps
        down = fn()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# (number, title, passed, detail) rows filled by the acceptance suite.
ACCEPTANCE = []
