import numpy as np


def max_rel_err(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def fd_at_indices(f, x, indices, eps):
    """Central differences at selected flat indices only; returns the same
    flat indices' derivatives. Keeps whole-network oracle checks affordable."""
    x = np.array(x, copy=True)
    flat = x.reshape(-1)
    out = np.empty(len(indices), np.float64)
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * eps)
    return out


def spread_indices(size, count):
    return list(range(0, size, max(1, size // count)))[:count]
