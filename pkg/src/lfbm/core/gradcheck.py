from collections import OrderedDict

import numpy as np

from .tensor import Tensor


def _scalar(v):
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def finite_diff_grad(f, params, h=1e-5, names=None):
    """Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate.

    ``f`` maps the (mutated in place) ParamGroup to a scalar. Parameter values
    are restored exactly afterwards. ``names`` restricts the check to a subset.
    """
    out = OrderedDict()
    for name, t in params.items():
        if names is not None and name not in names:
            continue
        flat = t.data.reshape(-1)
        g = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(params))
            flat[i] = orig - h
            fm = _scalar(f(params))
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        out[name] = g.reshape(t.shape)
    return out


def finite_diff_input(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` w.r.t. a plain array ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(x))
        flat[i] = orig - h
        fm = _scalar(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def relative_error(a, b, floor=1e-12):
    """||a - b|| / max(||a||, ||b||, floor) over the flattened arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
