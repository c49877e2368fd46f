"""Central finite-difference gradient checks for diffcore ops."""
import numpy as np

from dpcreg import diffcore as dc


def _project(out, weights):
    if out.data.size == 1:
        return dc.reshape(out, ())
    return dc.sum(dc.mul(out, weights))


def numeric_grad(fn, arrays, index, eps=1e-5, weights=None):
    """Central differences of ``sum(weights * fn(*arrays))`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    with dc.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _value(fn, base, weights)
            flat[i] = orig - eps
            fm = _value(fn, base, weights)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def _value(fn, arrays, weights):
    out = fn(*[dc.Tensor(a) for a in arrays])
    return float(np.sum(out.data * weights)) if weights is not None else float(out.data)


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(fn, arrays, eps=1e-5, seed=0, wrt=None):
    """Max relative error between backward() and finite differences.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are contracted with a
    fixed random weight array so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    leaves = [dc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    weights = None
    if out.data.size != 1:
        weights = np.random.default_rng(seed).normal(size=out.shape)
    dc.backward(_project(out, weights))
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        numeric = numeric_grad(fn, arrays, i, eps, weights)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
