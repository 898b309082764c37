"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericalError
from .tensor import Tape, Tensor


def tape_gradients(f, params):
    """Evaluate ``f`` on a fresh tape and return ``(loss value, grads)``."""
    tape = Tape()
    bound = {k: tape.leaf(v, k) for k, v in params.items()}
    loss = f(bound)
    return float(loss.value), tape.backward(loss)


def _evaluate(f, params, name, index):
    val = float(f({k: Tensor(v) for k, v in params.items()}).value)
    if not np.isfinite(val):
        raise NumericalError(f"non-finite f while perturbing {name}{list(index)}", (name, index))
    return val


def grad_check(f, params, eps=1e-5, details=False):
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of tensors (same keys as ``params``) to a scalar tensor.
    Per element the error is ``|a - n| / max(|a|, |n|, 1e-8)``.  With
    ``details=True`` the worst ``(name, index, analytic, numeric)`` is returned
    alongside the error.
    """
    if not eps > 0:
        raise ContractError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise ContractError(f"parameter {k} has non-finite entries")
    _, grads = tape_gradients(f, params)
    worst, where = 0.0, None
    for name, arr in params.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            idx = np.unravel_index(i, arr.shape)
            orig = flat[i]
            flat[i] = orig + eps
            fp = _evaluate(f, params, name, idx)
            flat[i] = orig - eps
            fm = _evaluate(f, params, name, idx)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            analytic = float(grads[name][idx])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if err > worst or where is None:
                worst, where = max(err, worst), (name, idx, analytic, numeric)
    return (worst, where) if details else worst
