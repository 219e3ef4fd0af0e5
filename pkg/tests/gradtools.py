"""Finite-difference gradient checking used across the test suite.

Central differences with step 1e-5 in double precision; agreement demanded at
relative error <= 1e-4 with an absolute floor of 1e-7 near zero.
"""

from __future__ import annotations

import numpy as np

from dualkd.autodiff import Tensor

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-7


def grad_close(analytic: np.ndarray, numeric: np.ndarray,
               rtol: float = FD_RTOL, atol: float = FD_ATOL) -> bool:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    return bool(np.all(err <= bound))


def numeric_grad(fn, arrays: list[np.ndarray], which: int,
                 step: float = FD_STEP, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar fn(*arrays) w.r.t. arrays[which].

    fn must be deterministic (reseed any rng it uses internally on every call).
    coords: optional flat indices to probe; the rest stay zero.
    """
    work = [a.copy() for a in arrays]
    target = work[which]
    flat = target.reshape(-1)
    out = np.zeros_like(flat)
    idxs = range(flat.size) if coords is None else coords
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(*work))
        flat[i] = orig - step
        fm = float(fn(*work))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(target.shape)


def check_grads(build, arrays: list[np.ndarray], step: float = FD_STEP,
                rtol: float = FD_RTOL, atol: float = FD_ATOL,
                coords=None) -> int:
    """Backward vs finite differences for `build`.

    build(*tensors) -> scalar Tensor, where tensors require grad.
    Returns the number of coordinates checked (for case accounting).
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    root = build(*tensors)
    root.backward()

    def scalar_fn(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    checked = 0
    for k, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[k])
        per_coords = None if coords is None else coords[k]
        numeric = numeric_grad(scalar_fn, arrays, k, step=step, coords=per_coords)
        if per_coords is not None:
            sel = np.asarray(per_coords)
            a_sel = analytic.reshape(-1)[sel]
            n_sel = numeric.reshape(-1)[sel]
            assert grad_close(a_sel, n_sel, rtol, atol), (
                f"gradient mismatch on input {k} at sampled coords:\n"
                f"analytic={a_sel}\nnumeric={n_sel}")
            checked += sel.size
        else:
            assert grad_close(analytic, numeric, rtol, atol), (
                f"gradient mismatch on input {k}:\nanalytic={analytic}\nnumeric={numeric}")
            checked += analytic.size
    return checked
