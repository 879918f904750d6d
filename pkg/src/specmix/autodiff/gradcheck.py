"""Central finite-difference oracle for checking reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from specmix.autodiff.tensor import Tape, Tensor, no_record


def numeric_gradient(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                     coords: Sequence[np.ndarray] | None = None):
    """Central differences of scalar ``fn()`` w.r.t. each entry of ``params``.

    ``fn`` must read the parameters' current ``.data``; entries are perturbed
    in place and restored. ``coords`` optionally restricts each parameter to
    a subset of flat indices (other entries are left at zero).
    """
    grads = []
    with no_record():
        for j, p in enumerate(params):
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            idx = range(flat.size) if coords is None else coords[j]
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    rng: np.random.Generator | None = None, max_coords: int | None = None) -> float:
    """Relative error between tape and finite-difference gradients.

    The comparison is over all checked entries of all parameters at once.
    With ``max_coords`` only that many random entries per parameter are
    differenced, which keeps large modules cheap.
    """
    params = list(params)
    with Tape() as tape:
        out = fn()
    analytic = tape.gradient(out, params)
    coords = None
    if max_coords is not None:
        rng = np.random.default_rng(0) if rng is None else rng
        coords = [
            rng.choice(p.size, size=min(max_coords, p.size), replace=False) for p in params
        ]
    numeric = numeric_gradient(fn, params, h, coords)
    a_parts, n_parts = [], []
    for j, (a, n) in enumerate(zip(analytic, numeric)):
        a, n = a.data.reshape(-1), n.reshape(-1)
        if coords is not None:
            a, n = a[coords[j]], n[coords[j]]
        a_parts.append(a)
        n_parts.append(n)
    return relative_error(np.concatenate(a_parts), np.concatenate(n_parts))
