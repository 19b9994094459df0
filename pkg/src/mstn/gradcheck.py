"""Central finite differences, used as an independent check on ``backward``."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_H = 1e-4


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value, dtype=np.float64).reshape(-1)[0])


def finite_diff_grad(f: Callable[[], object], x: Tensor, h: float = DEFAULT_H,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Estimate d f / d x by ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    ``f`` takes no arguments and reads ``x`` by closure; it must be
    deterministic (eval-mode dropout, or a re-seeded Rng per call). ``x.data``
    is perturbed in place and restored afterwards. If ``indices`` (flat
    positions) is given, only those coordinates are estimated and the rest of
    the returned array is NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan if indices is not None else 0.0, dtype=np.float64)
    coords = range(flat.size) if indices is None else indices
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(f())
            flat[i] = orig - h
            down = _scalar(f())
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
    return out.reshape(x.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps identically-zero gradients (e.g. a bias feeding straight
    into batch norm) from turning difference noise into a relative error of 1.
    Positions where ``numeric`` is NaN (not estimated) are skipped.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
