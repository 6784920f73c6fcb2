"""One-dimensional maximizers used by the M-steps."""
from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import minimize_scalar


def maximize_1d(fun: Callable[[float], float], lo: float, hi: float,
                grid: int = 41, starts: Iterable[float] = (),
                xatol: float = 1e-10) -> float:
    """Maximize a smooth function on ``[lo, hi]``.

    A coarse grid (plus any ``starts``) locates the best basin, then bounded
    Brent search refines it between the neighbouring grid points.
    """
    pts = np.unique(np.concatenate([np.linspace(lo, hi, grid),
                                    [s for s in starts if lo <= s <= hi]]))
    vals = np.array([fun(x) for x in pts])
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    i = int(np.argmax(vals))
    left = pts[max(i - 1, 0)]
    right = pts[min(i + 1, len(pts) - 1)]
    if right - left <= xatol:
        return float(pts[i])
    res = minimize_scalar(lambda x: -fun(x), bounds=(left, right), method="bounded",
                          options={"xatol": xatol, "maxiter": 500})
    if np.isfinite(res.fun) and -res.fun >= vals[i]:
        return float(res.x)
    return float(pts[i])


def maximize_log_scale(fun: Callable[[float], float], lo: float, hi: float,
                       grid: int = 41, starts: Iterable[float] = (),
                       xatol: float = 1e-10) -> float:
    """:func:`maximize_1d` over ``log x`` for a positive parameter."""
    return math.exp(maximize_1d(lambda u: fun(math.exp(u)), math.log(lo), math.log(hi),
                                grid=grid, starts=[math.log(s) for s in starts if s > 0],
                                xatol=xatol))
