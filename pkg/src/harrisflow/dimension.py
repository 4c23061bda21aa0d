"""Dimension of spectral sets: box counting and the subordinator exponent.

The zero set of the reflecting L-hat diffusion is the range of a
subordinator whose Laplace exponent is the reciprocal of the resolvent
density at the origin.  Its growth exponent and the box-counting slope of
sampled zero sets should both match (1 - alpha) / (2 - alpha).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corrfn import ScaleSpeedChart
from .semigroup import resolvent_at_origin
from .spectra import SpectralSample

DEFAULT_WINDOW = (2.0**-16, 2.0**-6)
DEFAULT_LAMBDA_WINDOW = (1e2, 1e6)
MIN_NONEMPTY = 100


class DimensionError(RuntimeError):
    """Not enough data for a dimension estimate."""


def predicted_dimension(alpha):
    """(1 - alpha) / (2 - alpha)."""
    if not (0.0 <= alpha < 1.0):
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return (1.0 - alpha) / (2.0 - alpha)


def _slope(x, y):
    """Least-squares slope and its standard error."""
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    n = x.size
    if n > 2:
        s2 = float(np.sum((A @ coef - y) ** 2)) / (n - 2)
        se = math.sqrt(s2 / float(np.sum((x - x.mean()) ** 2)))
    else:
        se = math.nan
    return float(coef[0]), se


@dataclass
class BoxCountCurve:
    eps: np.ndarray
    counts: np.ndarray
    slope: float
    stderr: float
    window: tuple
    n_samples: int

    def rows(self):
        return list(zip(self.eps.tolist(), self.counts.tolist()))


def _dyadic_scales(window):
    lo, hi = window
    k_hi = int(round(-math.log2(lo)))
    k_lo = int(round(-math.log2(hi)))
    return np.array([2.0**-k for k in range(k_lo, k_hi + 1)])


def occupied_boxes(times, eps):
    """Number of grid boxes [k eps, (k+1) eps) holding one of ``times``."""
    if times.size == 0:
        return 0
    return int(np.unique(np.floor(times / eps + 1e-9)).size)


def box_dimension(samples, window=DEFAULT_WINDOW, n_boot=200, boot_seed=0):
    """Pooled box-counting slope over the nonempty samples.

    The standard error comes from a bootstrap over samples; the resample
    indices use a fixed seed so the estimate is reproducible.
    """
    eps = _dyadic_scales(window)
    if eps.size < 5:
        raise ValueError("the scale window must span at least 5 dyadic scales")
    nonempty = [s for s in samples if not s.empty]
    if len(nonempty) < MIN_NONEMPTY:
        raise DimensionError(f"too few nonempty samples: {len(nonempty)} < {MIN_NONEMPTY}")
    res = min(s.dt for s in nonempty)
    if res > eps.min() * (1 + 1e-9):
        raise ValueError(f"sample resolution {res:g} is coarser than the window's finest scale {eps.min():g}")
    per = np.array([[occupied_boxes(s.zero_times, e) for e in eps] for s in nonempty], dtype=float)
    counts = per.sum(axis=0)
    x = np.log(1.0 / eps)
    d, _ = _slope(x, np.log(counts))
    gen = np.random.default_rng(boot_seed)
    boots = []
    for _ in range(n_boot):
        idx = gen.integers(0, per.shape[0], per.shape[0])
        boots.append(_slope(x, np.log(per[idx].sum(axis=0)))[0])
    return BoxCountCurve(eps, counts.astype(np.int64), d, float(np.std(boots, ddof=1)), tuple(window), len(nonempty))


@dataclass
class ResolventCurve:
    lam: np.ndarray
    g: np.ndarray
    psi: np.ndarray
    exponent: float
    stderr: float
    window: tuple

    def rows(self):
        return list(zip(self.lam.tolist(), self.g.tolist(), self.psi.tolist()))


def exponent_via_resolvent(chart: ScaleSpeedChart, window=DEFAULT_LAMBDA_WINDOW, n=13):
    """Power-law exponent of Psi(lambda) = 1 / g(lambda) over a log-spaced window."""
    lo, hi = window
    if not (0 < lo < hi):
        raise ValueError("lambda window must satisfy 0 < lo < hi")
    lam = np.geomspace(lo, hi, n)
    g = np.array([resolvent_at_origin(chart, l) for l in lam])
    psi = 1.0 / g
    k, se = _slope(np.log(lam), np.log(psi))
    return ResolventCurve(lam, g, psi, k, se, (lo, hi))


def single_point_sets(n, t=0.5, dt=2.0**-16):
    """Degenerate samples holding one point each (slope check)."""
    return [SpectralSample(1.0, np.array([t]), dt) for _ in range(n)]
