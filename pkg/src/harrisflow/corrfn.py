"""Correlation functions b(x), noise classification and scale/speed charts."""

from __future__ import annotations

import csv
import enum
import warnings
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, interpolate


class Kind(str, enum.Enum):
    EXP_POWER = "exp_power"
    INDICATOR = "indicator"
    TABULATED = "tabulated"


class NoiseClass(str, enum.Enum):
    CLASSICAL = "classical"
    NONCLASSICAL = "nonclassical"


class CorrelationError(ValueError):
    """Invalid correlation function or unsupported operation on it."""


class ResolutionError(CorrelationError):
    """Tabulated data does not resolve the behaviour of b near the origin."""


@dataclass(frozen=True, eq=False)
class CorrelationFunction:
    """An even, nonincreasing correlation function with b(0) = 1.

    Build instances with :meth:`exp_power`, :meth:`indicator` or
    :meth:`tabulated`.  ``alpha`` is the local exponent of ``1 - b`` at the
    origin (fitted for tabulated data, 0 for the indicator).
    """

    kind: Kind
    c: float = 1.0
    alpha: float = 1.0
    table_x: np.ndarray | None = None
    table_b: np.ndarray | None = None
    # tabulated only: 1 - b = k0 * x**alpha on (0, x1), PCHIP beyond
    _k0: float = 0.0
    _pchip: object = field(default=None, repr=False)

    @classmethod
    def exp_power(cls, c=1.0, alpha=0.5):
        c, alpha = float(c), float(alpha)
        if not c > 0:
            raise CorrelationError(f"exp_power rate c must be positive, got {c}")
        if not 0 < alpha <= 1:
            raise CorrelationError(f"exp_power exponent alpha must lie in (0, 1], got {alpha}")
        return cls(Kind.EXP_POWER, c=c, alpha=alpha)

    @classmethod
    def indicator(cls):
        return cls(Kind.INDICATOR, c=0.0, alpha=0.0)

    @classmethod
    def tabulated(cls, x, b):
        x = np.asarray(x, dtype=float)
        b = np.asarray(b, dtype=float)
        if x.ndim != 1 or x.shape != b.shape:
            raise CorrelationError("table x and b must be 1-d arrays of equal length")
        if np.any(np.diff(x) <= 0):
            raise CorrelationError("table x must be strictly increasing")
        if x[0] < 0:
            raise CorrelationError("table x must be nonnegative")
        if np.any((b < 0) | (b > 1)):
            raise CorrelationError("table values must lie in [0, 1]")
        if np.any(np.diff(b) > 0):
            raise CorrelationError("tabulated b must be nonincreasing on (0, inf)")
        if x[0] == 0.0:
            if b[0] != 1.0:
                raise CorrelationError("b(0) must equal 1")
            x, b = x[1:], b[1:]
        if x.size < 4:
            raise ResolutionError("insufficient resolution near origin: need >= 4 points with x > 0")
        if b[0] >= 1.0:
            raise ResolutionError("insufficient resolution near origin: b(x1) = 1 leaves 1-b unresolved")
        alpha = _fit_origin_exponent(x, b)
        k0 = (1.0 - b[0]) / x[0] ** alpha
        pchip = interpolate.PchipInterpolator(x, b, extrapolate=False)
        return cls(Kind.TABULATED, c=0.0, alpha=alpha, table_x=x, table_b=b, _k0=k0, _pchip=pchip)

    @classmethod
    def from_csv(cls, path):
        """Read a two-column ``x,b`` CSV with a header row."""
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [h.strip() for h in rows[0]] != ["x", "b"]:
            raise CorrelationError(f"{path}: header must be 'x,b'")
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        except ValueError as exc:
            raise CorrelationError(f"{path}: non-numeric entry ({exc})") from None
        if data.ndim != 2 or data.shape[1] != 2:
            raise CorrelationError(f"{path}: expected two columns")
        return cls.tabulated(data[:, 0], data[:, 1])

    # -- evaluation -------------------------------------------------------

    def __call__(self, x):
        return eval_b(self, x)

    def one_minus_b(self, x):
        """1 - b(|x|), computed without cancellation near the origin."""
        x = np.abs(np.asarray(x, dtype=float))
        if self.kind is Kind.EXP_POWER:
            return -np.expm1(-self.c * x**self.alpha)
        if self.kind is Kind.INDICATOR:
            return np.where(x == 0.0, 0.0, 1.0)
        # the power law below the first node, without cancellation
        return np.where(x < self.table_x[0], self._k0 * x**self.alpha, 1.0 - _tab_b(self, x))

    @property
    def is_continuous(self):
        return self.kind is not Kind.INDICATOR

    def describe(self):
        if self.kind is Kind.EXP_POWER:
            return {"kind": "exp_power", "c": self.c, "alpha": self.alpha}
        if self.kind is Kind.INDICATOR:
            return {"kind": "indicator"}
        return {"kind": "tabulated", "alpha_fit": self.alpha, "n_points": int(self.table_x.size)}


def _fit_origin_exponent(x, b):
    lx = np.log(x[:4])
    ly = np.log(1.0 - b[:4])
    slope, _ = np.polyfit(lx, ly, 1)
    lo = (ly[1] - ly[0]) / (lx[1] - lx[0])
    hi = (ly[3] - ly[2]) / (lx[3] - lx[2])
    if not 0 < slope <= 2 or abs(hi - lo) > 0.1:
        raise ResolutionError(
            "insufficient resolution near origin: local exponent of 1-b is not stable "
            f"over the first table points (estimates {lo:.3f} .. {hi:.3f})"
        )
    return float(slope)


def _tab_b(f, x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    x1, xn, bn = f.table_x[0], f.table_x[-1], f.table_b[-1]
    near = x < x1
    mid = (x >= x1) & (x <= xn)
    far = x > xn
    out[near] = 1.0 - f._k0 * x[near] ** f.alpha
    out[mid] = f._pchip(x[mid])
    # exponential tail keeps b continuous, nonincreasing and vanishing at infinity
    out[far] = bn * np.exp(-(x[far] - xn) / xn)
    return np.clip(out, 0.0, 1.0)


def eval_b(f: CorrelationFunction, x):
    """b(|x|); exact 1 at the origin for every kind."""
    x = np.abs(np.asarray(x, dtype=float))
    if f.kind is Kind.EXP_POWER:
        out = np.exp(-f.c * x**f.alpha)
    elif f.kind is Kind.INDICATOR:
        out = np.where(x == 0.0, 1.0, 0.0)
    else:
        out = _tab_b(f, x)
    out = np.where(x == 0.0, 1.0, out)
    return out if out.ndim else float(out)


# -- classification -------------------------------------------------------------


@dataclass(frozen=True)
class ShellTest:
    """Outcome of the dyadic-shell divergence test for int_0^1 dx / (1-b)."""

    divergent: bool
    shells: int
    partial_sum: float
    last_ratio: float


def shell_test(one_minus_b, max_shells=400, run=60, ratio_threshold=0.999, tail_tol=1e-8):
    """Decide divergence of int_{0+}^1 dx / g(x) over shells [2^-k-1, 2^-k].

    Divergent when ``run`` consecutive shell ratios are all at least
    ``ratio_threshold``.  Convergent when the geometric tail bound drops
    below ``tail_tol``, or when the ratios have settled (spread < 1e-3 over
    ``run`` shells) strictly below the threshold, i.e. a power-law tail.
    """
    contributions = []
    ratios = []
    total = 0.0
    for k in range(max_shells):
        lo, hi = 2.0 ** (-k - 1), 2.0 ** (-k)
        with warnings.catch_warnings():
            # roundoff warnings are expected when the integrand blows up
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, _ = integrate.quad(lambda x: 1.0 / float(one_minus_b(x)), lo, hi, limit=200)
        contributions.append(val)
        total += val
        if k == 0:
            continue
        r = val / contributions[-2]
        ratios.append(r)
        if len(ratios) >= run:
            window = ratios[-run:]
            if min(window) >= ratio_threshold:
                return ShellTest(True, k + 1, total, r)
            if r < 1.0 and val * r / (1.0 - r) < tail_tol:
                return ShellTest(False, k + 1, total, r)
            if max(window) - min(window) < 1e-3 and max(window) < ratio_threshold:
                return ShellTest(False, k + 1, total, r)
    raise ResolutionError("insufficient resolution near origin: shell test undecided")


def classify_noise(f: CorrelationFunction) -> NoiseClass:
    """Classical iff int_{0+}^1 (1 - b(x))^-1 dx diverges."""
    if f.kind is Kind.INDICATOR:
        return NoiseClass.NONCLASSICAL
    if f.kind is Kind.EXP_POWER:
        return NoiseClass.CLASSICAL if f.alpha >= 1.0 else NoiseClass.NONCLASSICAL
    res = shell_test(f.one_minus_b)
    return NoiseClass.CLASSICAL if res.divergent else NoiseClass.NONCLASSICAL


def require_nonclassical(f: CorrelationFunction):
    if classify_noise(f) is NoiseClass.CLASSICAL:
        raise CorrelationError("scale coordinate degenerate: xi(0+) diverges (classical noise)")


# -- initial law mu = -db ---------------------------------------------------------


def sample_mu(f: CorrelationFunction, u):
    """Inverse-CDF draw from mu(dx) = -db(x): returns x with b(x) = 1 - u."""
    u = np.asarray(u, dtype=float)
    if f.kind is Kind.INDICATOR:
        out = np.zeros_like(u)
    elif f.kind is Kind.EXP_POWER:
        out = (-np.log1p(-u) / f.c) ** (1.0 / f.alpha)
    else:
        out = _tab_inverse(f, 1.0 - u).reshape(u.shape)
    return out if out.ndim else float(out)


def _tab_inverse(f, target):
    target = np.atleast_1d(target).astype(float)
    out = np.empty_like(target)
    xn, bn = f.table_x[-1], f.table_b[-1]
    b1 = f.table_b[0]
    for i, t in enumerate(target):
        if t >= 1.0:
            out[i] = 0.0
        elif t > b1:
            out[i] = ((1.0 - t) / f._k0) ** (1.0 / f.alpha)
        elif t >= bn:
            # PCHIP is monotone: bracket and solve
            j = np.searchsorted(-f.table_b, -t)
            j = min(max(j, 1), f.table_x.size - 1)
            lo, hi = f.table_x[j - 1], f.table_x[j]
            if f._pchip(lo) == f._pchip(hi):
                out[i] = lo
            else:
                out[i] = _bisect(lambda x: float(f._pchip(x)) - t, lo, hi)
        elif t > 0.0:
            out[i] = xn - xn * math.log(t / bn)
        else:
            out[i] = np.inf
    return out


def _bisect(g, lo, hi, tol=1e-14):
    glo = g(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if (gm > 0) == (glo > 0):
            lo, glo = mid, gm
        else:
            hi = mid
        if hi - lo < tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


# -- scale / speed chart -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScaleSpeedChart:
    """Tabulated scale xi(x) = int_0^x dy/(1-b(y)) and speed density a(xi).

    Nodes are geometric toward the origin.  Between nodes both maps use cubic
    Hermite interpolation with exact end slopes (dxi/dx = 1/(1-b)); below the
    first node a power law through the origin is used.  Past the last node
    both maps continue linearly.
    """

    corr: CorrelationFunction
    x: np.ndarray
    xi: np.ndarray
    slope: np.ndarray  # dxi/dx = 1 / (1 - b(x)) at the nodes

    @property
    def xi_max(self):
        return float(self.xi[-1])

    def xi_of_x(self, x):
        return _hermite_odd(self.x, self.xi, self.slope, x)

    def x_of_xi(self, xi):
        return _hermite_odd(self.xi, self.x, 1.0 / self.slope, xi)

    def a_of_xi(self, xi):
        xi = np.abs(np.asarray(xi, dtype=float))
        return self.corr.one_minus_b(self.x_of_xi(xi))

    def clock_tables(self, coordinate):
        """(nodes, H, h) for the clock density of a time change.

        ``coordinate='x'``: density 1/(1-b) on the x-axis, antiderivative xi(x).
        ``coordinate='xi'``: density a(xi) on the xi-axis, antiderivative x(xi).
        """
        if coordinate == "x":
            return self.x, self.xi, self.slope
        if coordinate == "xi":
            return self.xi, self.x, 1.0 / self.slope
        raise ValueError(coordinate)


def _hermite_odd(z, H, h, q):
    """Odd extension of the tabulated antiderivative (z, H, H'=h) at q."""
    q = np.asarray(q, dtype=float)
    s = np.sign(q)
    a = np.abs(q)
    out = np.empty_like(a)
    first = a < z[0]
    last = a >= z[-1]
    mid = ~(first | last)
    # power law on (0, z0): H = H0 (z/z0)^p with matching slope
    p = z[0] * h[0] / H[0]
    out[first] = H[0] * (a[first] / z[0]) ** p
    out[last] = H[-1] + h[-1] * (a[last] - z[-1])
    if np.any(mid):
        am = a[mid]
        j = np.searchsorted(z, am, side="right") - 1
        z0, z1 = z[j], z[j + 1]
        dz = z1 - z0
        t = (am - z0) / dz
        t2, t3 = t * t, t * t * t
        out[mid] = (
            (2 * t3 - 3 * t2 + 1) * H[j]
            + (t3 - 2 * t2 + t) * dz * h[j]
            + (-2 * t3 + 3 * t2) * H[j + 1]
            + (t3 - t2) * dz * h[j + 1]
        )
    out = s * out
    return out if out.ndim else float(out)


def _xi_near_origin(f, x0):
    """int_0^x0 dy / (1 - b(y)) for tiny x0 via the local power law."""
    if f.kind is Kind.EXP_POWER:
        a, c = f.alpha, f.c
        # 1/(1-e^-z) = 1/z + 1/2 + z/12 + O(z^3),  z = c y^a
        return x0 ** (1 - a) / (c * (1 - a)) + x0 / 2 + c * x0 ** (1 + a) / (12 * (1 + a))
    a, k = f.alpha, f._k0
    return x0 ** (1 - a) / (k * (1 - a))


def build_chart(f: CorrelationFunction, xi_max=60.0, n_nodes=2400, x_min=1e-14):
    """Tabulate the scale chart of ``f`` on ``[0, x(xi_max)]``.

    ``n_nodes`` nodes are laid out geometrically from ``x_min``; the
    ratio is chosen so the grid reaches ``xi_max``.
    """
    if f.kind is Kind.INDICATOR:
        x = np.geomspace(x_min, max(xi_max, 1.0), n_nodes)
        return ScaleSpeedChart(f, x, x.copy(), np.ones_like(x))
    require_nonclassical(f)

    # far from the origin 1-b -> 1 so xi(x) ~ x; overshoot the x range a bit
    x_hi = xi_max * 1.05 + 1.0
    x = np.geomspace(x_min, x_hi, n_nodes)
    g = f.one_minus_b
    xi = np.empty_like(x)
    xi[0] = _xi_near_origin(f, x[0])
    for i in range(1, x.size):
        seg, _ = integrate.quad(lambda y: 1.0 / float(g(y)), x[i - 1], x[i], epsabs=0.0, epsrel=1e-12, limit=100)
        xi[i] = xi[i - 1] + seg
    keep = np.searchsorted(xi, xi_max, side="right") + 1
    x, xi = x[:keep], xi[:keep]
    slope = 1.0 / g(x)
    if np.any(np.diff(xi) <= 0):
        raise CorrelationError("scale chart is not strictly increasing")
    return ScaleSpeedChart(f, x, xi, slope)


def local_exponent(chart: ScaleSpeedChart, xi_lo=1e-6, xi_hi=1e-3, n=40):
    """Least-squares slope of log a(xi) against log xi on [xi_lo, xi_hi]."""
    xs = np.geomspace(xi_lo, xi_hi, n)
    a = chart.a_of_xi(xs)
    slope, _ = np.polyfit(np.log(xs), np.log(a), 1)
    return float(slope)
