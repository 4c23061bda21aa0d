"""Time-changed Brownian motion engines for the L, L-hat and switching diffusions.

All diffusions here have natural scale in their working coordinate, so each
one is a Brownian motion ``W`` run by the inverse of an additive clock

    flow_time(u) = 1/2 * int_0^u h(|W(s)|) ds

with ``h = 1/(1-b)`` on the x-axis (L), ``h = a`` on the xi-axis (L-hat) and
``h = 1/(1-rho b)`` for the difference of a rho-joining.  The clock is
integrated exactly along the piecewise-linear Wiener path using the
tabulated antiderivative ``H`` of ``h``, which stays finite where ``h``
blows up at the origin.  Zeros inside a Wiener step are detected with the
Brownian-bridge rule.  Regime changes and target edges that fall inside a
step split it at a bridge-sampled midpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import rng
from .corrfn import CorrelationFunction, Kind, ScaleSpeedChart, build_chart, require_nonclassical

DEFAULT_DT_W = 1e-4
DEFAULT_DT = 1e-4
# Wiener step used when every clock is the identity: the bridge rule and
# exact cuts make such runs exact at any step size
EXACT_DT_W = 1e-2

STATUS_OK = 0
STATUS_STALL = 1


class ClockStall(RuntimeError):
    """The additive clock failed to advance (Wiener step too coarse)."""


# -- schedules and paths ------------------------------------------------------------


@dataclass(frozen=True)
class RegimeSchedule:
    """Elementary set F: sorted, pairwise disjoint closed intervals in [0, 1]."""

    intervals: tuple = ()

    def __post_init__(self):
        ivs = tuple((float(a), float(b)) for a, b in self.intervals)
        prev = -math.inf
        for a, b in ivs:
            if not (0.0 <= a < b <= 1.0):
                raise ValueError(f"interval [{a}, {b}] must satisfy 0 <= a < b <= 1")
            if a <= prev:
                raise ValueError(f"intervals must be sorted and disjoint, got [{a}, {b}] after end {prev}")
            prev = b
        object.__setattr__(self, "intervals", ivs)

    @classmethod
    def parse(cls, text):
        """Parse ``"a,b;c,d"``; an empty string is the empty set."""
        text = text.strip()
        if not text:
            return cls(())
        pairs = []
        for chunk in text.split(";"):
            parts = [p for p in chunk.split(",")]
            if len(parts) != 2:
                raise ValueError(f"bad interval {chunk!r}: expected 'a,b'")
            pairs.append((float(parts[0]), float(parts[1])))
        return cls(tuple(pairs))

    @classmethod
    def whole(cls):
        return cls(((0.0, 1.0),))

    @property
    def empty(self):
        return not self.intervals

    def contains(self, t):
        return any(a <= t <= b for a, b in self.intervals)

    def switch_times(self, horizon=1.0):
        """Regime at time 0 (True = inside F) and flip times in (0, horizon)."""
        on0 = bool(self.intervals) and self.intervals[0][0] == 0.0
        pts = [p for iv in self.intervals for p in iv if 0.0 < p < horizon]
        return on0, np.array(pts, dtype=float)

    def measure(self):
        return sum(b - a for a, b in self.intervals)

    def __str__(self):
        return ";".join(f"{a:g},{b:g}" for a, b in self.intervals)


@dataclass
class Path:
    """A trajectory sampled on a uniform flow-time grid."""

    dt: float
    values: np.ndarray
    coordinate: str = "x"
    absorbed_at: float | None = None
    wiener_time: float = float("nan")

    @property
    def times(self):
        return self.dt * np.arange(self.values.size)


def bridge_zero_probability(x1, x2, dt):
    """P(a Brownian bridge from x1 >= 0 to x2 >= 0 over time dt touches 0)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return float(np.exp(-2.0 * x1 * x2 / dt))


# -- clock tables ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Clock:
    """Antiderivative table (z, H, h) of a clock density, odd-extended.

    Nodes are geometric so a lookup costs one logarithm; ``ilr`` is
    ``1/log(ratio)``.  ``ilr == 0`` marks the identity clock (h = 1).
    """

    z: np.ndarray
    H: np.ndarray
    h: np.ndarray
    ilr: float
    name: str = ""

    @classmethod
    def identity(cls, name=""):
        z = np.geomspace(1e-14, 1e3, 8)
        return cls(z, z.copy(), np.ones_like(z), 0.0, name)

    @classmethod
    def geometric(cls, z, H, h, name=""):
        z = np.ascontiguousarray(z, dtype=float)
        r = np.log(z[1:] / z[:-1])
        if np.ptp(r) > 1e-9 * r.mean():
            raise ValueError("clock nodes must be geometric")
        return cls(z, np.ascontiguousarray(H, dtype=float), np.ascontiguousarray(h, dtype=float),
                   float((z.size - 1) / np.log(z[-1] / z[0])), name)

    def args(self):
        return self.z, self.H, self.h, self.ilr

    def antiderivative(self, q):
        return _H_vec(*self.args(), np.asarray(q, dtype=float))

    def density(self, q):
        return _h_vec(*self.args(), np.asarray(q, dtype=float))


def l_clock(chart: ScaleSpeedChart):
    if chart.corr.kind is Kind.INDICATOR:
        return Clock.identity("L")
    z, H, h = chart.clock_tables("x")
    return Clock.geometric(z, H, h, "L")


def lhat_clock(chart: ScaleSpeedChart):
    if chart.corr.kind is Kind.INDICATOR:
        return Clock.identity("Lhat")
    # resample onto geometric xi nodes; the density a(xi) is exact there
    z = np.geomspace(chart.xi[0], chart.xi[-1], chart.xi.size)
    x = chart.x_of_xi(z)
    x[0], x[-1] = chart.x[0], chart.x[-1]
    return Clock.geometric(z, x, chart.corr.one_minus_b(x), "Lhat")


def rho_clock(chart: ScaleSpeedChart, rho):
    """Clock of the rho-joining difference: density 1/(1 - rho b(x))."""
    from scipy import integrate

    f = chart.corr
    if f.kind is Kind.INDICATOR or rho == 0.0:
        return Clock.identity(f"rho={rho}")
    x = chart.x

    def dens(y):
        return 1.0 / (1.0 - rho * float(f(y)))

    H = np.empty_like(x)
    H[0] = x[0] / (1.0 - rho)
    for i in range(1, x.size):
        seg, _ = integrate.quad(dens, x[i - 1], x[i], epsabs=0.0, epsrel=1e-12)
        H[i] = H[i - 1] + seg
    h = 1.0 / (1.0 - rho * f(x))
    return Clock.geometric(x, H, h, f"rho={rho}")


@dataclass(frozen=True, eq=False)
class BTable:
    """Numba-friendly description of b on the x-axis."""

    kind: int
    c: float
    alpha: float
    k0: float
    knots: np.ndarray
    coef: np.ndarray
    b_last: float

    @classmethod
    def of(cls, f: CorrelationFunction):
        if f.kind is Kind.EXP_POWER:
            return cls(0, f.c, f.alpha, 0.0, np.zeros(2), np.zeros((4, 1)), 0.0)
        if f.kind is Kind.INDICATOR:
            return cls(1, 0.0, 0.0, 0.0, np.zeros(2), np.zeros((4, 1)), 0.0)
        p = f._pchip
        return cls(2, 0.0, f.alpha, f._k0, np.ascontiguousarray(p.x), np.ascontiguousarray(p.c), float(f.table_b[-1]))

    def args(self):
        return (self.kind, self.c, self.alpha, self.k0, self.knots, self.coef, self.b_last)


# -- numba primitives -------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy", inline="always")
def _cell(z, ilr, a):
    n = z.size
    i = int(math.log(a / z[0]) * ilr)
    if i > n - 2:
        i = n - 2
    if i < 0:
        i = 0
    while i > 0 and z[i] > a:
        i -= 1
    while i < n - 2 and z[i + 1] <= a:
        i += 1
    return i


@nb.njit(cache=True, error_model="numpy", inline="always")
def _H(z, H, h, ilr, q):
    if ilr == 0.0:
        return q
    a = abs(q)
    n = z.size
    if a < z[0]:
        if a == 0.0:
            v = 0.0
        else:
            p = z[0] * h[0] / H[0]
            v = H[0] * math.exp(p * math.log(a / z[0]))
    elif a >= z[n - 1]:
        v = H[n - 1] + h[n - 1] * (a - z[n - 1])
    else:
        lo = int(math.log(a / z[0]) * ilr)
        if lo > n - 2:
            lo = n - 2
        while lo > 0 and z[lo] > a:
            lo -= 1
        while lo < n - 2 and z[lo + 1] <= a:
            lo += 1
        hi = lo + 1
        dz = z[hi] - z[lo]
        t = (a - z[lo]) / dz
        t2 = t * t
        t3 = t2 * t
        v = ((2 * t3 - 3 * t2 + 1) * H[lo] + (t3 - 2 * t2 + t) * dz * h[lo]
             + (-2 * t3 + 3 * t2) * H[hi] + (t3 - t2) * dz * h[hi])
    return v if q >= 0 else -v


@nb.njit(cache=True, error_model="numpy", inline="always")
def _h(z, H, h, ilr, q):
    """Clock density by linear interpolation (bounds and Newton steps)."""
    if ilr == 0.0:
        return 1.0
    a = abs(q)
    n = z.size
    if a <= z[0]:
        # derivative of the power law used by _H below the first node
        p = z[0] * h[0] / H[0]
        if a == 0.0:
            return h[0] if p == 1.0 else (0.0 if p > 1.0 else math.inf)
        return h[0] * math.exp((p - 1.0) * math.log(a / z[0]))
    if a >= z[n - 1]:
        return h[n - 1]
    lo = _cell(z, ilr, a)
    t = (a - z[lo]) / (z[lo + 1] - z[lo])
    return h[lo] + t * (h[lo + 1] - h[lo])


@nb.njit(cache=True, error_model="numpy")
def _H_vec(z, H, h, ilr, q):
    out = np.empty(q.size)
    for i in range(q.size):
        out[i] = _H(z, H, h, ilr, q.flat[i])
    return out.reshape(q.shape)


@nb.njit(cache=True, error_model="numpy")
def _h_vec(z, H, h, ilr, q):
    out = np.empty(q.size)
    for i in range(q.size):
        out[i] = _h(z, H, h, ilr, q.flat[i])
    return out.reshape(q.shape)


@nb.njit(cache=True, error_model="numpy", inline="always")
def _mean_density(z, H, h, ilr, w0, H0, w1, H1):
    """Average of the clock density along the segment w0 -> w1."""
    if ilr == 0.0:
        return 1.0
    d = w1 - w0
    if abs(d) > 1e-13 * (abs(w0) + abs(w1)) and d != 0.0:
        return (H1 - H0) / d
    return _h(z, H, h, ilr, w0)


@nb.njit(cache=True, error_model="numpy", inline="always")
def _segment_point(z, H, h, ilr, w0, H0, w1, H1, frac):
    """Point of the segment w0 -> w1 where the clock has covered ``frac`` of its increment.

    Along a linear Wiener segment the clock grows like ``H(w)``, so flow-time
    grid points sit where ``H`` takes the matching intermediate value.
    """
    if ilr == 0.0 or w0 == w1 or not (H1 != H0):
        return w0 + frac * (w1 - w0)
    target = H0 + frac * (H1 - H0)
    lo = min(w0, w1)
    hi = max(w0, w1)
    x = w0 + frac * (w1 - w0)
    scale = abs(H1 - H0)
    for _ in range(80):
        f = _H(z, H, h, ilr, x) - target
        if abs(f) <= 1e-13 * scale:
            break
        if f > 0.0:
            hi = x
        else:
            lo = x
        d = _h(z, H, h, ilr, x)
        xn = x - f / d if (d > 0.0 and math.isfinite(d)) else 0.5 * (lo + hi)
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi)
        if xn == x:
            break
        x = xn
    return x


@nb.njit(cache=True, error_model="numpy", inline="always")
def _b_nb(kind, c, alpha, k0, knots, coef, b_last, x):
    x = abs(x)
    if x == 0.0:
        return 1.0
    if kind == 0:
        return math.exp(-c * math.exp(alpha * math.log(x)))
    if kind == 1:
        return 0.0
    n = knots.size
    if x < knots[0]:
        return 1.0 - k0 * math.exp(alpha * math.log(x))
    if x > knots[n - 1]:
        return b_last * math.exp(-(x - knots[n - 1]) / knots[n - 1])
    lo, hi = 0, n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if knots[mid] <= x:
            lo = mid
        else:
            hi = mid
    if lo >= coef.shape[1]:
        lo = coef.shape[1] - 1
    s = x - knots[lo]
    v = ((coef[0, lo] * s + coef[1, lo]) * s + coef[2, lo]) * s + coef[3, lo]
    return min(1.0, max(0.0, v))


@nb.njit(cache=True, error_model="numpy", inline="always")
def _hits_zero(key, st, w0, w1, dt):
    """Bridge rule: does the Brownian path from w0 to w1 over dt touch 0?"""
    if w0 == 0.0 or w1 == 0.0 or (w0 > 0.0) != (w1 > 0.0):
        return True
    e = 2.0 * w0 * w1 / dt
    if e > 745.0:
        return False
    return rng.uniform(key, st) < math.exp(-e)


@nb.njit(cache=True, error_model="numpy", inline="always")
def _hit_fraction(key, st, cache, w0, w1, dt):
    """Fraction of the step at which a bridge known to touch 0 first does so.

    With u = t dt / (dt - t) the bridge becomes a Brownian motion from |w0|
    with drift w1/dt; conditioned on reaching 0 its hitting time in u is
    inverse Gaussian with mean |w0| dt / |w1| and shape w0^2.
    """
    a = abs(w0)
    if a == 0.0:
        return 0.0
    lam = a * a
    z = rng.normal(key, st, cache)
    if w1 == 0.0:
        u = lam / (z * z)
    else:
        m = a * dt / abs(w1)
        y = z * z
        x = m + m * m * y / (2.0 * lam) - m / (2.0 * lam) * math.sqrt(4.0 * m * lam * y + m * m * y * y)
        u = x if rng.uniform(key, st) <= m / (m + x) else m * m / x
    return u / (dt + u)


# -- switching kernel (L-type, regimes reflect / absorb) -------------------------------


@nb.njit(cache=True, error_model="numpy")
def _switch_one(key, x0, ev_t, ev_k, on0, zA, HA, hA, iA, zB, HB, hB, iB, T, dt_w, dtg, n_grid,
                bk, bc, ba, bk0, bknots, bcoef, blast, q_out, grid_out, max_wiener):
    """One path of the switching diffusion on [0, T].

    Events are flow times where the regime flips (``ev_k == -1``) or where
    ``|W|`` is recorded into ``q_out[ev_k]``.  Steps are cut exactly at each
    event with a bridge-sampled value, so recorded values carry no
    interpolation error.
    """
    st = np.zeros(1, dtype=np.uint64)
    cache = np.zeros(2)
    sq = math.sqrt(dt_w)
    W = x0
    A = 0.0
    U = 0.0
    on = on0
    ei = 0
    nev = ev_t.size
    absorbed_at = -1.0
    tol = 1e-12 * T
    j = 1  # next grid index
    sum_b = 0.5 * _b_nb(bk, bc, ba, bk0, bknots, bcoef, blast, W)
    if grid_out.size > 0:
        grid_out[0] = abs(W)
    while ei < nev and ev_t[ei] <= 0.0:
        if ev_k[ei] < 0:
            on = not on
        else:
            q_out[ev_k[ei]] = abs(W)
        ei += 1
    absorbed = (not on) and W == 0.0
    if absorbed:
        absorbed_at = 0.0
    trapped = 0.0  # exact time spent absorbed
    status = 0
    HW = 0.0
    HW_valid = False
    while A < T:
        seg_end = ev_t[ei] if ei < nev else T
        if seg_end > T:
            seg_end = T
        if absorbed:
            # W stays 0 until the next event
            while j < n_grid and j * dtg <= seg_end + tol:
                sum_b += 1.0
                if grid_out.size > 0:
                    grid_out[j] = 0.0
                j += 1
            A1 = seg_end
            cut = True
            W1 = 0.0
            trapped += A1 - A
        else:
            if on:
                z, H, h, il = zA, HA, hA, iA
            else:
                z, H, h, il = zB, HB, hB, iB
            if not HW_valid:
                HW = _H(z, H, h, il, W)
                HW_valid = True
            dW = sq * rng.normal(key, st, cache)
            W1 = W + dW
            H1 = _H(z, H, h, il, W1)
            dA = 0.5 * dt_w * _mean_density(z, H, h, il, W, HW, W1, H1)
            if not (dA > 0.0) or not math.isfinite(dA):
                status = 1
                break
            A1 = A + dA
            cut = A1 >= seg_end
            if cut:
                theta = (seg_end - A) / dA
                theta = min(1.0, max(0.0, theta))
                sd = math.sqrt(max(theta * (1.0 - theta), 0.0) * dt_w)
                W1 = W + theta * dW + sd * rng.normal(key, st, cache)
                dtu = theta * dt_w
                A1 = seg_end
            else:
                dtu = dt_w
                HW = H1
            hit = False
            if not on and dtu > 0.0:
                hit = _hits_zero(key, st, W, W1, dtu)
            A_hit = A1
            if hit:
                A_hit = A + _hit_fraction(key, st, cache, W, W1, dtu) * (A1 - A)
                W1 = 0.0
                absorbed = True
                trapped += A1 - A_hit
                if absorbed_at < 0.0:
                    absorbed_at = A_hit
            # grid samples in (A, A1], placed by the clock along the segment up to the first zero
            span = A_hit - A
            G0 = 0.0
            G1 = 0.0
            if j < n_grid and j * dtg <= A1 + tol:
                G0 = _H(z, H, h, il, W)
                G1 = _H(z, H, h, il, W1)
            while j < n_grid and j * dtg <= A1 + tol:
                tg = j * dtg
                if tg >= A_hit:
                    v = 0.0
                elif span > 0.0:
                    v = abs(_segment_point(z, H, h, il, W, G0, W1, G1, (tg - A) / span))
                else:
                    v = abs(W)
                sum_b += _b_nb(bk, bc, ba, bk0, bknots, bcoef, blast, v)
                if grid_out.size > 0:
                    grid_out[j] = v
                j += 1
            U += dtu
            if cut or hit:
                HW_valid = False
        A = A1
        W = W1
        if cut:
            while ei < nev and ev_t[ei] <= A + tol:
                if ev_k[ei] < 0:
                    on = not on
                else:
                    q_out[ev_k[ei]] = abs(W)
                ei += 1
            absorbed = (not on) and W == 0.0
            HW_valid = False
        if U > max_wiener:
            status = 1
            break
    # floating-point slack can leave the final grid point unvisited
    while j < n_grid:
        sum_b += _b_nb(bk, bc, ba, bk0, bknots, bcoef, blast, abs(W))
        if grid_out.size > 0:
            grid_out[j] = abs(W)
        j += 1
    while ei < nev:
        if ev_k[ei] >= 0:
            q_out[ev_k[ei]] = abs(W)
        ei += 1
    return U, sum_b, abs(W), absorbed_at, trapped, status


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _switch_batch(keys, x0, ev_t, ev_k, on0, zA, HA, hA, iA, zB, HB, hB, iB, T, dt_w, dtg, n_grid,
                  bk, bc, ba, bk0, bknots, bcoef, blast, max_wiener,
                  out_U, out_sumb, out_end, out_abs, out_trap, out_q, out_status):
    empty = np.zeros(0)
    for r in nb.prange(keys.size):
        q = np.zeros(out_q.shape[1])
        U, sb, endv, ab, tr, stt = _switch_one(keys[r], x0[r], ev_t, ev_k, on0, zA, HA, hA, iA, zB, HB, hB, iB,
                                            T, dt_w, dtg, n_grid, bk, bc, ba, bk0, bknots, bcoef, blast, q,
                                            empty, max_wiener)
        out_U[r] = U
        out_sumb[r] = sb
        out_end[r] = endv
        out_abs[r] = ab
        out_trap[r] = tr
        out_status[r] = stt
        for k in range(q.size):
            out_q[r, k] = q[k]


@nb.njit(cache=True, error_model="numpy")
def _switch_path(key, x0, ev_t, ev_k, on0, zA, HA, hA, iA, zB, HB, hB, iB, T, dt_w, dtg, n_grid,
                 bk, bc, ba, bk0, bknots, bcoef, blast, max_wiener, grid_out):
    q = np.zeros(0)
    return _switch_one(key, x0, ev_t, ev_k, on0, zA, HA, hA, iA, zB, HB, hB, iB, T, dt_w, dtg, n_grid,
                       bk, bc, ba, bk0, bknots, bcoef, blast, q, grid_out, max_wiener)


def _events(flips, tq):
    """Merge flip times and query times; queries sort before flips at ties."""
    t = np.concatenate([np.asarray(tq, float), np.asarray(flips, float)])
    k = np.concatenate([np.arange(len(tq)), -np.ones(len(flips), dtype=np.int64)]).astype(np.int64)
    order = np.lexsort((k < 0, t))
    return np.ascontiguousarray(t[order]), np.ascontiguousarray(k[order])


@dataclass
class SwitchingRun:
    """Per-replica summaries of a batch of switching-diffusion paths."""

    wiener_time: np.ndarray  # A^{-1}(T)
    int_b: np.ndarray  # trapezoid of b(|xi(t)|) over the flow grid
    int_one_minus_b: np.ndarray
    end_value: np.ndarray  # |xi(T)|
    absorbed_at: np.ndarray  # first absorption time, -1 if never
    query: np.ndarray  # |xi(t_q)| for each query time
    query_times: np.ndarray
    dt: float
    T: float


@dataclass(frozen=True, eq=False)
class SwitchingModel:
    """A diffusion on [0, inf) that reflects inside F and is trapped by 0 outside F."""

    corr: CorrelationFunction
    on_clock: Clock
    off_clock: Clock
    schedule: RegimeSchedule | None  # None: reflect for all time
    btable: BTable = field(repr=False)

    @classmethod
    def l_diffusion(cls, corr, schedule=None, chart=None):
        """The L-diffusion (generator (1-b) d^2/dx^2), reflecting on F, absorbing off F."""
        chart = chart or chart_for(corr)
        clk = l_clock(chart)
        return cls(corr, clk, clk, schedule, BTable.of(corr))

    @classmethod
    def joining_difference(cls, corr, rho, schedule, chart=None):
        """Difference of a (rho, F)-joining; ``rho=None`` means the 1^- joining."""
        chart = chart or chart_for(corr)
        off = l_clock(chart)
        on = off if rho is None else rho_clock(chart, rho)
        return cls(corr, on, off, schedule, BTable.of(corr))

    def _args(self, T, tq):
        if self.schedule is None:
            on0, flips = True, np.zeros(0)
        else:
            on0, flips = self.schedule.switch_times(T)
        ev_t, ev_k = _events(flips, tq)
        return (ev_t, ev_k, on0, *self.on_clock.args(), *self.off_clock.args())

    @property
    def exact(self):
        return self.on_clock.ilr == 0.0 and self.off_clock.ilr == 0.0 and self.btable.kind == 1

    def run(self, n, seed, T=1.0, dt_w=DEFAULT_DT_W, dt=DEFAULT_DT, x0=0.0, query_times=(), offset=0):
        """Summaries of ``n`` replicas; identity clocks run at the coarser exact step."""
        if self.exact:
            dt_w = max(dt_w, EXACT_DT_W)
        keys = rng.replica_keys(seed, n, offset)
        x0a = np.full(n, float(x0))
        tq = np.asarray(sorted(query_times), dtype=float)
        if tq.size and (tq[0] < 0 or tq[-1] > T):
            raise ValueError("query times must lie in [0, T]")
        n_grid = int(round(T / dt)) + 1
        out_U = np.empty(n)
        out_sb = np.empty(n)
        out_end = np.empty(n)
        out_abs = np.empty(n)
        out_trap = np.empty(n)
        out_q = np.empty((n, tq.size))
        out_st = np.empty(n, dtype=np.int64)
        _switch_batch(keys, x0a, *self._args(T, tq), float(T), float(dt_w), float(dt), n_grid,
                      *self.btable.args(), _max_wiener(T, dt_w), out_U, out_sb, out_end, out_abs, out_trap, out_q, out_st)
        _check(out_st)
        # trapezoid: the kernel sums b over grid points with weight 1/2 at t=0
        last_b = np.asarray(self.corr(out_end if n_grid > 1 else x0a), dtype=float)
        int_b = dt * (out_sb - 0.5 * last_b)
        if self.btable.kind == 1:
            # b vanishes off 0, so only trapped time counts
            int_b = out_trap
        return SwitchingRun(out_U, int_b, T - int_b, out_end, out_abs, out_q, tq, dt, T)

    def path(self, seed, T=1.0, dt_w=DEFAULT_DT_W, dt=DEFAULT_DT, x0=0.0, replica=0):
        key = rng.seed_stream(seed, replica)
        n_grid = int(round(T / dt)) + 1
        grid = np.zeros(n_grid)
        U, _, _, ab, _, st = _switch_path(key, float(x0), *self._args(T, np.zeros(0)), float(T), float(dt_w),
                                       float(dt), n_grid, *self.btable.args(), _max_wiener(T, dt_w), grid)
        _check(np.array([st]))
        return Path(dt, grid, "x", None if ab < 0 else float(ab), float(U))


def _max_wiener(T, dt_w):
    return max(200.0 * T, 1e7 * dt_w)


def _check(status):
    if np.any(status == STATUS_STALL):
        raise ClockStall(
            f"clock stall in {int(np.sum(status == STATUS_STALL))} replica(s): "
            "the additive clock did not advance; refine dt_w"
        )


_CHARTS: dict = {}


def chart_for(corr: CorrelationFunction, xi_max=60.0, n_nodes=2400):
    """Cached scale chart (charts are immutable, so sharing is safe)."""
    k = (id(corr), xi_max, n_nodes)
    hit = _CHARTS.get(k)
    if hit is None or hit[0] is not corr:
        hit = (corr, build_chart(corr, xi_max, n_nodes))
        _CHARTS[k] = hit
    return hit[1]


# -- public single-path API ---------------------------------------------------------------


def simulate_L_reflecting(corr, T=1.0, dt_w=DEFAULT_DT_W, seed=0, dt=DEFAULT_DT, replica=0):
    """One path of the reflecting L-diffusion xi^+ started at 0 (x-coordinate)."""
    require_nonclassical(corr)
    return SwitchingModel.l_diffusion(corr, None).path(seed, T, dt_w, dt, replica=replica)


def simulate_difference_switching(corr, F: RegimeSchedule, seed=0, dt_w=DEFAULT_DT_W, dt=DEFAULT_DT, x0=0.0,
                                  replica=0):
    """|xi(t)| on [0, 1]: reflecting L-diffusion on F, 0 is a trap off F."""
    if corr.kind is not Kind.INDICATOR:
        require_nonclassical(corr)
    model = SwitchingModel.l_diffusion(corr, F)
    return model.path(seed, 1.0, dt_w, dt, x0=x0, replica=replica)


# -- L-hat zero-set kernel --------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _zero_one(key, eta, horizon, cuts, inside, z, H, h, il, dt_w, stop_on_hit, far_sigma, box, box_eps):
    """Run |eta + B(Ahat^{-1})| on [0, horizon]; report zeros.

    ``cuts`` are sorted flow-time points in (0, horizon) where target
    membership may change; ``inside[k]`` says whether the k-th piece
    (between consecutive cuts) belongs to the target set.
    Returns (target_hit, any_zero, first_zero_time, wiener_time, status).
    """
    st = np.zeros(1, dtype=np.uint64)
    cache = np.zeros(2)
    sq = math.sqrt(dt_w)
    W = eta
    A = 0.0
    U = 0.0
    ci = 0
    ncut = cuts.size
    hit = False
    anyz = False
    first = -1.0
    nbox = box.size
    HW = _H(z, H, h, il, W)
    k = 0
    while A < horizon:
        if stop_on_hit and hit:
            break
        k += 1
        if (k & 63) == 0 and W != 0.0:
            # remaining zeros impossible up to ~1e-12 if W cannot reach 0 in time
            aw = abs(W)
            amin = _h(z, H, h, il, 0.5 * aw)
            need = 2.0 * (horizon - A) / amin
            if 0.5 * aw > far_sigma * math.sqrt(need):
                break
        seg_end = cuts[ci] if ci < ncut else horizon
        dW = sq * rng.normal(key, st, cache)
        W1 = W + dW
        H1 = _H(z, H, h, il, W1)
        dA = 0.5 * dt_w * _mean_density(z, H, h, il, W, HW, W1, H1)
        if not (dA > 0.0) or not math.isfinite(dA):
            return hit, anyz, first, U, 1
        A1 = A + dA
        dtu = dt_w
        cut = A1 >= seg_end
        if cut:
            theta = (seg_end - A) / dA
            theta = min(1.0, max(0.0, theta))
            sd = math.sqrt(max(theta * (1.0 - theta), 0.0) * dt_w)
            W1 = W + theta * dW + sd * rng.normal(key, st, cache)
            H1 = _H(z, H, h, il, W1)
            dtu = theta * dt_w
            A1 = seg_end
        if dtu > 0.0 and _hits_zero(key, st, W, W1, dtu):
            anyz = True
            A_hit = A + _hit_fraction(key, st, cache, W, W1, dtu) * (A1 - A)
            if first < 0.0:
                first = A_hit
            if inside[ci]:
                hit = True
            if nbox > 0:
                ib = int(A_hit / box_eps)
                if ib < nbox:
                    box[ib] = 1
        U += dtu
        A = A1
        W = W1
        HW = H1
        if cut and ci < ncut:
            ci += 1
    return hit, anyz, first, U, 0


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _zero_batch(keys, eta, horizon, cuts, ncuts, inside, z, H, h, il, dt_w, stop_on_hit, far_sigma, boxes, box_eps,
                out_hit, out_any, out_first, out_U, out_status):
    for r in nb.prange(keys.size):
        nc = ncuts[r]
        box = boxes[r] if boxes.shape[0] > 0 else np.zeros(0, dtype=np.uint8)
        ht, az, fz, U, s = _zero_one(keys[r], eta[r], horizon[r], cuts[r, :nc], inside[r, :nc + 1], z, H, h, il,
                                     dt_w, stop_on_hit, far_sigma, box, box_eps)
        out_hit[r] = ht
        out_any[r] = az
        out_first[r] = fz
        out_U[r] = U
        out_status[r] = s


@dataclass
class ZeroRun:
    hit: np.ndarray
    any_zero: np.ndarray
    first_zero: np.ndarray
    wiener_time: np.ndarray
    boxes: np.ndarray | None


def run_lhat_zeros(clock: Clock, eta, horizon, targets, seed, dt_w=DEFAULT_DT_W, offset=0,
                   stop_on_hit=True, box_eps=None, n_boxes=0, far_sigma=7.5):
    """Batch of reflecting L-hat paths (xi-coordinate) started at ``eta``.

    ``targets[r]`` is a sorted list of disjoint closed flow-time intervals
    for replica ``r``; ``hit[r]`` reports a zero inside them.
    """
    n = len(eta)
    if clock.ilr == 0.0 and not n_boxes:
        dt_w = max(dt_w, EXACT_DT_W)
    keys = rng.replica_keys(seed, n, offset)
    eta = np.asarray(eta, dtype=float)
    horizon = np.asarray(horizon, dtype=float)
    width = max([2 * len(t) for t in targets] + [1])
    cuts = np.zeros((n, width))
    ncuts = np.zeros(n, dtype=np.int64)
    inside = np.zeros((n, width + 1), dtype=np.bool_)
    for r, ivs in enumerate(targets):
        pts = []
        flags = [False]
        for a, b in ivs:
            a, b = max(a, 0.0), min(b, horizon[r])
            if b < a:
                continue
            if a > 0.0:
                pts.append(a)
                flags.append(True)
            else:
                flags[-1] = True
            if b < horizon[r]:
                pts.append(b)
                flags.append(False)
        ncuts[r] = len(pts)
        cuts[r, : len(pts)] = pts
        inside[r, : len(flags)] = flags
    boxes = np.zeros((n, n_boxes), dtype=np.uint8) if n_boxes else np.zeros((0, 0), dtype=np.uint8)
    out_hit = np.zeros(n, dtype=np.bool_)
    out_any = np.zeros(n, dtype=np.bool_)
    out_first = np.zeros(n)
    out_U = np.zeros(n)
    out_st = np.zeros(n, dtype=np.int64)
    _zero_batch(keys, eta, horizon, cuts, ncuts, inside, *clock.args(), float(dt_w), stop_on_hit,
                float(far_sigma), boxes, float(box_eps or 1.0), out_hit, out_any, out_first, out_U, out_st)
    _check(out_st)
    return ZeroRun(out_hit, out_any, out_first, out_U, boxes if n_boxes else None)


def simulate_Lhat_reflecting_zeros(chart, x0_xi, T, dt_w=DEFAULT_DT_W, seed=0, dt=DEFAULT_DT, replica=0):
    """Zero cells (resolution ``dt``) of one reflecting L-hat path on [0, T]."""
    n_boxes = int(math.ceil(T / dt))
    run = run_lhat_zeros(lhat_clock(chart), [x0_xi], [T], [[(0.0, T)]], seed, dt_w, offset=replica,
                         stop_on_hit=False, box_eps=dt, n_boxes=n_boxes)
    return np.flatnonzero(run.boxes[0]), run


@nb.njit(cache=True, error_model="numpy")
def _lhat_path(key, eta, T, z, H, h, il, dt_w, dtg, n_grid, grid):
    st = np.zeros(1, dtype=np.uint64)
    cache = np.zeros(2)
    sq = math.sqrt(dt_w)
    W = eta
    A = 0.0
    U = 0.0
    HW = _H(z, H, h, il, W)
    grid[0] = abs(W)
    j = 1
    while j < n_grid:
        dW = sq * rng.normal(key, st, cache)
        W1 = W + dW
        H1 = _H(z, H, h, il, W1)
        dA = 0.5 * dt_w * _mean_density(z, H, h, il, W, HW, W1, H1)
        if not (dA > 0.0) or not math.isfinite(dA):
            return U, 1
        A1 = A + dA
        while j < n_grid and j * dtg <= A1:
            fr = (j * dtg - A) / dA
            grid[j] = abs(W + fr * dW)
            j += 1
        A = A1
        U += dt_w
        W = W1
        HW = H1
    return U, 0


def simulate_Lhat_reflecting(chart, x0_xi, T, dt_w=DEFAULT_DT_W, seed=0, dt=DEFAULT_DT, replica=0):
    """One reflecting L-hat path in the xi-coordinate, started at ``x0_xi``."""
    if x0_xi < 0:
        raise ValueError("x0_xi must be nonnegative")
    clk = lhat_clock(chart)
    n_grid = int(round(T / dt)) + 1
    grid = np.zeros(n_grid)
    U, st = _lhat_path(rng.seed_stream(seed, replica), float(x0_xi), float(T), *clk.args(), float(dt_w),
                       float(dt), n_grid, grid)
    _check(np.array([st]))
    return Path(dt, grid, "xi", None, float(U))
