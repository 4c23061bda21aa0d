"""Finite-volume semigroups of the L and L-hat diffusions on [0, X_max].

Both generators are written as d/dm d/ds on one x-grid:

    L     = (1-b) d^2/dx^2      scale s = x,      speed m = xi(x)
    L-hat = d/dx (1-b) d/dx     scale s = xi(x),  speed m = x

where xi(x) = int_0^x dy / (1 - b(y)).  Node ``i`` carries the speed mass
of its dual cell and neighbours are joined by conductances
``1 / (s[i+1] - s[i])``.  The generator matrix is then ``M^{-1} D`` with ``D``
symmetric, so the discrete operators keep the self-adjointness that makes
the duality relations hold up to time-stepping error.

Boundary at 0: ``PLUS`` is zero flux (reflection), ``MINUS`` freezes node 0
(stopped process), ``ZERO`` freezes node 0 at value 0 (killing).  The far
end is zero flux.  Time stepping is backward Euler with a reused LU.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, sparse
from scipy.sparse import linalg as spla

from .corrfn import CorrelationFunction, Kind, ScaleSpeedChart
from .sde import RegimeSchedule, chart_for

DEFAULT_STEP = 1e-4


class Operator(str, enum.Enum):
    L = "L"
    LHAT = "Lhat"


class Boundary(str, enum.Enum):
    PLUS = "plus"
    MINUS = "minus"
    ZERO = "zero"


class GridError(RuntimeError):
    """The truncated grid loses too much mass over the requested horizon."""


class ResolventError(RuntimeError):
    """The decaying solution has not decayed by the end of the chart."""


@dataclass(frozen=True)
class SemigroupLabel:
    operator: Operator
    boundary: Boundary

    def __str__(self):
        hat = "hat" if self.operator is Operator.LHAT else ""
        return f"T{hat}{self.boundary.value}"


PLUS = SemigroupLabel(Operator.L, Boundary.PLUS)
MINUS = SemigroupLabel(Operator.L, Boundary.MINUS)
ZERO = SemigroupLabel(Operator.L, Boundary.ZERO)
HAT_PLUS = SemigroupLabel(Operator.LHAT, Boundary.PLUS)
HAT_MINUS = SemigroupLabel(Operator.LHAT, Boundary.MINUS)
HAT_ZERO = SemigroupLabel(Operator.LHAT, Boundary.ZERO)


@dataclass(frozen=True, eq=False)
class Grid1D:
    """Nodes on [0, x_max]: geometric from ``h_min`` up to spacing ``h_max``, then uniform."""

    nodes: np.ndarray
    h_min: float
    ratio: float
    h_max: float
    x_max: float

    @classmethod
    def build(cls, h_min=1e-6, ratio=1.1, h_max=0.01, x_max=16.0):
        if not (1.0 < ratio <= 1.2):
            raise ValueError(f"refinement ratio must lie in (1, 1.2], got {ratio}")
        if not (0 < h_min <= h_max < x_max):
            raise ValueError("need 0 < h_min <= h_max < x_max")
        pts = [0.0]
        h = h_min
        while h < h_max and pts[-1] + h < x_max:
            pts.append(pts[-1] + h)
            h *= ratio
        n_uni = int(math.ceil((x_max - pts[-1]) / h_max))
        tail = np.linspace(pts[-1], x_max, n_uni + 1)[1:]
        return cls(np.concatenate([pts, tail]), h_min, ratio, h_max, x_max)

    def refine(self):
        """Halve every spacing (the geometric ratio becomes its square root)."""
        return Grid1D.build(self.h_min / 2, math.sqrt(self.ratio), self.h_max / 2, self.x_max)

    @property
    def size(self):
        return self.nodes.size

    @property
    def edges(self):
        """Dual-cell boundaries: 0, midpoints, x_max."""
        x = self.nodes
        return np.concatenate([[0.0], 0.5 * (x[1:] + x[:-1]), [x[-1]]])


def _xi(corr, chart, x):
    if corr.kind is Kind.INDICATOR:
        return np.asarray(x, dtype=float)
    return chart.xi_of_x(x)


class SemigroupSolver:
    """Discrete T, T-hat semigroups of one correlation function on one grid."""

    def __init__(self, corr: CorrelationFunction, grid: Grid1D | None = None, step=DEFAULT_STEP,
                 chart: ScaleSpeedChart | None = None):
        self.corr = corr
        self.grid = grid or Grid1D.build()
        self.step = float(step)
        self.chart = chart if chart is not None else chart_for(corr)
        x = self.grid.nodes
        e = self.grid.edges
        xi_n = _xi(corr, self.chart, x)
        xi_e = _xi(corr, self.chart, e)
        # speed masses and conductances per operator
        self._mass = {Operator.L: np.diff(xi_e), Operator.LHAT: np.diff(e)}
        self._cond = {Operator.L: 1.0 / np.diff(x), Operator.LHAT: 1.0 / np.diff(xi_n)}
        self._xi_edges = xi_e
        self._lu: dict = {}

    # -- assembly ---------------------------------------------------------------------

    def generator(self, label: SemigroupLabel):
        """Sparse generator matrix Q (rows act on nodal values)."""
        m = self._mass[label.operator]
        c = self._cond[label.operator]
        n = m.size
        lower = np.zeros(n - 1)
        upper = np.zeros(n - 1)
        diag = np.zeros(n)
        upper[:] = c / m[:-1]
        lower[:] = c / m[1:]
        diag[:-1] -= c / m[:-1]
        diag[1:] -= c / m[1:]
        if label.boundary is not Boundary.PLUS:
            upper[0] = 0.0
            diag[0] = 0.0
        return sparse.diags([lower, diag, upper], [-1, 0, 1], format="csc")

    def _factor(self, label, h):
        k = (label, h)
        lu = self._lu.get(k)
        if lu is None:
            A = sparse.identity(self.grid.size, format="csc") - h * self.generator(label)
            lu = spla.splu(A.tocsc())
            self._lu[k] = lu
        return lu

    def _steps(self, t):
        n = max(1, int(math.ceil(t / self.step - 1e-9)))
        return n, t / n

    # -- action -----------------------------------------------------------------------

    def apply(self, label: SemigroupLabel, f, t):
        """Nodal values of ``T_t f`` for nodal data ``f``."""
        u = np.array(f, dtype=float)
        if label.boundary is Boundary.ZERO:
            u[0] = 0.0
        if t < 0:
            raise ValueError("t must be nonnegative")
        if t == 0:
            return u
        n, h = self._steps(t)
        lu = self._factor(label, h)
        for _ in range(n):
            u = lu.solve(u)
        return u

    def evolve_measure(self, label: SemigroupLabel, p, t):
        """Push a nodal probability vector forward by ``t`` (adjoint action)."""
        p = np.array(p, dtype=float)
        if t == 0:
            return p
        n, h = self._steps(t)
        lu = self._factor(label, h)
        for _ in range(n):
            p = lu.solve(p, trans="T")
        return p

    def product(self, labels, gaps, f):
        """``T1_{g1} T2_{g2} ... TK_{gK} f``: the rightmost factor acts first."""
        u = np.asarray(f, dtype=float)
        for lab, g in zip(reversed(labels), reversed(gaps)):
            u = self.apply(lab, u, g)
        return u

    # -- data and evaluation -----------------------------------------------------------

    def speed_measure(self, operator: Operator, lo, hi):
        """Speed measure of [lo, hi] for the chosen operator."""
        if operator is Operator.L:
            a, b = _xi(self.corr, self.chart, np.array([lo, hi]))
            return float(b - a)
        return float(hi - lo)

    def indicator(self, operator: Operator, lo, hi):
        """Cell-averaged (in speed measure) nodal data of 1_{[lo, hi]}."""
        e = self.grid.edges
        lo = max(lo, 0.0)
        hi = min(hi, self.grid.x_max)
        if operator is Operator.L:
            me = self._xi_edges
            cl = np.clip(e, lo, hi)
            mc = _xi(self.corr, self.chart, cl)
        else:
            me = e
            mc = np.clip(e, lo, hi)
        frac = np.diff(mc) / np.diff(me)
        return np.clip(frac, 0.0, 1.0)

    def nodal(self, fn):
        return np.asarray(fn(self.grid.nodes), dtype=float)

    def evaluate(self, u, x):
        """Linear interpolation of nodal values at ``x``."""
        return np.interp(x, self.grid.nodes, u)

    def mass_probe(self, horizon, x_probe=2.0, tol=1e-8):
        """Largest probability of reaching the outer quarter from [0, x_probe] by ``horizon``."""
        g = self.grid
        worst = 0.0
        for lab in (PLUS, HAT_PLUS):
            f = self.indicator(lab.operator, 0.75 * g.x_max, g.x_max)
            u = self.apply(lab, f, horizon)
            worst = max(worst, float(np.max(u[g.nodes <= x_probe])))
        if worst >= tol:
            raise GridError(
                f"grid/horizon mismatch: mass {worst:.2e} reaches the far boundary by t={horizon}; increase x_max"
            )
        return worst


# -- module-level operations -------------------------------------------------------------


def apply_semigroup(label: SemigroupLabel, corr, f, t, grid: Grid1D | None = None, step=DEFAULT_STEP):
    """``T_t f`` on the grid; ``f`` is a callable of x or nodal values."""
    s = SemigroupSolver(corr, grid, step)
    data = s.nodal(f) if callable(f) else np.asarray(f, dtype=float)
    return s.apply(label, data, t)


@dataclass
class DualityResidual:
    plus_hatzero: float
    minus_hatplus: float
    values: dict = field(default_factory=dict)

    def max(self):
        return max(self.plus_hatzero, self.minus_hatplus)


def duality_single(solver: SemigroupSolver, t, x, y):
    """Residuals of the two one-step duality relations at (t, x, y)."""
    xmax = solver.grid.x_max
    f_l = solver.indicator(Operator.L, 0.0, y)
    f_h = solver.indicator(Operator.LHAT, x, xmax)
    tp = float(solver.evaluate(solver.apply(PLUS, f_l, t), x))
    tm = float(solver.evaluate(solver.apply(MINUS, f_l, t), x))
    h0 = float(solver.evaluate(solver.apply(HAT_ZERO, f_h, t), y))
    hp = float(solver.evaluate(solver.apply(HAT_PLUS, f_h, t), y))
    vals = {"T+": tp, "T-": tm, "That0": h0, "That+": hp}
    return DualityResidual(abs(tp - h0), abs(tm - hp), vals)


def check_duality_single(corr, t, x, y, grid: Grid1D | None = None, step=DEFAULT_STEP):
    """|T+ 1[0,y](x) - That0 1[x,inf)(y)| and |T- 1[0,y](x) - That+ 1[x,inf)(y)|."""
    if t <= 0:
        raise ValueError("t must be positive")
    return duality_single(SemigroupSolver(corr, grid, step), t, x, y)


def alternating_labels(k):
    """Left-hand factors +,-,+,... and their duals hat0,hat+,hat0,..."""
    left = [PLUS if i % 2 == 0 else MINUS for i in range(k)]
    right = [HAT_ZERO if i % 2 == 0 else HAT_PLUS for i in range(k)]
    return left, right


def alternating_values(solver: SemigroupSolver, times, x, y):
    """Both sides of the alternating duality for increasing ``times``."""
    times = np.asarray(times, dtype=float)
    if times.size < 3 or np.any(np.diff(times) < 0):
        raise ValueError("need at least three nondecreasing times")
    gaps = np.diff(times)
    left, right = alternating_labels(gaps.size)
    f_l = solver.indicator(Operator.L, 0.0, y)
    f_h = solver.indicator(Operator.LHAT, x, solver.grid.x_max)
    lhs = solver.evaluate(solver.product(left, gaps, f_l), x)
    # the hat product is reversed: the first gap acts first on the data
    rhs = solver.evaluate(solver.product(right[::-1], gaps[::-1], f_h), y)
    return float(lhs), float(rhs)


def check_duality_alternating(corr, times, x, y, grid: Grid1D | None = None, step=DEFAULT_STEP):
    """Residual of the alternating-product duality at (x, y)."""
    lhs, rhs = alternating_values(SemigroupSolver(corr, grid, step), times, x, y)
    return abs(lhs - rhs)


# -- switching expectations ----------------------------------------------------------------


def _pieces(schedule: RegimeSchedule, horizon=1.0):
    """(start, end, label) for the reflect/absorb pieces of [0, horizon]."""
    on, flips = schedule.switch_times(horizon)
    pts = [0.0, *flips.tolist(), horizon]
    out = []
    for a, b in zip(pts[:-1], pts[1:]):
        if b > a:
            out.append((a, b, PLUS if on else MINUS))
        on = not on
    return out


@dataclass
class SwitchingCurve:
    """t -> E[b(xi(t))] for the switching difference started at 0."""

    times: np.ndarray
    expected_b: np.ndarray

    def integral(self):
        return float(integrate.trapezoid(self.expected_b, self.times))


def expected_b_curve(solver: SemigroupSolver, schedule: RegimeSchedule, horizon=1.0):
    """Forward evolution of the law of |xi| from the origin through the regimes."""
    b = solver.nodal(solver.corr.__call__)
    b[0] = 1.0
    p = np.zeros(solver.grid.size)
    p[0] = 1.0
    ts = [0.0]
    vals = [float(p @ b)]
    for a, c, lab in _pieces(schedule, horizon):
        n, h = solver._steps(c - a)
        lu = solver._factor(lab, h)
        for k in range(n):
            p = lu.solve(p, trans="T")
            ts.append(a + (k + 1) * h)
            vals.append(float(p @ b))
    return SwitchingCurve(np.array(ts), np.array(vals))


def avoid_probability_pde(corr, schedule: RegimeSchedule, grid: Grid1D | None = None, step=DEFAULT_STEP,
                          solver: SemigroupSolver | None = None):
    """Deterministic int_0^1 E[b(xi(t))] dt; the empty set gives 1."""
    if schedule.empty:
        return 1.0
    solver = solver or SemigroupSolver(corr, grid, step)
    return expected_b_curve(solver, schedule).integral()


def nonempty_probability_pde(corr, grid: Grid1D | None = None, step=DEFAULT_STEP,
                             solver: SemigroupSolver | None = None):
    """1 - int_0^1 (T+_t b)(0) dt."""
    return 1.0 - avoid_probability_pde(corr, RegimeSchedule.whole(), grid, step, solver)


# -- resolvent at the origin ---------------------------------------------------------------


def _a_fn(chart: ScaleSpeedChart):
    if chart.corr.kind is Kind.INDICATOR:
        return lambda xi: np.ones_like(np.asarray(xi, dtype=float))
    return chart.a_of_xi


def resolvent_at_origin(chart: ScaleSpeedChart, lam, decay=40.0, rtol=1e-10):
    """Resolvent density at (0, 0) of the reflecting L-hat diffusion (xi-coordinate).

    Integrates the Riccati equation ``r' = lam a - r^2`` for the log-derivative
    of the decaying solution of ``u'' = lam a u`` backward from a point where
    ``int sqrt(lam a) >= decay``.  Returns ``-1 / r(0)``.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    a = _a_fn(chart)
    xi_cap = float(chart.xi[-1]) if chart.corr.kind is not Kind.INDICATOR else math.inf
    # march outward until the WKB phase reaches ``decay``
    xi_end, phase, step = 0.0, 0.0, 1.0 / math.sqrt(lam)
    while phase < decay:
        nxt = xi_end + step
        if nxt > xi_cap:
            raise ResolventError(
                f"Xi_max too small: decay {phase:.1f} < {decay} at the chart end for lambda={lam:g}"
            )
        mid = 0.5 * (xi_end + nxt)
        phase += step * math.sqrt(lam * float(a(np.array([mid]))[0]))
        xi_end = nxt
        step *= 1.05
    a_end = float(a(np.array([xi_end]))[0])
    r_end = -math.sqrt(lam * a_end)

    def rhs(s, r):
        return lam * a(np.array([s]))[0] - r * r

    sol = integrate.solve_ivp(rhs, (xi_end, 0.0), [r_end], method="LSODA", rtol=rtol, atol=1e-12 * math.sqrt(lam))
    if not sol.success:
        raise ResolventError(sol.message)
    r0 = float(sol.y[0, -1])
    if not r0 < 0:
        raise ResolventError(f"non-decaying solution at lambda={lam:g}")
    return -1.0 / r0
