"""Spectral sets of the Harris-flow noise and the probabilities built from them.

The random set sampled here is

    S = { t in [0, tau] : xi_hat(tau - t) = 0 },

with tau uniform on [0, 1] and xi_hat the reflecting L-hat diffusion started
from the law mu(dx) = -db(x) (carried to the xi-coordinate).  Its avoidance
and nonemptiness probabilities are cross-checked against the switching
difference of a (1-, F)-joining and against the finite-volume semigroups.
Finite spectral masses are only reached through generating functions of
rho-joinings, never by counting zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import rng
from .corrfn import CorrelationFunction, Kind, require_nonclassical, sample_mu
from .flows import JoiningSpec, joining_difference_endpoints
from .sde import DEFAULT_DT, DEFAULT_DT_W, RegimeSchedule, SwitchingModel, chart_for, lhat_clock, run_lhat_zeros
from .semigroup import Grid1D, SemigroupSolver, avoid_probability_pde


class FitError(RuntimeError):
    """Spectral-mass fit is ill-conditioned."""


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n_replicas: int
    master_seed: int | None
    method: str

    @classmethod
    def from_samples(cls, x, seed, method):
        x = np.asarray(x, dtype=float)
        n = x.size
        se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
        return cls(float(x.mean()), se, int(n), seed, method)

    @classmethod
    def exact(cls, value, method):
        return cls(float(value), 0.0, 0, None, method)

    def as_dict(self):
        return {"method": self.method, "value": self.value, "stderr": self.stderr,
                "n": self.n_replicas, "seed": self.master_seed}

    def agrees(self, other, k=3.0, slack=0.0):
        """True if |self - other| <= k * combined stderr + slack."""
        se = math.hypot(self.stderr, other.stderr)
        return abs(self.value - other.value) <= k * se + slack


@dataclass
class SpectralSample:
    tau: float
    zero_times: np.ndarray  # left ends of the resolution cells flagged as holding a point of S
    dt: float
    start_xi: float = 0.0

    @property
    def empty(self):
        return self.zero_times.size == 0


def _gate(corr):
    if corr.kind is not Kind.INDICATOR:
        require_nonclassical(corr)


def start_points(corr: CorrelationFunction, u):
    """Starting points xi_hat(0) in the xi-coordinate from uniforms ``u``."""
    x = np.atleast_1d(sample_mu(corr, u))
    if corr.kind is Kind.INDICATOR:
        return x
    return chart_for(corr).xi_of_x(x)


def _draws(corr, n, seed, offset, tau):
    u = rng.aux_uniforms(seed, n, 2, offset)
    taus = u[:, 0] if tau is None else np.full(n, float(tau))
    return taus, start_points(corr, u[:, 1])


def sample_spectral_set(corr, dt=DEFAULT_DT, seed=0, replica=0, dt_w=DEFAULT_DT_W, tau=None):
    """One realisation of S at resolution ``dt`` (``tau`` fixed if given)."""
    _gate(corr)
    taus, eta = _draws(corr, 1, seed, replica, tau)
    T = float(taus[0])
    n_boxes = max(1, int(math.ceil(T / dt)))
    run = run_lhat_zeros(lhat_clock(chart_for(corr)), eta, [T], [[(0.0, T)]], seed, dt_w, offset=replica,
                         stop_on_hit=False, box_eps=dt, n_boxes=n_boxes)
    cells = np.flatnonzero(run.boxes[0])
    # reverse time: the cell [k dt, (k+1) dt] of xi_hat maps to [tau - (k+1) dt, tau - k dt]
    t = np.sort(np.maximum(T - (cells + 1) * dt, 0.0))
    return SpectralSample(T, t, float(dt), float(eta[0]))


def _reverse_targets(schedule: RegimeSchedule, tau):
    """F intersected with [0, tau], in the reversed clock s = tau - t."""
    out = []
    for a, b in schedule.intervals:
        lo, hi = tau - min(b, tau), tau - a
        if a <= tau:
            out.append((max(lo, 0.0), hi))
    return sorted(out)


def spectral_hits(corr, schedule: RegimeSchedule, n, seed, dt_w=DEFAULT_DT_W, offset=0):
    """Indicators of {S meets F} for ``n`` independent samples."""
    _gate(corr)
    taus, eta = _draws(corr, n, seed, offset, None)
    targets = [_reverse_targets(schedule, t) for t in taus]
    run = run_lhat_zeros(lhat_clock(chart_for(corr)), eta, taus, targets, seed, dt_w, offset=offset,
                         stop_on_hit=True)
    return run.hit.astype(float)


@dataclass
class NonemptyResult:
    spectral: Estimate  # frequency of S nonempty
    occupation: Estimate  # E int_0^1 (1 - b(xi+(t))) dt
    clock: Estimate  # E A^{-1}(1) / 2
    deterministic: float | None = None

    def estimates(self):
        return [self.spectral, self.occupation, self.clock]


def prob_nonempty_three_ways(corr, n, seed, dt_w=DEFAULT_DT_W, dt=DEFAULT_DT, with_pde=False, grid=None):
    """P(S nonempty) as a spectral frequency, an occupation integral and a clock mean.

    The three estimates use disjoint replica ranges, so they are independent.
    """
    _gate(corr)
    whole = RegimeSchedule.whole()
    a = spectral_hits(corr, whole, n, seed, dt_w)
    model = SwitchingModel.l_diffusion(corr, None)
    rb = model.run(n, seed, 1.0, dt_w, dt, offset=n)
    rc = model.run(n, seed, 1.0, dt_w, dt, offset=2 * n)
    det = None
    if with_pde:
        det = 1.0 - avoid_probability_pde(corr, whole, solver=SemigroupSolver(corr, grid))
    return NonemptyResult(
        Estimate.from_samples(a, seed, "spectral_set"),
        Estimate.from_samples(rb.int_one_minus_b, seed, "occupation"),
        Estimate.from_samples(0.5 * rc.wiener_time, seed, "clock"),
        det,
    )


@dataclass
class AvoidResult:
    switching: Estimate  # int_0^1 E b(xi(t)) dt
    spectral: Estimate  # P(S avoids F)
    deterministic: float
    complement: Estimate | None = None  # P(S meets F)

    def estimates(self):
        return [self.switching, self.spectral, Estimate.exact(self.deterministic, "semigroup")]


def prob_avoid(corr, F: RegimeSchedule, n, seed, dt_w=DEFAULT_DT_W, dt=DEFAULT_DT, grid: Grid1D | None = None,
               solver: SemigroupSolver | None = None):
    """P(S avoids F) by the switching difference, by spectral samples and by semigroups."""
    _gate(corr)
    if F.empty:
        one = Estimate.exact(1.0, "convention")
        return AvoidResult(one, one, 1.0, Estimate.exact(0.0, "convention"))
    run = SwitchingModel.l_diffusion(corr, F).run(n, seed, 1.0, dt_w, dt)
    hits = spectral_hits(corr, F, n, seed, dt_w, offset=n)
    det = avoid_probability_pde(corr, F, grid=grid, solver=solver)
    return AvoidResult(
        Estimate.from_samples(run.int_b, seed, "switching"),
        Estimate.from_samples(1.0 - hits, seed, "spectral_set"),
        float(det),
        Estimate.from_samples(hits, seed, "spectral_set_meets"),
    )


def generating_function(corr, F: RegimeSchedule, rho_list, n, seed, dt_w=DEFAULT_DT_W):
    """G_F(rho) = 1 - E|xi(1)|^2 / 2 for each rho (common random numbers across rho)."""
    _gate(corr)
    out = []
    for rho in rho_list:
        spec = JoiningSpec(rho, F)
        xi = joining_difference_endpoints(corr, spec, n, seed, dt_w)
        out.append(Estimate.from_samples(1.0 - 0.5 * xi**2, seed, f"G(rho={rho})"))
    return out


# -- spectral masses ---------------------------------------------------------------------


@dataclass
class MassFit:
    masses: np.ndarray
    tail: float
    condition: float
    residual: float
    extrapolated: "Extrapolation | None" = None


@dataclass
class Extrapolation:
    value: float
    stderr: float
    rhos: np.ndarray = field(repr=False, default=None)
    form: str = "G(rho) = g1 + k (1 - rho)"


def extrapolate_one_minus(rhos, G, stderr=None):
    """Linear fit in (1 - rho) through the three largest rho; value at rho = 1."""
    rhos = np.asarray(rhos, dtype=float)
    G = np.asarray(G, dtype=float)
    idx = np.argsort(rhos)[-3:]
    if idx.size < 3:
        raise FitError("extrapolation needs three rho values")
    x = 1.0 - rhos[idx]
    w = None if stderr is None else 1.0 / np.maximum(np.asarray(stderr, dtype=float)[idx], 1e-12)
    coef, cov = np.polyfit(x, G[idx], 1, w=w, cov="unscaled" if w is not None else True)
    return Extrapolation(float(coef[1]), float(math.sqrt(max(cov[1, 1], 0.0))), rhos[idx])


def spectral_mass_fit(rhos, G, M, stderr=None, max_condition=1e10):
    """Nonnegative masses m_0..m_M with sum <= 1 fitted to G(rho) ~ sum m_k rho^k."""
    rhos = np.asarray(rhos, dtype=float)
    G = np.asarray(G, dtype=float)
    if np.unique(rhos).size < M + 2:
        raise FitError(f"need at least {M + 2} distinct rho values for order {M}")
    V = np.vander(rhos, M + 1, increasing=True)
    w = np.ones_like(G) if stderr is None else 1.0 / np.maximum(np.asarray(stderr, dtype=float), 1e-12)
    A = V * w[:, None]
    y = G * w
    cond = float(np.linalg.cond(A))
    if not math.isfinite(cond) or cond > max_condition:
        raise FitError(f"ill-conditioned spectral-mass fit (condition number {cond:.3g}); spread the rho grid")
    m, _ = optimize.nnls(A, y)
    if m.sum() > 1.0:
        # enforce the simplex face sum = 1 through a heavily weighted row
        big = 1e6 * max(1.0, float(np.abs(A).max()))
        m, _ = optimize.nnls(np.vstack([A, big * np.ones(M + 1)]), np.append(y, big))
        m = m / max(m.sum(), 1.0)
    res = float(np.sqrt(np.mean((V @ m - G) ** 2)))
    ext = None
    if rhos.size >= 3:
        ext = extrapolate_one_minus(rhos, G, stderr)
    return MassFit(m, float(1.0 - m.sum()), cond, res, ext)


def sample_spectral_sets(corr, n, seed, dt=DEFAULT_DT, dt_w=DEFAULT_DT_W, tau=None, offset=0, chunk=128):
    """``n`` independent samples of S (replicas ``offset .. offset+n-1``)."""
    _gate(corr)
    clock = lhat_clock(chart_for(corr))
    out = []
    for start in range(offset, offset + n, chunk):
        m = min(chunk, offset + n - start)
        taus, eta = _draws(corr, m, seed, start, tau)
        n_boxes = max(1, int(math.ceil(float(taus.max()) / dt)))
        run = run_lhat_zeros(clock, eta, taus, [[(0.0, t)] for t in taus], seed, dt_w, offset=start,
                             stop_on_hit=False, box_eps=dt, n_boxes=n_boxes)
        for r in range(m):
            cells = np.flatnonzero(run.boxes[r])
            t = np.sort(np.maximum(taus[r] - (cells + 1) * dt, 0.0))
            out.append(SpectralSample(float(taus[r]), t, float(dt), float(eta[r])))
    return out
