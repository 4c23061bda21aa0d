"""n-point motions of Harris flows and two-copy joinings.

A single flow moves finitely many particles by Euler steps whose Gaussian
increments have covariance ``b(x_i - x_j) dt``.  Two particles that meet
coalesce and share one driving coordinate from then on.  A joining of two
copies multiplies the cross-copy covariances by ``rho`` on the set F and by
1 elsewhere (the copies follow one flow off F).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import stats

from . import rng
from .corrfn import CorrelationFunction, Kind, require_nonclassical
from .sde import DEFAULT_DT_W, BTable, Path, RegimeSchedule, SwitchingModel, _b_nb, _events, chart_for

MERGE_TOL = 1e-5
JITTER = 1e-12
DEFAULT_FLOW_DT = 1e-3

STATUS_CHOLESKY = 2


class CholeskyError(RuntimeError):
    """The correlation matrix of a particle configuration is not positive-definite."""


@dataclass(frozen=True)
class JoiningSpec:
    """Coupling of two flow copies: ``rho`` in [0, 1), ``"one_minus"`` or ``"one_plus"``."""

    rho: object
    F: RegimeSchedule = RegimeSchedule.whole()

    def __post_init__(self):
        r = self.rho
        if isinstance(r, str):
            if r not in ("one_minus", "one_plus"):
                raise ValueError(f"rho must be in [0, 1), 'one_minus' or 'one_plus', got {r!r}")
        elif not (0.0 <= float(r) < 1.0):
            raise ValueError(f"rho must lie in [0, 1), got {r}")

    @property
    def is_identity(self):
        return self.rho == "one_plus" or self.F.empty


@dataclass
class FlowSample:
    """Particle paths of one flow on a uniform grid.

    ``clusters[k, i]`` is the smallest index of the block containing
    particle ``i`` after step ``k``; ``merges`` lists (time, i, j).
    """

    dt: float
    points: np.ndarray
    trajectories: np.ndarray
    clusters: np.ndarray
    merges: list

    @property
    def times(self):
        return self.dt * np.arange(self.trajectories.shape[0])

    def partition_at(self, k):
        lab = self.clusters[k]
        return [tuple(np.flatnonzero(lab == c)) for c in np.unique(lab)]


# -- numba pieces ---------------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _cholesky(S, L):
    """In-place lower Cholesky factor; False if S is not positive-definite."""
    n = S.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = S[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, n):
            L[i, j] = 0.0
    return True


@nb.njit(cache=True, error_model="numpy")
def _factor(S, L):
    if _cholesky(S, L):
        return True
    for i in range(S.shape[0]):
        S[i, i] += JITTER
    return _cholesky(S, L)


@nb.njit(cache=True, error_model="numpy")
def _should_merge(key, st, d0, d1, var, continuous):
    """Meeting rule for a pair whose gap moved from d0 > 0 to d1 over one step."""
    if d1 <= 0.0:
        return True
    if var <= 0.0:
        return False
    e = 2.0 * d0 * d1 / var
    if continuous:
        # only near-touching pairs whose bridge most likely crossed
        return d1 < MERGE_TOL and e < math.log(2.0)
    if e > 745.0:
        return False
    return rng.uniform(key, st) < math.exp(-e)


@nb.njit(cache=True, error_model="numpy")
def _npoint_one(key, x0, T, dt, bk, bc, ba, bk0, bknots, bcoef, blast, traj, labels, mt, mi, mj):
    """Euler scheme for one flow; particles start sorted and distinct."""
    st = np.zeros(1, dtype=np.uint64)
    cache = np.zeros(2)
    n = x0.size
    n_steps = int(round(T / dt))
    pos = x0.copy()
    root = np.arange(n)
    sq = math.sqrt(dt)
    S = np.zeros((n, n))
    L = np.zeros((n, n))
    act = np.zeros(n, dtype=np.int64)
    z = np.zeros(n)
    new = np.zeros(n)
    nm = 0
    continuous = bk != 1
    record = traj.shape[0] > 0
    if record:
        for i in range(n):
            traj[0, i] = pos[i]
            labels[0, i] = i
    for k in range(n_steps):
        na = 0
        for i in range(n):
            if root[i] == i:
                act[na] = i
                na += 1
        for p in range(na):
            for q in range(p + 1):
                v = _b_nb(bk, bc, ba, bk0, bknots, bcoef, blast, pos[act[p]] - pos[act[q]])
                S[p, q] = v
                S[q, p] = v
        Sv = S[:na, :na]
        Lv = L[:na, :na]
        if not _factor(Sv, Lv):
            return STATUS_CHOLESKY, nm
        for p in range(na):
            z[p] = rng.normal(key, st, cache)
        for p in range(na):
            s = 0.0
            for q in range(p + 1):
                s += Lv[p, q] * z[q]
            new[p] = pos[act[p]] + sq * s
        # adjacent blocks in the (preserved) order are the only ones that can meet
        t1 = (k + 1) * dt
        for p in range(na - 1, 0, -1):
            lo, hi = act[p - 1], act[p]
            d0 = pos[hi] - pos[lo]
            d1 = new[p] - new[p - 1]
            var = 2.0 * (1.0 - _b_nb(bk, bc, ba, bk0, bknots, bcoef, blast, d0)) * dt
            if _should_merge(key, st, d0, d1, var, continuous):
                mid = 0.5 * (new[p] + new[p - 1])
                new[p - 1] = mid
                new[p] = mid
                for i in range(n):
                    if root[i] == hi:
                        root[i] = lo
                if nm < mt.size:
                    mt[nm] = t1
                    mi[nm] = lo
                    mj[nm] = hi
                nm += 1
        for p in range(na):
            pos[act[p]] = new[p]
        for i in range(n):
            pos[i] = pos[root[i]]
        if record:
            for i in range(n):
                traj[k + 1, i] = pos[i]
                labels[k + 1, i] = root[i]
    return 0, nm


@nb.njit(cache=True, error_model="numpy")
def _npoint_path(key, x0, T, dt, bk, bc, ba, bk0, bknots, bcoef, blast, traj, labels, mt, mi, mj):
    return _npoint_one(key, x0, T, dt, bk, bc, ba, bk0, bknots, bcoef, blast, traj, labels, mt, mi, mj)


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _npoint_batch(keys, x0, T, dt, bk, bc, ba, bk0, bknots, bcoef, blast, out_pos, out_root, out_first, out_status):
    n = x0.size
    n_steps = int(round(T / dt))
    for r in nb.prange(keys.size):
        traj = np.zeros((n_steps + 1, n))
        labels = np.zeros((n_steps + 1, n), dtype=np.int64)
        mt = np.zeros(max(n, 1))
        mi = np.zeros(max(n, 1), dtype=np.int64)
        mj = np.zeros(max(n, 1), dtype=np.int64)
        stt, nm = _npoint_one(keys[r], x0, T, dt, bk, bc, ba, bk0, bknots, bcoef, blast, traj, labels, mt, mi, mj)
        out_status[r] = stt
        for i in range(n):
            out_pos[r, i] = traj[n_steps, i]
            out_root[r, i] = labels[n_steps, i]
        out_first[r] = mt[0] if nm > 0 else -1.0


def _validate_points(xs):
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 1 or xs.size == 0:
        raise ValueError("need at least one starting point")
    if np.unique(xs).size != xs.size:
        raise ValueError("starting points must be distinct")
    return xs


def simulate_npoint(corr: CorrelationFunction, xs, T=1.0, dt=DEFAULT_FLOW_DT, seed=0, replica=0):
    """One sample of the n-point motion started from ``xs``."""
    xs = _validate_points(xs)
    order = np.argsort(xs)
    x0 = np.ascontiguousarray(xs[order])
    n = x0.size
    n_steps = int(round(T / dt))
    traj = np.zeros((n_steps + 1, n))
    labels = np.zeros((n_steps + 1, n), dtype=np.int64)
    mt = np.zeros(n)
    mi = np.zeros(n, dtype=np.int64)
    mj = np.zeros(n, dtype=np.int64)
    st, nm = _npoint_path(rng.seed_stream(seed, replica), x0, float(T), float(dt), *BTable.of(corr).args(),
                          traj, labels, mt, mi, mj)
    if st == STATUS_CHOLESKY:
        raise CholeskyError("correlation matrix not positive-definite at configuration")
    # back to the caller's labelling
    inv = np.empty(n, dtype=np.int64)
    inv[order] = np.arange(n)
    traj_out = np.empty_like(traj)
    traj_out[:, order] = traj
    lab_sorted = order[labels]  # representative in caller labels
    lab_out = np.empty_like(labels)
    lab_out[:, order] = lab_sorted
    # canonical representative: smallest caller index in each block
    for k in range(lab_out.shape[0]):
        row = lab_out[k]
        for c in np.unique(row):
            members = row == c
            row[members] = np.flatnonzero(members).min()
    merges = [(float(mt[q]), int(order[mi[q]]), int(order[mj[q]])) for q in range(min(nm, n))]
    return FlowSample(float(dt), xs, traj_out, lab_out, merges)


@dataclass
class NPointBatch:
    final: np.ndarray  # (n_replicas, n) positions at T, sorted-start order
    blocks: np.ndarray  # block representatives at T
    first_merge: np.ndarray  # time of the first merge, -1 if none


def run_npoint(corr, xs, n, seed, T=1.0, dt=DEFAULT_FLOW_DT, offset=0):
    """Replica batch of n-point motions (starting points sorted ascending)."""
    x0 = np.ascontiguousarray(np.sort(_validate_points(xs)))
    keys = rng.replica_keys(seed, n, offset)
    out_pos = np.zeros((n, x0.size))
    out_root = np.zeros((n, x0.size), dtype=np.int64)
    out_first = np.zeros(n)
    out_st = np.zeros(n, dtype=np.int64)
    _npoint_batch(keys, x0, float(T), float(dt), *BTable.of(corr).args(), out_pos, out_root, out_first, out_st)
    if np.any(out_st == STATUS_CHOLESKY):
        raise CholeskyError("correlation matrix not positive-definite at configuration")
    return NPointBatch(out_pos, out_root, out_first)


# -- two copies -----------------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _pair_one(key, ev_t, ev_k, on0, rho, T, dt, bk, bc, ba, bk0, bknots, bcoef, blast):
    """X and X' from 0 under a (rho, F)-joining; returns X(T), X'(T)."""
    st = np.zeros(1, dtype=np.uint64)
    cache = np.zeros(2)
    n_steps = int(round(T / dt))
    sq = math.sqrt(dt)
    x = 0.0
    y = 0.0
    on = on0
    ei = 0
    stuck = not on
    continuous = bk != 1
    for k in range(n_steps):
        t0 = k * dt
        while ei < ev_t.size and ev_t[ei] <= t0 + 1e-12:
            on = not on
            ei += 1
            stuck = stuck and not on
        if stuck:
            z = rng.normal(key, st, cache)
            x += sq * z
            y = x
            continue
        c = (rho if on else 1.0) * _b_nb(bk, bc, ba, bk0, bknots, bcoef, blast, x - y)
        s = math.sqrt(max(1.0 - c * c, 0.0))
        z1 = rng.normal(key, st, cache)
        z2 = rng.normal(key, st, cache)
        x1 = x + sq * z1
        y1 = y + sq * (c * z1 + s * z2)
        if not on:
            d0 = x - y
            d1 = x1 - y1
            if d0 < 0.0:
                d0, d1 = -d0, -d1
            var = 2.0 * (1.0 - c) * dt
            if _should_merge(key, st, d0, d1, var, continuous):
                x1 = 0.5 * (x1 + y1)
                y1 = x1
                stuck = True
        x = x1
        y = y1
    return x, y


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _pair_batch(keys, ev_t, ev_k, on0, rho, T, dt, bk, bc, ba, bk0, bknots, bcoef, blast, out):
    for r in nb.prange(keys.size):
        a, b = _pair_one(keys[r], ev_t, ev_k, on0, rho, T, dt, bk, bc, ba, bk0, bknots, bcoef, blast)
        out[r, 0] = a
        out[r, 1] = b


def simulate_joint_pair(corr, spec: JoiningSpec, n, seed, T=1.0, dt=DEFAULT_FLOW_DT, offset=0):
    """(X_{0,T}(0), X'_{0,T}(0)) for ``n`` replicas of a (rho, F)-joining, by Euler steps."""
    if isinstance(spec.rho, str):
        raise ValueError("the joint two-copy law is only available for rho in [0, 1)")
    on0, flips = spec.F.switch_times(T)
    ev_t, ev_k = _events(flips, np.zeros(0))
    keys = rng.replica_keys(seed, n, offset)
    out = np.zeros((n, 2))
    _pair_batch(keys, ev_t, ev_k, on0, float(spec.rho), float(T), float(dt), *BTable.of(corr).args(), out)
    return out


def difference_model(corr, spec: JoiningSpec):
    rho = None if spec.rho == "one_minus" else float(spec.rho)
    return SwitchingModel.joining_difference(corr, rho, spec.F, chart_for(corr))


def simulate_joining_difference(corr, spec: JoiningSpec, seed=0, dt_w=DEFAULT_DT_W, dt=1e-4, replica=0):
    """|X_{0,t}(0) - X'_{0,t}(0)| on [0, 1] under the joining ``spec``."""
    if corr.kind is not Kind.INDICATOR:
        require_nonclassical(corr)
    n_grid = int(round(1.0 / dt)) + 1
    if spec.rho == "one_plus":
        return Path(dt, np.zeros(n_grid), "x", 0.0, 0.0)
    return difference_model(corr, spec).path(seed, 1.0, dt_w, dt, replica=replica)


def joining_difference_endpoints(corr, spec: JoiningSpec, n, seed, dt_w=DEFAULT_DT_W, offset=0):
    """|xi(1)| for ``n`` replicas of the joining difference."""
    if spec.rho == "one_plus":
        return np.zeros(n)
    return difference_model(corr, spec).run(n, seed, 1.0, dt_w, 1.0, offset=offset).end_value


def joint_vs_difference_check(corr, rho, n_samples, seed, dt=DEFAULT_FLOW_DT, dt_w=DEFAULT_DT_W):
    """KS distance at t=1 between |X - X'| from the joint Euler scheme and the difference engine."""
    if n_samples <= 0:
        raise ValueError("empty sample")
    spec = JoiningSpec(float(rho), RegimeSchedule.whole())
    pair = simulate_joint_pair(corr, spec, n_samples, seed, 1.0, dt)
    joint = np.abs(pair[:, 0] - pair[:, 1])
    # a disjoint stream range keeps the two samples independent
    diff = joining_difference_endpoints(corr, spec, n_samples, seed, dt_w, offset=n_samples)
    return float(stats.ks_2samp(joint, diff).statistic)
