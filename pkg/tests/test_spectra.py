import math

import numpy as np
import pytest

from harrisflow.corrfn import CorrelationError, CorrelationFunction
from harrisflow.sde import RegimeSchedule
from harrisflow.semigroup import avoid_probability_pde
from harrisflow.spectra import (
    Estimate,
    FitError,
    extrapolate_one_minus,
    generating_function,
    prob_avoid,
    prob_nonempty_three_ways,
    sample_spectral_set,
    sample_spectral_sets,
    spectral_hits,
    spectral_mass_fit,
    start_points,
)

EXP = CorrelationFunction.exp_power(1.0, 0.5)
ARR = CorrelationFunction.indicator()
WHOLE = RegimeSchedule.whole()
N = 2000


def test_estimate_helpers():
    e = Estimate.from_samples([0.0, 1.0, 1.0, 0.0], 3, "m")
    assert e.value == 0.5 and e.n_replicas == 4
    assert e.stderr == pytest.approx(math.sqrt(1 / 3) / 2)
    assert set(e.as_dict()) == {"method", "value", "stderr", "n", "seed"}
    assert e.agrees(Estimate.exact(0.5, "x"))


def test_mass_fit_synthetic_linear():
    rhos = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 0.9])
    fit = spectral_mass_fit(rhos, rhos, 3)
    np.testing.assert_allclose(fit.masses, [0, 1, 0, 0], atol=1e-8)
    assert fit.tail == pytest.approx(0.0, abs=1e-8)


def test_mass_fit_black():
    rhos = np.array([0.0, 0.3, 0.5, 0.7, 0.9])
    fit = spectral_mass_fit(rhos, np.zeros(5), 3)
    np.testing.assert_allclose(fit.masses, 0.0, atol=1e-12)
    assert fit.tail == pytest.approx(1.0)


def test_mass_fit_sum_capped():
    rhos = np.array([0.0, 0.25, 0.5, 0.75, 0.9])
    fit = spectral_mass_fit(rhos, 1.2 + 0 * rhos, 2)
    assert fit.masses.sum() <= 1.0 + 1e-9
    assert np.all(fit.masses >= 0)


def test_mass_fit_errors():
    with pytest.raises(FitError, match="distinct"):
        spectral_mass_fit([0.1, 0.2, 0.3], [0, 0, 0], 3)
    clustered = 0.5 + 1e-7 * np.arange(6)
    with pytest.raises(FitError, match="condition"):
        spectral_mass_fit(clustered, clustered, 4)


def test_extrapolation_exact_line():
    rhos = np.array([0.5, 0.8, 0.9, 0.95])
    ex = extrapolate_one_minus(rhos, 0.7 - 0.4 * (1 - rhos))
    assert ex.value == pytest.approx(0.7)


def test_classical_rejected():
    with pytest.raises(CorrelationError):
        prob_avoid(CorrelationFunction.exp_power(1.0, 1.0), WHOLE, 10, 0)


def test_start_points_follow_mu():
    u = np.array([1 - math.exp(-1)])
    from harrisflow.sde import chart_for

    assert start_points(EXP, u)[0] == pytest.approx(float(chart_for(EXP).xi_of_x(1.0)))
    assert np.all(start_points(ARR, np.array([0.2, 0.9])) == 0.0)


def test_empty_F_convention():
    r = prob_avoid(EXP, RegimeSchedule.parse(""), 10, 0)
    assert r.deterministic == 1.0 and r.spectral.value == 1.0


@pytest.mark.parametrize("rho", [0.0])
def test_G_at_zero_vanishes(rho):
    (g,) = generating_function(EXP, WHOLE, [rho], N, 5)
    assert abs(g.value) <= 3 * g.stderr


def test_G_monotone_in_rho_and_set():
    rhos = [0.0, 0.5, 0.9]
    G = generating_function(EXP, WHOLE, rhos, N, 6)
    for a, b in zip(G[:-1], G[1:]):
        assert b.value >= a.value - 2 * math.hypot(a.stderr, b.stderr)
    for g in G:
        assert -3 * g.stderr <= g.value <= 1 + 3 * g.stderr
    sub = generating_function(EXP, RegimeSchedule.parse("0.25,0.5"), [0.5], N, 6)[0]
    assert sub.value >= G[1].value - 2 * math.hypot(sub.stderr, G[1].stderr)


def test_complementarity():
    F = RegimeSchedule.parse("0.25,0.5")
    r = prob_avoid(EXP, F, N, 8)
    assert abs(r.switching.value + r.complement.value - 1) <= 3 * math.hypot(r.switching.stderr, r.complement.stderr)
    assert r.spectral.value + r.complement.value == pytest.approx(1.0)


def test_nonempty_three_ways_small():
    r = prob_nonempty_three_ways(EXP, N, 9)
    ests = r.estimates()
    for i in range(3):
        for j in range(i + 1, 3):
            assert ests[i].agrees(ests[j])


@pytest.mark.parametrize("F", ["0,1", "0.25,0.5"])
def test_arratia_spectral_set_is_infinite_or_empty(F):
    # |S cap F| is 0 or infinite, so G_F(rho) does not depend on rho and equals P(S avoids F)
    sched = RegimeSchedule.parse(F)
    G = generating_function(ARR, sched, [0.0, 0.5, 0.9], 20_000, 10)
    avoid = avoid_probability_pde(ARR, sched)
    for g in G:
        assert abs(g.value - avoid) <= 3 * g.stderr + 2e-3
    if F == "0,1":
        assert avoid == pytest.approx(0.0, abs=1e-3)


def test_spectral_hits_reproducible():
    a = spectral_hits(EXP, RegimeSchedule.parse("0.25,0.5"), 200, 1)
    b = spectral_hits(EXP, RegimeSchedule.parse("0.25,0.5"), 100, 1, offset=100)
    np.testing.assert_array_equal(a[100:], b)


def test_spectral_samples():
    s = sample_spectral_set(EXP, dt=1e-3, seed=2, replica=0)
    assert 0 <= s.tau <= 1
    assert np.all((s.zero_times >= 0) & (s.zero_times <= s.tau))
    many = sample_spectral_sets(EXP, 40, 2, dt=1e-3, chunk=16)
    assert many[0].tau == s.tau
    np.testing.assert_array_equal(many[0].zero_times, s.zero_times)
    fixed = sample_spectral_sets(ARR, 20, 2, dt=1e-3, tau=1.0)
    # the Arratia set always contains a point near tau (start at 0)
    assert all(not x.empty for x in fixed)


def test_arratia_nonempty_is_certain():
    r = prob_nonempty_three_ways(ARR, 500, 4)
    for e in r.estimates():
        assert e.value == pytest.approx(1.0, abs=1e-9)
