import math

import numpy as np
import pytest

from normscale.errors import DegeneratePotentialError
from normscale.potentials import MarginPotential, log2cosh


def test_log2cosh_matches_naive_form():
    z = np.linspace(-20.0, 20.0, 41)
    assert np.allclose(log2cosh(z), np.log(2.0 * np.cosh(z)), rtol=1e-14)


def test_log2cosh_large_argument_no_overflow():
    with np.errstate(over="raise"):
        out = log2cosh(np.array([500.0, 5e4, 1e300]))
    assert np.all(np.isfinite(out))
    # asymptote log(2 cosh z) -> |z| for large |z|
    assert out[0] == pytest.approx(500.0, rel=1e-15)
    assert log2cosh(-5e4) == log2cosh(5e4)


def test_logistic_value_two_forms_agree():
    # -d + log(2 cosh(lam d))/lam and log(1 + exp(-2 lam d))/lam are the
    # same function; the implementation must match both where they are
    # representable
    pot = MarginPotential.logistic(2.5)
    d = np.linspace(-8.0, 8.0, 33)
    expect = -d + log2cosh(2.5 * d) / 2.5
    assert np.allclose(pot.value(d), expect, rtol=1e-13, atol=1e-15)
    assert np.allclose(pot.value(d), np.log1p(np.exp(-5.0 * d)) / 2.5,
                       rtol=1e-13, atol=1e-300)


def test_logistic_value_extreme_sharpness_finite():
    pot = MarginPotential.logistic(1e4)
    d = np.array([-50.0, -1.0, 0.0, 1.0, 50.0])
    v = pot.value(d)
    assert np.all(np.isfinite(v))
    assert v[0] == pytest.approx(100.0, rel=1e-12)     # -2*delta branch
    assert v[2] == pytest.approx(math.log(2.0) / 1e4, rel=1e-12)
    assert v[4] == 0.0                                  # underflows cleanly


def test_derivative_range_and_finite_difference():
    pot = MarginPotential.logistic(3.0)
    d = np.linspace(-4.0, 4.0, 17)
    g = pot.derivative(d)
    assert np.all(g > -2.0) and np.all(g < 0.0)
    h = 1e-6
    fd = (pot.value(d + h) - pot.value(d - h)) / (2.0 * h)
    assert np.allclose(g, fd, rtol=1e-8, atol=1e-9)


def test_hebbian_and_hinge_shapes():
    hb = MarginPotential.hebbian()
    assert hb.value(1.7) == -1.7
    assert hb.derivative(-0.3) == -1.0
    assert hb.is_smooth
    hinge = MarginPotential.hinge_limit()
    assert hinge.value(-2.0) == 4.0
    assert hinge.value(3.0) == 0.0
    assert not hinge.is_smooth
    assert hinge.derivative(-1.0) == -2.0
    with pytest.raises(ValueError):
        hinge.derivative(0.0)


def test_constructor_validation():
    with pytest.raises(ValueError):
        MarginPotential.logistic(0.0)
    with pytest.raises(ValueError):
        MarginPotential.logistic(-2.0)
    with pytest.raises(ValueError):
        MarginPotential.logistic(float("nan"))
    with pytest.raises(ValueError):
        MarginPotential("hebbian", sharpness=1.0)
    with pytest.raises(ValueError):
        MarginPotential("mystery")


def test_hebbian_prox_closed_form():
    pot = MarginPotential.hebbian()
    t = np.array([-3.0, 0.0, 1.2])
    assert np.array_equal(pot.prox(t, 0.7), t + 0.7)
    assert pot.prox(2.0, 0.25) == 2.25


def test_hinge_limit_prox_rejected():
    with pytest.raises(DegeneratePotentialError):
        MarginPotential.hinge_limit().prox(0.0, 1.0)


# reference minimizers from a 50-digit golden-section search on the proximal
# objective (mpmath), frozen here to 20 digits
_PROX_PINS = [
    (1.0, 0.0, 1.0, 0.52129845700027894424),
    (2.0, 0.5, 0.3, 0.55812237457555540052),
    (10.0, -0.2, 2.0, 0.12181063103115787299),
    (0.001, 1.3, 0.7, 1.9986009811759260291),
    (100.0, -3.0, 10.0, 0.0086560527492870199096),
]


@pytest.mark.parametrize("lam,t,x,expected", _PROX_PINS)
def test_logistic_prox_reference_values(lam, t, x, expected):
    got = MarginPotential.logistic(lam).prox(t, x)
    assert got == pytest.approx(expected, rel=1e-12)


def test_logistic_prox_near_zero_root():
    # at lam=1, t=-1, x=1 the minimizer sits within one ulp of 0
    assert abs(MarginPotential.logistic(1.0).prox(-1.0, 1.0)) < 1e-15


def test_prox_is_the_minimizer():
    rng = np.random.default_rng(7)
    for _ in range(50):
        lam = float(10.0 ** rng.uniform(-2.5, 2.5))
        t = float(rng.uniform(-5.0, 5.0))
        x = float(10.0 ** rng.uniform(-2.0, 2.0))
        pot = MarginPotential.logistic(lam)
        d = pot.prox(t, x)
        f0 = pot.prox_objective(d, t, x)
        # small offsets can lower the objective by rounding noise alone, so
        # allow a few ulp
        slack = 8.0 * np.spacing(abs(f0))
        for h in (1e-7, 1e-4, 1e-2):
            assert pot.prox_objective(d + h * max(1.0, abs(d)), t, x) >= f0 - slack
            assert pot.prox_objective(d - h * max(1.0, abs(d)), t, x) >= f0 - slack


def test_prox_stationarity_where_representable():
    # V'(d) + (d - t)/x = 0 at the minimizer; checked away from the corner
    # regime where the residual underflows before the position error does
    for lam, t, x in [(0.5, -1.0, 2.0), (3.0, 0.4, 1.5), (20.0, -0.5, 0.8)]:
        pot = MarginPotential.logistic(lam)
        d = pot.prox(t, x)
        g = pot.derivative(d) + (d - t) / x
        assert abs(g) < 1e-9 * max(1.0, 2.0 / x)


def test_prox_vectorized_matches_scalar():
    pot = MarginPotential.logistic(4.0)
    t = np.linspace(-6.0, 6.0, 25)
    vec = pot.prox(t, 1.3)
    assert vec.shape == t.shape
    # a vector call iterates all components jointly, so individual entries
    # may stop a polish step earlier or later than the scalar call; both
    # sit within the step tolerance of the root
    for ti, vi in zip(t, vec):
        assert pot.prox(float(ti), 1.3) == pytest.approx(vi, rel=1e-11, abs=1e-300)


def test_prox_monotone_in_t():
    pot = MarginPotential.logistic(7.0)
    t = np.linspace(-10.0, 10.0, 101)
    d = pot.prox(t, 2.0)
    assert np.all(np.diff(d) > 0)


def test_prox_extreme_scale():
    # the sweep drives x to exp(several hundred); the map must stay finite
    # and land in the stationarity bracket
    pot = MarginPotential.logistic(600.0)
    x = math.exp(400.0)
    t = np.array([-3.0, 0.0, 2.5])
    d = pot.prox(t, x)
    assert np.all(np.isfinite(d))
    # at t = 2.5 the slope underflows and the minimizer collapses onto t
    assert np.all(d >= t)
    assert np.all(d <= np.maximum(t, 0.0) + (np.log1p(4.0 * 600.0 * x) + 5.0) / 1200.0)


def test_prox_rejects_bad_x():
    pot = MarginPotential.logistic(1.0)
    with pytest.raises(ValueError):
        pot.prox(0.0, 0.0)
    with pytest.raises(ValueError):
        pot.prox(0.0, -1.0)
    with pytest.raises(ValueError):
        pot.prox(0.0, float("inf"))


def test_small_sharpness_prox_near_hebbian():
    # at lam = 1e-3 the map agrees with t + x to 1e-2 relative across
    # |t| <= 3, x <= 10 (the exact deviation is x*lam/(1 + x*lam) relative)
    pot = MarginPotential.logistic(1e-3)
    t = np.linspace(-3.0, 3.0, 13)
    for x in (0.05, 1.0, 10.0):
        d = pot.prox(t, x)
        target = t + x
        mask = np.abs(target) > 1e-9
        rel = np.abs(d[mask] - target[mask]) / np.abs(target[mask])
        assert rel.max() <= 1e-2
        assert np.all(np.abs(d[~mask] - target[~mask]) < 1e-4)


def test_prox_objective_vectorized():
    pot = MarginPotential.logistic(2.0)
    d = np.array([0.1, 0.2])
    t = np.array([0.0, 1.0])
    out = pot.prox_objective(d, t, 0.5)
    assert out.shape == (2,)
    assert out[0] == pytest.approx(pot.value(0.1) + 0.01 / 1.0, rel=1e-12)
