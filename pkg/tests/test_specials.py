"""Scalar special functions against independent references."""

import math

import numpy as np
import pytest
from scipy import special as sp

from ldar import specials


def test_softplus_zero():
    assert math.isclose(float(specials.softplus(0.0)), math.log(2.0), rel_tol=1e-12)


def test_softplus_overflow_branch():
    assert float(specials.softplus(40.0)) == 40.0
    assert float(specials.softplus(-745.0)) == pytest.approx(0.0, abs=1e-300)


def test_softplus_inverse_round_trip():
    ys = np.array([0.1, 0.5, 1.0, 3.0, 20.0, 50.0])
    assert np.allclose(specials.softplus(specials.softplus_inv(ys)), ys, rtol=1e-10)
    assert math.isclose(specials.SOFTPLUS_INV_ONE, math.log(math.e - 1.0),
                        rel_tol=1e-15)


def test_lgamma_integers():
    assert float(specials.lgamma(1.0)) == pytest.approx(0.0, abs=1e-12)
    assert float(specials.lgamma(2.0)) == pytest.approx(0.0, abs=1e-12)


def test_lgamma_half():
    # Gamma(1/2) = sqrt(pi)
    assert float(specials.lgamma(0.5)) == pytest.approx(0.5 * math.log(math.pi),
                                                        rel=1e-12)


def test_lgamma_accuracy_across_domain():
    # Stated accuracy: relative error < 1e-10 on (0, 1e6).
    xs = np.concatenate([
        np.linspace(1e-4, 0.49, 60),
        np.linspace(0.5, 30.0, 120),
        np.geomspace(30.0, 1e6, 120),
    ])
    mine = specials.lgamma(xs)
    ref = np.array([math.lgamma(x) for x in xs])
    rel = np.abs(mine - ref) / np.maximum(np.abs(ref), 1.0)
    assert rel.max() < 1e-10


def test_lgamma_rejects_nonpositive():
    with pytest.raises(ValueError):
        specials.lgamma(0.0)
    with pytest.raises(ValueError):
        specials.lgamma(np.array([1.0, -3.0]))


def test_digamma_against_scipy():
    xs = np.concatenate([np.linspace(1e-3, 0.5, 50),
                         np.linspace(0.5, 10.0, 80),
                         np.geomspace(10.0, 1e5, 60)])
    assert np.allclose(specials.digamma(xs), sp.digamma(xs), rtol=1e-10, atol=1e-12)


def test_digamma_is_lgamma_derivative():
    for x in (0.2, 0.9, 1.7, 5.3, 42.0):
        h = 1e-6
        fd = (math.lgamma(x + h) - math.lgamma(x - h)) / (2 * h)
        assert float(specials.digamma(x)) == pytest.approx(fd, rel=1e-7)


def test_sigmoid_matches_closed_form():
    xs = np.array([-700.0, -30.0, -1.0, 0.0, 1.0, 30.0, 700.0])
    ref = 1.0 / (1.0 + np.exp(-np.clip(xs, -500, 500)))
    assert np.allclose(specials.sigmoid(xs), ref, atol=1e-12)


def test_gelu_reference_points():
    # Gaussian-gated tanh form: odd-ish shape, 0 at 0, ~x for large x.
    assert float(specials.gelu(0.0)) == 0.0
    assert float(specials.gelu(10.0)) == pytest.approx(10.0, rel=1e-6)
    assert float(specials.gelu(-10.0)) == pytest.approx(0.0, abs=1e-4)
    fd = (specials.gelu(1.0 + 1e-6) - specials.gelu(1.0 - 1e-6)) / 2e-6
    assert float(specials.gelu_grad(1.0)) == pytest.approx(float(fd), rel=1e-6)
