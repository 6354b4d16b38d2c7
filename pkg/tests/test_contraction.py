"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import math

import mpmath
import numpy as np
import pytest

from pifsched.contraction import (
    attention_cross_bound,
    block_certificate,
    collage_bridge,
    contraction_rows,
    coupling_cs_bound,
    euclidean_certificate,
    expansion_excess_profile,
    expansion_profile,
    f_t,
    f_t_derivative,
    f_t_snr_form,
    fm_kappa,
    high_noise_params,
    high_noise_window,
    lambda_star,
    lambda_star_profile,
    w1_bridge
)
from pifsched.errors import ValidationError
from pifsched.schedule import Schedule, step_geometry

from conftest import random_schedule


mpmath.mp.dps = 40


def _f_t_high_precision(s: Schedule, t: int, lam: float) -> mpmath.mpf:
    ab_prev = mpmath.mpf(float(s.alpha_bar[t - 1]))
    ab = mpmath.mpf(float(s.alpha_bar[t]))
    v_prev, v = 1 - ab_prev, 1 - ab

    b = mpmath.sqrt(v_prev) - mpmath.sqrt(ab_prev / ab) * mpmath.sqrt(v)
    return mpmath.sqrt(ab_prev / ab) + b * mpmath.sqrt(v) / (lam * ab + v)


def test_f_t_matches_high_precision(linear, rng):
    for t in rng.integers(1, 1001, size=50):
        lam = float(rng.uniform(0.1, 50.0))
        exact = _f_t_high_precision(linear, int(t), lam)

        assert f_t(linear, int(t), lam) == pytest.approx(float(exact), rel=1e-13)


def test_snr_form_agrees(cosine_improved, rng):
    for t in rng.integers(1, 1001, size=100):
        lam = float(rng.uniform(0.01, 100.0))
        assert f_t_snr_form(cosine_improved, int(t), lam) == pytest.approx(f_t(cosine_improved, int(t), lam), rel=1e-12)


@pytest.mark.property
def test_unit_variance_always_contracts(rng):
    for _ in range(200):
        s = random_schedule(rng)

        assert np.all(expansion_profile(s, 1.0) < 1.0)
        assert np.all(lambda_star_profile(s) > 1.0)


@pytest.mark.property
def test_threshold_is_the_unit_crossing(rng):
    for _ in range(200):
        s = random_schedule(rng)
        roots = lambda_star_profile(s)

        for t in range(1, s.T + 1):
            assert f_t(s, t, float(roots[t - 1])) == pytest.approx(1.0, abs=1e-12)


def test_first_step_threshold_near_two(linear):
    assert lambda_star(linear, 1) == pytest.approx(2.0, abs=1e-3)


@pytest.mark.parametrize(
    ("fixture", "minimum", "argmin"),
    [("linear", 1.0025, 349), ("cosine_improved", 1.0016, 496)]
)
def test_interior_threshold_minimum(request, fixture, minimum, argmin):
    s = request.getfixturevalue(fixture)
    interior = lambda_star_profile(s)[1:-1]

    assert interior.min() == pytest.approx(minimum, abs=5e-4)
    assert abs(int(np.argmin(interior)) + 2 - argmin) <= 25


def test_linear_interior_threshold_range(linear):
    interior = lambda_star_profile(linear)[1:-1]

    assert interior.min() > 1.0
    assert interior.max() < 1.25


def test_excess_agrees_with_direct_difference(linear):
    for lam in (0.5, 1.0, 1.0024, 3.0, 40.0):
        assert np.allclose(expansion_excess_profile(linear, lam), expansion_profile(linear, lam) - 1.0, atol=1e-13)


def test_expansion_increases_with_variance(cosine_improved):
    lams = np.geomspace(0.01, 100.0, 20)
    profiles = np.array([expansion_profile(cosine_improved, lam) for lam in lams])

    assert np.all(np.diff(profiles, axis=0) > 0.0)


def test_derivative_matches_finite_difference(linear):
    for t in (1, 100, 500, 1000):
        h = 1e-4
        numeric = (f_t(linear, t, 2.0 + h) - f_t(linear, t, 2.0 - h)) / (2.0 * h)
        assert f_t_derivative(linear, t, 2.0) == pytest.approx(numeric, rel=1e-5)


def test_non_positive_variance_rejected(linear):
    with pytest.raises(ValidationError):
        f_t(linear, 10, 0.0)


def test_certificate_matches_scalar_jacobian(linear):
    # For a scalar score eps_hat = nu x the step is x -> (expand_ratio + b nu) x
    for t in (50, 400, 900):
        g = step_geometry(linear, t)
        nu = g.L_star + 0.3 * (g.expand_ratio / abs(g.b_t) - g.L_star)

        cert = euclidean_certificate(linear, t, nu, 0.0)

        assert cert.holds
        assert cert.kappa == pytest.approx(abs(g.expand_ratio + g.b_t * nu), rel=1e-12)


def test_certificate_fails_below_threshold(linear):
    g = step_geometry(linear, 500)
    cert = euclidean_certificate(linear, 500, g.L_star, 0.1)

    assert not cert.c1_holds
    assert cert.kappa is None
    assert not cert.holds


def test_certificate_rejects_bad_inputs(linear):
    with pytest.raises(ValidationError):
        euclidean_certificate(linear, 10, 0.0, 0.0)

    with pytest.raises(ValidationError):
        euclidean_certificate(linear, 10, 1.0, -1.0)


def test_high_noise_margin(linear):
    params = high_noise_params(linear, 900, 1.0, 0.1)
    g = step_geometry(linear, 900)

    assert params.nu_star == pytest.approx(1.0 / math.sqrt(g.v_t))
    assert params.margin == pytest.approx(params.nu_star - params.delta_star - g.L_star)


def test_high_noise_window(linear):
    window = high_noise_window(linear, 1.0, 0.01)

    assert window is not None
    first, last = window
    assert last == 1000
    assert high_noise_params(linear, first, 1.0, 0.01).margin > 0.0

    assert high_noise_window(linear, 1.0, 1e12) is None


def test_block_certificate():
    assert block_certificate(10, 0.6, 0.3).satisfied
    assert not block_certificate(10, 0.8, 0.3).satisfied
    assert block_certificate(10, 0.8, 0.3).kappa_pc == pytest.approx(1.1)

    with pytest.raises(ValidationError):
        block_certificate(10, -0.1, 0.1)


def test_coupling_and_attention_bounds():
    assert coupling_cs_bound(4.0, -0.5, 16) == pytest.approx(0.5 * 2.0 * 4.0)
    assert attention_cross_bound(0.1, 2.0, 1.5, 0.5, 2.0, -0.2) == pytest.approx(0.2 * 1.5 * 2.0 * 2.0 * 0.1)

    with pytest.raises(ValidationError):
        attention_cross_bound(1.5, 1.0, 1.0, 0.0, 0.0, -0.1)

    with pytest.raises(ValidationError):
        coupling_cs_bound(1.0, -0.1, 0)


def test_single_step_bridge_is_banach_bound():
    bound = collage_bridge([0.8], [0.5])
    assert bound.value == pytest.approx(0.5 / 0.2)


def test_bridge_weights_are_running_products():
    bound = collage_bridge([0.5, 0.4, 0.9], [1.0, 1.0, 1.0])

    assert bound.weights == pytest.approx((1.0, 0.5, 0.2))
    assert bound.s_loc == pytest.approx(0.18)
    assert bound.value == pytest.approx(1.7 / 0.82)


def test_bridge_without_contraction():
    with pytest.raises(ValidationError):
        collage_bridge([0.5, 1.0], [0.1, 0.1])

    assert collage_bridge([0.5, 1.0], [0.1, 0.1], strict=False).value == math.inf
    assert w1_bridge([1.2], [0.0], [0.0], [0.0], strict=False) == math.inf


def test_w1_bridge_by_hand():
    value = w1_bridge([0.5, 0.5], [0.1, 0.2], [0.04, 0.0], [1.0, 1.0])

    terms = (0.1 + 0.2) ** 2 + (0.5 * 0.2) ** 2
    assert value == pytest.approx(math.sqrt(2.0) / 0.75 * math.sqrt(terms))


def test_fm_products_contract_under_conditions():
    T = 50
    product = 1.0

    for i in range(T):
        step = fm_kappa(T, i / T, 0.5, 0.5, 0.1)
        assert step.holds
        assert 0.0 < step.kappa_tilde < 1.0
        product *= step.kappa_tilde

    assert 0.0 < product < 1.0


def test_fm_kappa_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        fm_kappa(10, 1.0, 0.5, 0.5, 0.0)

    with pytest.raises(ValidationError):
        fm_kappa(10, 0.5, 0.6, 0.5, 0.0)


def test_contraction_rows(linear):
    rows = list(contraction_rows(linear, 2.0))

    assert len(rows) == 1000
    assert rows[0][1] == pytest.approx(f_t(linear, 1, 2.0))
    assert rows[0][2] == pytest.approx(lambda_star(linear, 1))
