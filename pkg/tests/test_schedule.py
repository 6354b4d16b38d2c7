"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import dataclasses
import math

import mpmath
import numpy as np
import pytest

from pifsched.attractor import moran_root
from pifsched.errors import ValidationError
from pifsched.models import ScheduleKind
from pifsched.schedule import (
    Schedule,
    collage_weights,
    even_timesteps,
    geometry_rows,
    iter_geometry,
    logsnr_shift,
    make_cosine,
    make_linear,
    minsnr_weights,
    step_geometry,
    stride_timesteps,
    subsample,
    threshold_stats
)

from conftest import random_schedule


mpmath.mp.dps = 40


@pytest.mark.parametrize(
    ("fixture", "mean", "cv", "finest"),
    [
        ("linear", 0.805, 0.341, 0.00500),
        ("cosine", 0.637, 0.483, 0.00079),
        ("cosine_improved", 0.641, 0.474, 0.00321),
        ("ddim50", 0.637, 0.483, 0.01571),
    ]
)
def test_threshold_statistics_of_reference_schedules(request, fixture, mean, cv, finest):
    stats = threshold_stats(request.getfixturevalue(fixture))

    assert stats.mean == pytest.approx(mean, abs=0.005)
    assert stats.cv == pytest.approx(cv, abs=0.005)
    assert stats.value_at_finest_executed_step == pytest.approx(finest, abs=2e-5)
    assert stats.min_value <= stats.mean
    assert stats.cv >= 0.0


def test_threshold_spread_counts_every_step(ddim50):
    stats = threshold_stats(ddim50)
    l_star = ddim50.steps.L_star

    assert stats.count == 50
    assert stats.std == pytest.approx(float(np.std(l_star, ddof=0)), rel=1e-12)
    assert stats.cv == pytest.approx(0.4833, abs=5e-4)

    # 50 steps, so the sample convention would sit a factor sqrt(50 / 49) higher
    assert float(np.std(l_star, ddof=1)) / stats.mean == pytest.approx(stats.cv * math.sqrt(50.0 / 49.0), rel=1e-12)


def test_linear_schedule_endpoints(linear):
    assert linear.T == 1000
    assert linear.alpha_bar[0] == 1.0
    assert linear.betas[0] == pytest.approx(1e-4)
    assert linear.betas[-1] == pytest.approx(0.02)
    assert linear.kind is ScheduleKind.LINEAR


def test_first_step_threshold_is_half_root_variance(linear):
    g = step_geometry(linear, 1)

    assert g.L_star == pytest.approx(0.5 * math.sqrt(1e-4), rel=1e-3)
    assert g.v_prev == 0.0
    assert g.label == 1


def test_mid_chain_threshold_tracks_root_variance(cosine_improved):
    for t in (300, 500, 700):
        g = step_geometry(cosine_improved, t)
        assert abs(g.L_star - math.sqrt(g.v_t)) < 0.02 * math.sqrt(g.v_t)


def test_cosine_offsets_set_first_variance():
    assert make_cosine(1000, 0.0).steps.v[0] == pytest.approx(2.5e-6, rel=0.02)
    assert make_cosine(1000, 0.008).steps.v[0] == pytest.approx(4.1e-5, rel=0.02)


def test_cosine_without_offset_stays_positive():
    s = make_cosine(1000, 0.0)

    assert s.alpha_bar[-1] > 0.0
    assert np.all(s.betas <= 0.999 + 1e-12)
    assert np.all(np.isfinite(s.steps.L_star))


def test_cosine_clip_can_be_disabled():
    s = make_cosine(1000, 0.0, clip_beta=False)

    assert s.alpha_bar[-1] == pytest.approx(1e-12)
    assert s.betas[-1] > 0.999


@pytest.mark.property
def test_random_schedules_have_negative_score_coefficient(rng):
    for _ in range(1000):
        steps = random_schedule(rng).steps

        assert np.all(steps.b < 0.0)
        assert np.all(steps.L_star > 0.0)
        assert np.all(steps.expand_ratio > 1.0)
        assert np.allclose(steps.expand_minus_one, steps.expand_ratio - 1.0, rtol=1e-9, atol=0.0)


@pytest.mark.property
def test_threshold_identity(rng):
    for _ in range(200):
        s = random_schedule(rng)
        a = s.steps

        assert np.allclose(a.L_star, a.expand_minus_one / np.abs(a.b), rtol=1e-12)


def test_subsampled_schedule_matches_direct_construction(cosine):
    executed = stride_timesteps(1000, 20)
    sub = subsample(cosine, executed)
    direct = Schedule.from_alpha_bar(np.concatenate(([1.0], cosine.alpha_bar[executed])))

    a, b = threshold_stats(sub), threshold_stats(direct)

    assert a.mean == b.mean
    assert a.cv == b.cv
    assert a.finest_timestep == 20
    assert b.finest_timestep == 1
    assert sub.params["parent_T"] == 1000


def test_subsample_labels_compose(linear):
    first = subsample(linear, stride_timesteps(1000, 10))
    second = subsample(first, [2, 4, 6])

    assert list(second.timestep_labels) == [20, 40, 60]


def test_even_timesteps():
    assert even_timesteps(1000, 50) == stride_timesteps(1000, 20)
    assert even_timesteps(10, 3) == [3, 6, 9]


@pytest.mark.parametrize(
    "alpha_bar",
    [
        [1.0],
        [0.9, 0.5],
        [1.0, 0.5, 0.5],
        [1.0, 0.5, 0.7],
        [1.0, 0.5, 0.0],
        [1.0, float("nan")],
    ]
)
def test_invalid_alpha_bar_rejected(alpha_bar):
    with pytest.raises(ValidationError):
        Schedule.from_alpha_bar(alpha_bar)


def test_invalid_constructions_rejected(linear):
    with pytest.raises(ValidationError):
        make_linear(0, 1e-4, 0.02)

    with pytest.raises(ValidationError):
        make_linear(10, 0.02, 1e-4)

    with pytest.raises(ValidationError):
        make_cosine(10, -0.1)

    with pytest.raises(ValidationError):
        subsample(linear, [5, 5])

    with pytest.raises(ValidationError):
        step_geometry(linear, 0)


def test_non_negative_score_coefficient_is_rejected():
    s = Schedule.from_alpha_bar([1.0, 0.9, 0.81])
    arrays = s.steps

    # Corrupt the cached per-step arrays so step 2 carries b_t = 0
    b = arrays.b.copy()
    b[1] = 0.0
    s.__dict__["steps"] = dataclasses.replace(arrays, b=b)

    assert step_geometry(s, 1).b_t < 0.0

    with pytest.raises(ValidationError, match="not negative"):
        step_geometry(s, 2)


def test_schedule_is_immutable(linear):
    with pytest.raises(ValueError):
        linear.alpha_bar[1] = 0.5

    with pytest.raises(ValueError):
        linear.steps.L_star[0] = 1.0


def test_two_step_schedule_by_hand():
    # Constant beta 0.1
    s = Schedule.from_alpha_bar([1.0, 0.9, 0.81])

    sv1 = math.sqrt(0.1)
    l1 = sv1 / (1.0 + math.sqrt(0.9))

    sv2 = math.sqrt(0.19)
    l2 = (math.sqrt(0.9) - math.sqrt(0.81)) / (math.sqrt(0.9) * sv2 - math.sqrt(0.81) * sv1)

    stats = threshold_stats(s)
    mean = 0.5 * (l1 + l2)
    std = abs(l1 - l2) / 2.0

    assert stats.mean == pytest.approx(mean, rel=1e-12)
    assert stats.cv == pytest.approx(std / mean, rel=1e-9)


def test_geometry_rows_match_iter_geometry(cosine_improved):
    rows = list(geometry_rows(cosine_improved))
    geometry = list(iter_geometry(cosine_improved))

    assert len(rows) == 1000
    assert rows[499][5] == geometry[499].L_star
    assert rows[0][0] == 1


def test_zero_logsnr_shift_is_identity(cosine_improved):
    assert logsnr_shift(cosine_improved, 32, 32) is cosine_improved


def test_logsnr_shift_moves_logsnr(cosine_improved):
    shifted = logsnr_shift(cosine_improved, 64, 32)
    delta = shifted.steps.logsnr - cosine_improved.steps.logsnr

    assert np.allclose(delta, -2.0 * math.log(2.0), atol=1e-9)


@pytest.mark.slow
def test_logsnr_shift_keeps_moran_root_near_one():
    base = make_cosine(4000, 0.008)
    shifted = logsnr_shift(base, 64, 32)

    # alpha_bar^(d) = expit(logSNR^(d_base) + 2 log(d_base / d)) at every step
    shift = 2 * mpmath.log(mpmath.mpf(32) / 64)
    for t in range(1, base.T + 1):
        ab = mpmath.mpf(float(base.alpha_bar[t]))
        expected = 1 / (1 + mpmath.exp(-(mpmath.log(ab / (1 - ab)) + shift)))

        assert shifted.alpha_bar[t] == pytest.approx(float(expected), rel=1e-11)

    r_base = moran_root(base).value
    r_shifted = moran_root(shifted).value

    assert abs(r_base - 1.0) < 1e-3
    assert abs(r_shifted - 1.0) < 1e-3
    assert r_base == pytest.approx(1.0006271063, abs=1e-7)
    assert r_shifted == pytest.approx(1.0008244807, abs=1e-7)

    # Less signal at every step pushes the root up
    assert r_shifted > r_base


def test_logsnr_shift_rejects_bad_resolution(linear):
    with pytest.raises(ValidationError):
        logsnr_shift(linear, 0, 32)


def test_minsnr_weights(cosine_improved):
    assert np.all(minsnr_weights(cosine_improved, 1e300) == 1.0)

    snr = cosine_improved.steps.snr
    gamma = float(snr.min())
    assert np.allclose(minsnr_weights(cosine_improved, gamma), gamma / snr, rtol=1e-15)

    weights = minsnr_weights(cosine_improved, 5.0)
    assert np.all((weights > 0.0) & (weights <= 1.0))
    assert np.all(weights[snr <= 5.0] == 1.0)

    with pytest.raises(ValidationError):
        minsnr_weights(cosine_improved, 0.0)


def test_collage_weights_are_snr(linear):
    assert np.array_equal(collage_weights(linear), linear.steps.snr)
