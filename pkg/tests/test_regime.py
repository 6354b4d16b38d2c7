"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import logging

import numpy as np
import pytest

from pifsched.contraction import expansion_profile, f_t, f_t_derivative
from pifsched.errors import DatasetIOError, FormatError, ValidationError
from pifsched.models import Interpolation
from pifsched.regime import (
    SuppressionTable,
    expansion_time_derivative,
    gaussian_patch_loss,
    kappa_diag,
    margin,
    mm1_sufficient,
    mm1_threshold,
    mm1_window,
    release_times,
    spearman_vs_lambda,
    stratified_span
)
from pifsched.schedule import stride_timesteps, subsample


def _write(tmp_path, text):
    path = tmp_path / "suppression.csv"
    path.write_text(text, encoding="utf-8")
    return path


def test_linear_interpolation_between_measurements():
    table = SuppressionTable.from_grid(["a"], [100, 200], [[0.0, 0.1]])

    assert table.value("a", 150) == pytest.approx(0.05)
    assert table.value("a", 50) == 0.0
    assert table.value("a", 900) == pytest.approx(0.1)


def test_nearest_interpolation_ties_go_lower():
    table = SuppressionTable.from_grid(["a"], [100, 200], [[0.0, 0.1]], Interpolation.NEAREST)

    assert table.value("a", 149) == 0.0
    assert table.value("a", 150) == 0.0
    assert table.value("a", 151) == pytest.approx(0.1)


def test_small_negative_values_clamp(caplog):
    with caplog.at_level(logging.WARNING, logger="pifsched.regime"):
        table = SuppressionTable.from_grid(["a"], [1, 2], [[-5e-7, 0.2]])

    assert table.value("a", 1) == 0.0
    assert "Clamping" in caplog.text


def test_negative_values_rejected():
    with pytest.raises(ValidationError):
        SuppressionTable.from_grid(["a"], [1, 2], [[-1e-3, 0.2]])


def test_unknown_patch_rejected():
    table = SuppressionTable.zeros(["a"], [1])

    with pytest.raises(ValidationError):
        table.value("b", 1)


def test_table_follows_schedule_labels(linear):
    table = SuppressionTable.from_grid(["a"], [1, 1000], [[0.0, 0.999]])
    sub = subsample(linear, stride_timesteps(1000, 100))

    assert table.for_schedule(sub, "a")[0] == pytest.approx(0.0999 * 99 / 99.9, rel=1e-9)
    assert table.for_schedule(sub, "a")[-1] == pytest.approx(0.999)


def test_averaged_suppression(linear):
    table = SuppressionTable.from_grid(["a", "b"], [1, 1000], [[0.1, 0.1], [0.3, 0.3]])
    assert np.allclose(table.averaged(linear), 0.2)


def test_read_csv(tmp_path):
    path = _write(tmp_path, "patch,t,S\nr0c0,100,0.01\nr0c0,10,0.02\nr0c1,10,0.0\n")
    table = SuppressionTable.from_csv(path)

    assert table.patches == ("r0c0", "r0c1")
    assert list(table.rows["r0c0"][0]) == [10, 100]
    assert table.value("r0c0", 10) == pytest.approx(0.02)


@pytest.mark.parametrize(
    ("text", "line", "column"),
    [
        ("patch,S,t\n", 1, None),
        ("patch,t,S\nr0c0,ten,0.1\n", 2, 2),
        ("patch,t,S\nr0c0,10,0.1\nr0c0,20,abc\n", 3, 3),
        ("patch,t,S\nr0c0,10,-0.5\n", 2, 3),
        ("patch,t,S\nr0c0,10,0.1\nr0c0,10,0.2\n", 3, None),
        ("patch,t,S\nr0c0,10\n", 2, None),
    ]
)
def test_malformed_csv_reports_location(tmp_path, text, line, column):
    with pytest.raises(FormatError) as info:
        SuppressionTable.from_csv(_write(tmp_path, text))

    assert info.value.line == line
    assert info.value.column == column


def test_missing_csv(tmp_path):
    with pytest.raises(DatasetIOError):
        SuppressionTable.from_csv(tmp_path / "absent.csv")


def test_margin_without_suppression(linear):
    table = SuppressionTable.zeros(["a"], [1])

    assert margin(linear, table, 1.0, "a", 500) == pytest.approx(1.0 - f_t(linear, 500, 1.0))
    assert margin(linear, table, 1.0, "a", 500) > 0.0
    assert margin(linear, table, 10.0, "a", 500) < 0.0


def test_kappa_diag(linear):
    table = SuppressionTable.from_grid(["a"], [1], [[0.05]])
    assert kappa_diag(linear, table, 3.0, "a", 700) == pytest.approx(f_t(linear, 700, 3.0) - 0.05)


def test_release_times_match_brute_force(linear, rng):
    timesteps = [1, 250, 500, 750, 1000]
    patches = ["a", "b", "c"]
    table = SuppressionTable.from_grid(patches, timesteps, rng.uniform(0.0, 0.02, size=(3, 5)))
    lambdas = {"a": 40.0, "b": 3.0, "c": 1.5}

    report = release_times(linear, table, lambdas)

    for patch, lam in lambdas.items():
        released = [t for t in range(1, 1001) if margin(linear, table, lam, patch, t) <= 0.0]
        assert report[patch].t_rel == (max(released) if released else None)

    times = [r.t_rel for r in report.releases if r.t_rel is not None]
    if len(times) >= 2:
        assert report.span == max(times) - min(times)


def test_unreleased_patch(linear):
    table = SuppressionTable.zeros(["a", "b"], [1])
    report = release_times(linear, table, {"a": 0.5, "b": 40.0})

    assert report["a"].t_rel is None
    assert report["b"].t_rel == 1000
    assert report.span is None

    rows = list(report.rows())
    assert rows[0][2] == "never"


def test_release_needs_every_patch(linear):
    table = SuppressionTable.zeros(["a"], [1])

    with pytest.raises(ValidationError):
        release_times(linear, table, {"b": 2.0})


def test_time_derivative_is_central_difference(linear):
    f = expansion_profile(linear, 2.0)

    assert expansion_time_derivative(linear, 500, 2.0) == pytest.approx((f[500] - f[498]) / 2.0)
    assert expansion_time_derivative(linear, 1, 2.0) == pytest.approx(f[1] - f[0])
    assert expansion_time_derivative(linear, 1000, 2.0) == pytest.approx(f[999] - f[998])


def test_stratified_span_formula(linear):
    span = stratified_span(1.0, 7.4, 1e-3, -3e-6, linear, 400, 3.0)

    numerator = 1e-3 - f_t_derivative(linear, 400, 3.0)
    denominator = abs(-3e-6 - expansion_time_derivative(linear, 400, 3.0))
    assert span == pytest.approx(6.4 * numerator / denominator)


def test_stratified_span_undefined(linear):
    still = expansion_time_derivative(linear, 400, 3.0)

    with pytest.raises(ValidationError):
        stratified_span(1.0, 7.4, 1e-3, still, linear, 400, 3.0)

    with pytest.raises(ValidationError):
        stratified_span(7.4, 1.0, 1e-3, 0.0, linear, 400, 3.0)


def test_mm1_condition(linear):
    threshold = mm1_threshold(linear, 800)

    assert mm1_sufficient(linear, 800, threshold * 1.01)
    assert not mm1_sufficient(linear, 800, threshold * 0.99)

    window = mm1_window(linear, threshold * 1.01)
    assert 800 in window
    assert all(mm1_sufficient(linear, t, threshold * 1.01) for t in window)

    with pytest.raises(ValidationError):
        mm1_sufficient(linear, 800, 0.0)


def test_gaussian_patch_loss(linear):
    g_ab = linear.alpha_bar[300]
    g_v = 1.0 - g_ab

    assert gaussian_patch_loss(linear, 300, 2.0) == pytest.approx(2.0 * g_v / (g_ab * 2.0 + g_v))


def test_spearman_vs_lambda():
    result = spearman_vs_lambda([1.0, 2.0, 3.0, 4.0, 5.0], [0.9, 0.95, 0.97, 0.99, 1.01])
    assert result.rho == pytest.approx(1.0)
