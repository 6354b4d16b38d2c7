"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import math
import itertools
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from pifsched.common import PERMUTATION_MAX_N
from pifsched.errors import ValidationError


@dataclass(frozen=True)
class RankCorrelation:
    """
    Spearman rank correlation.

    Attributes
    ----------
    rho
        Correlation of the average ranks.
    p_value
        Two-sided p-value.
    exact
        True if the p-value comes from full permutation enumeration.
    n
        Sample size.
    """

    rho: float
    p_value: float
    exact: bool
    n: int

    def __iter__(self):
        yield self.rho
        yield self.p_value


@dataclass(frozen=True)
class LogLogFit:
    """
    Ordinary least squares fit of log(y) against log(x).

    Attributes
    ----------
    slope
        Fitted exponent.
    intercept
        Fitted log prefactor.
    r2
        Coefficient of determination.
    ci95_slope
        Two-sided 95% confidence interval of the slope.
    """

    slope: float
    intercept: float
    r2: float
    ci95_slope: tuple[float, float]

    def __iter__(self):
        yield self.slope
        yield self.intercept
        yield self.r2
        yield self.ci95_slope


def _as_vector(values: Sequence[float] | np.ndarray, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)

    if array.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional")

    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} contains non-finite values")

    return array


def fsum_mean(values: Sequence[float] | np.ndarray) -> float:
    """ Mean with compensated summation. """

    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise ValidationError("mean of an empty sequence")

    return math.fsum(array.tolist()) / array.size


def _std(array: np.ndarray, ddof: int) -> float:
    if array.size <= ddof:
        return 0.0

    mean = fsum_mean(array)
    return math.sqrt(math.fsum(((array - mean) ** 2).tolist()) / (array.size - ddof))


def sample_std(values: Sequence[float] | np.ndarray) -> float:
    """ Sample standard deviation (n - 1 denominator), 0 for a single value. """
    return _std(np.asarray(values, dtype=np.float64), 1)


def population_std(values: Sequence[float] | np.ndarray) -> float:
    """ Population standard deviation (n denominator) of a complete set of values. """
    return _std(np.asarray(values, dtype=np.float64), 0)


def cv(values: Sequence[float] | np.ndarray) -> float:
    """
    Coefficient of variation, sample standard deviation over mean.

    Parameters
    ----------
    values
        Sample values, the mean must be nonzero.
    """

    array = _as_vector(values, "values")
    mean = fsum_mean(array)

    if mean == 0.0:
        raise ValidationError("coefficient of variation is undefined for a zero mean")

    return sample_std(array) / mean


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    return float(np.dot(da, db) / math.sqrt(np.dot(da, da) * np.dot(db, db)))


def _permutation_p_value(ranks_a: np.ndarray, ranks_b: np.ndarray, rho: float) -> float:
    da = ranks_a - ranks_a.mean()
    db = ranks_b - ranks_b.mean()
    norm = math.sqrt(np.dot(da, da) * np.dot(db, db))

    permuted = np.array(list(itertools.permutations(db)), dtype=np.float64)
    rhos = permuted @ da / norm

    extreme = np.count_nonzero(np.abs(rhos) >= abs(rho) - 1e-12)
    return extreme / len(rhos)


def spearman(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> RankCorrelation:
    """
    Spearman rank correlation with a two-sided p-value.

    Ties receive average ranks. Samples with n <= 9 get an exact p-value from
    all n! permutations; larger samples use the t approximation with n - 2
    degrees of freedom.

    Parameters
    ----------
    a
        First sample.
    b
        Second sample, same length.
    """

    x = _as_vector(a, "a")
    y = _as_vector(b, "b")

    if len(x) != len(y):
        raise ValidationError(f"length mismatch: {len(x)} vs {len(y)}")

    n = len(x)
    if n < 3:
        raise ValidationError(f"spearman needs at least 3 points, got {n}")

    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise ValidationError("spearman correlation is undefined for a constant input")

    rho, _ = sps.spearmanr(x, y)
    rho = float(rho)

    if n <= PERMUTATION_MAX_N:
        p = _permutation_p_value(sps.rankdata(x), sps.rankdata(y), rho)
        return RankCorrelation(rho, p, True, n)

    if abs(rho) >= 1.0:
        return RankCorrelation(rho, 0.0, False, n)

    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * sps.t.sf(abs(t), n - 2))
    return RankCorrelation(rho, p, False, n)


def rank_pearson(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """ Pearson correlation of average ranks, the definition spearman() must match. """
    return _pearson(sps.rankdata(_as_vector(a, "a")), sps.rankdata(_as_vector(b, "b")))


def ols_loglog(x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray) -> LogLogFit:
    """
    Fit log(y) = slope * log(x) + intercept by ordinary least squares.

    Parameters
    ----------
    x
        Positive regressor values.
    y
        Positive response values, same length, at least 3 points.
    """

    xs = _as_vector(x, "x")
    ys = _as_vector(y, "y")

    if len(xs) != len(ys):
        raise ValidationError(f"length mismatch: {len(xs)} vs {len(ys)}")

    if len(xs) < 3:
        raise ValidationError(f"log-log fit needs at least 3 points, got {len(xs)}")

    if np.any(xs <= 0.0) or np.any(ys <= 0.0):
        raise ValidationError("log-log fit needs strictly positive values")

    if np.ptp(xs) == 0.0:
        raise ValidationError("log-log fit needs at least two distinct x values")

    fit = sps.linregress(np.log(xs), np.log(ys))

    half_width = float(sps.t.ppf(0.975, len(xs) - 2)) * fit.stderr
    slope = float(fit.slope)

    return LogLogFit(
        slope,
        float(fit.intercept),
        float(fit.rvalue) ** 2,
        (slope - half_width, slope + half_width)
    )
