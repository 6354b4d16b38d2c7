"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import math
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from pifsched.common import BISECTION_MAX_ITERATIONS, BRACKET_CAP, MORAN_TOLERANCE, SUPPRESSED_ROOT_CAP
from pifsched.contraction import expansion_excess_profile
from pifsched.errors import BracketError, SuppressionError, ValidationError
from pifsched.models import InfoGainMode, KYMode, SuppressionMode
from pifsched.regime import SuppressionTable
from pifsched.schedule import Schedule, _check_step


logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Patch:
    """
    Covariance spectrum of one image patch.

    Attributes
    ----------
    id
        Patch id, `r{row}c{col}` for patches cut from images.
    n
        Patch dimension (pixels x channels).
    eigenvalues
        Either the single leading eigenvalue (isotropic shorthand, the patch
        is treated as n directions of that variance) or all n eigenvalues,
        sorted descending.
    """

    id: str
    n: int
    eigenvalues: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.eigenvalues, dtype=np.float64).reshape(-1)

        if self.n < 1:
            raise ValidationError(f"patch '{self.id}' has dimension {self.n}")

        if len(values) not in (1, self.n):
            raise ValidationError(
                f"patch '{self.id}' needs 1 or {self.n} eigenvalues, got {len(values)}"
            )

        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise ValidationError(f"patch '{self.id}' has negative or non-finite eigenvalues")

        if np.any(np.diff(values) > 0.0):
            raise ValidationError(f"eigenvalues of patch '{self.id}' are not sorted descending")

        values.setflags(write=False)
        object.__setattr__(self, "eigenvalues", values)

    @property
    def isotropic(self) -> bool:
        return len(self.eigenvalues) == 1

    @property
    def lam(self) -> float:
        """ Leading eigenvalue. """
        return float(self.eigenvalues[0])

    def directions(self) -> tuple[np.ndarray, np.ndarray]:
        """ (variances, multiplicities) of the patch directions. """

        if self.isotropic:
            return np.array([self.lam]), np.array([self.n])

        return np.array(self.eigenvalues), np.ones(self.n, dtype=np.int64)


@dataclass(frozen=True)
class PatchSpectrum:
    """
    Spectra of every patch of an image.

    Attributes
    ----------
    patches
        Patches in file order.
    """

    patches: tuple[Patch, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "patches", tuple(self.patches))

        if not self.patches:
            raise ValidationError("spectrum has no patches")

        ids = [p.id for p in self.patches]
        if len(set(ids)) != len(ids):
            raise ValidationError("spectrum has duplicate patch ids")

    @classmethod
    def isotropic(cls, entries: Iterable[tuple[str, int, float]]) -> "PatchSpectrum":
        """ Spectrum from (id, n, lambda) triples. """
        return cls(tuple(Patch(pid, n, np.array([lam])) for pid, n, lam in entries))

    @property
    def dimension(self) -> int:
        return sum(p.n for p in self.patches)

    @property
    def is_isotropic(self) -> bool:
        return all(p.isotropic for p in self.patches)

    def lambdas(self) -> dict[str, float]:
        """ Patch id -> leading eigenvalue. """
        return {p.id: p.lam for p in self.patches}

    def directions(self) -> tuple[np.ndarray, np.ndarray]:
        """ (variances, multiplicities) of every direction of every patch. """

        mus, counts = zip(*(p.directions() for p in self.patches))
        mus = np.concatenate(mus)

        if np.any(mus <= 0.0):
            pid = next(p.id for p in self.patches if np.any(p.eigenvalues <= 0.0))
            raise ValidationError(f"patch '{pid}' has a zero-variance direction")

        return mus, np.concatenate(counts)


@dataclass(frozen=True)
class RootResult:
    """
    Outcome of a bisection.

    Attributes
    ----------
    value
        Root estimate, the upper end of the range when `capped`.
    residual
        |G(value) - 1|.
    bracket
        Final (lo, hi) bracket.
    iterations
        Number of bisection steps.
    capped
        True if the product stays below 1 over the whole search range.
    """

    value: float
    residual: float
    bracket: tuple[float, float]
    iterations: int
    capped: bool = False

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class KYReport:
    """
    Kaplan-Yorke dimension of a Lyapunov spectrum.

    Attributes
    ----------
    exponents
        Lyapunov exponents sorted descending.
    expanding
        Number of positive exponents.
    j_star
        Largest j whose partial sum is >= 0.
    dimension
        Kaplan-Yorke dimension in [0, n].
    mode
        Origin of the spectrum.
    condition_holds
        Whether the expanding mass is below one contracting exponent, so
        the closed form is exact. None when it does not apply.
    closed_form
        Closed-form dimension when the condition holds.
    lower_bound
        Lower bound reported when the condition fails.
    saturated
        No contracting direction, the dimension is n.
    patch_exponents
        Per-patch mean Lyapunov exponent (isotropic spectra).
    """

    exponents: tuple[float, ...]
    expanding: int
    j_star: int
    dimension: float
    mode: KYMode = KYMode.RAW
    condition_holds: bool | None = None
    closed_form: float | None = None
    lower_bound: float | None = None
    saturated: bool = False
    patch_exponents: Mapping[str, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.exponents)


def _log_moran_terms(s: Schedule, lam: float, suppression: np.ndarray | None = None) -> np.ndarray:
    excess = expansion_excess_profile(s, lam)
    if suppression is not None:
        excess = excess - suppression

    return excess


def log_moran(s: Schedule, lam: float) -> float:
    """
    Natural log of the Moran product, summed with compensation.

    Parameters
    ----------
    s
        Schedule.
    lam
        Direction variance, > 0.
    """

    excess = _log_moran_terms(s, lam)

    if np.any(excess <= -1.0):
        t = int(s.timestep_labels[np.argmax(excess <= -1.0)])
        raise ValidationError(f"expansion factor is not positive at t={t}")

    return math.fsum(np.log1p(excess).tolist())


def moran_product(s: Schedule, lam: float) -> float:
    """
    Moran product G(lambda), the product of f_t(lambda) over every step.

    Strictly increasing in lambda, G(1) < 1 and G -> 1/sqrt(alpha_bar_T).

    Parameters
    ----------
    s
        Schedule.
    lam
        Direction variance, > 0.
    """

    return math.exp(log_moran(s, lam))


def mean_lyapunov(s: Schedule, mu: float) -> float:
    """ Mean Lyapunov exponent (1/T) log G(mu) along a direction of variance mu. """
    return log_moran(s, mu) / s.T


def _bisect(log_g: Callable[[float], float], lo: float, hi: float, tol: float) -> RootResult:
    value = 0.5 * (lo + hi)
    residual = math.inf
    iterations = 0

    while iterations < BISECTION_MAX_ITERATIONS:
        iterations += 1
        value = 0.5 * (lo + hi)

        lg = log_g(value)
        residual = abs(math.expm1(lg)) if math.isfinite(lg) else 1.0

        if residual < tol:
            break

        if lg < 0.0: lo = value
        else: hi = value

        if hi - lo <= 4.0 * math.ulp(hi):
            logger.debug("Bisection interval collapsed at %r with residual %.3g", value, residual)
            break

    return RootResult(value, residual, (lo, hi), iterations)


def moran_root(s: Schedule, tol: float = MORAN_TOLERANCE, cap: float = BRACKET_CAP) -> RootResult:
    """
    Root lambda** of the Moran equation G(lambda) = 1.

    Bisection on [1, hi], hi doubled from 2 until G(hi) > 1.

    Parameters
    ----------
    s
        Schedule.
    tol
        Target |G - 1|.
    cap
        Largest upper bracket tried.
    """

    if not tol > 0.0:
        raise ValidationError(f"tolerance must be positive, got {tol}")

    def log_g(lam: float) -> float:
        return log_moran(s, lam)

    lo, hi = 1.0, 2.0
    if log_g(lo) >= 0.0:
        raise BracketError("Moran product is not below 1 at lambda = 1")

    while log_g(hi) <= 0.0:
        lo, hi = hi, 2.0 * hi
        logger.debug("Growing Moran bracket to [%g, %g]", lo, hi)

        if hi > cap:
            raise BracketError(f"Moran product stays below 1 up to lambda = {cap:g}")

    result = _bisect(log_g, lo, hi, tol)
    logger.info("Moran root %.12g after %d iterations (residual %.3g)", result.value, result.iterations, result.residual)
    return result


def ky_dimension(exponents: Sequence[float] | np.ndarray, mode: KYMode = KYMode.RAW) -> KYReport:
    """
    Kaplan-Yorke dimension of a Lyapunov spectrum.

    d = j* + (l_1 + ... + l_j*) / |l_{j*+1}|, with d = 0 if l_1 < 0 and
    d = n if the full sum is >= 0. The input order does not matter.

    Parameters
    ----------
    exponents
        Lyapunov exponents.
    mode
        Recorded origin of the spectrum.
    """

    ell = np.sort(np.asarray(exponents, dtype=np.float64).reshape(-1))[::-1]

    if len(ell) == 0:
        raise ValidationError("Lyapunov spectrum is empty")

    if not np.all(np.isfinite(ell)):
        raise ValidationError("Lyapunov spectrum contains non-finite exponents")

    n = len(ell)
    partial = np.cumsum(ell)
    expanding = int(np.count_nonzero(ell > 0.0))

    non_negative = partial >= 0.0
    j_star = n if non_negative.all() else int(np.argmin(non_negative))

    if j_star == n:
        dimension = float(n)
    elif j_star == 0:
        dimension = 0.0
    else:
        dimension = j_star + float(partial[j_star - 1]) / abs(float(ell[j_star]))

    return KYReport(tuple(ell.tolist()), expanding, j_star, dimension, mode, saturated=bool(ell[-1] >= 0.0))


def _closed_form(
        report: KYReport,
        exponents: np.ndarray,
        counts: np.ndarray
        ) -> KYReport:
    positive = exponents > 0.0
    negative = exponents < 0.0

    if not negative.any():
        logger.debug("No contracting direction, Kaplan-Yorke dimension saturates")
        return _replace(report, condition_holds=None, saturated=True)

    n_plus = int(counts[positive].sum())
    mass = math.fsum((counts[positive] * exponents[positive]).tolist())

    # Least contracting direction closes the partial sums first
    weakest = float(exponents[negative].max())
    condition = mass < abs(weakest)

    if condition:
        return _replace(report, condition_holds=True, closed_form=n_plus + mass / abs(weakest))

    smallest_positive = float(exponents[positive].min())
    # Divisor is the most negative exponent so the bound never exceeds the dimension
    strongest = abs(float(exponents[negative].min()))
    bound = min(float(report.n), n_plus + n_plus * smallest_positive / strongest)

    logger.warning("Closed-form Kaplan-Yorke condition fails, reporting lower bound %.6g", bound)
    return _replace(report, condition_holds=False, lower_bound=bound)


def _replace(report: KYReport, **changes) -> KYReport:
    values = {name: getattr(report, name) for name in report.__dataclass_fields__}
    values.update(changes)
    return KYReport(**values)


def _patch_exponents(s: Schedule, spectrum: PatchSpectrum, suppression: Mapping[str, np.ndarray] | None) -> tuple[np.ndarray, np.ndarray]:
    exps = []
    counts = []

    for patch in spectrum.patches:
        mus, mults = patch.directions()
        if np.any(mus <= 0.0):
            raise ValidationError(f"patch '{patch.id}' has a zero-variance direction")

        for mu, mult in zip(mus, mults):
            excess = _log_moran_terms(s, float(mu), None if suppression is None else suppression[patch.id])
            exps.append(math.fsum(np.log1p(excess).tolist()) / s.T)
            counts.append(int(mult))

    return np.array(exps), np.array(counts, dtype=np.int64)


def ky_gaussian(s: Schedule, spectrum: PatchSpectrum) -> KYReport:
    """
    Kaplan-Yorke dimension of the chain attractor under Gaussian patches.

    Every direction of variance mu has Lyapunov exponent (1/T) log G(mu).
    The exact dimension comes from the explicit exponent multiset; the
    closed form is reported next to it when it applies.

    Parameters
    ----------
    s
        Schedule.
    spectrum
        Patch spectra, isotropic or full.
    """

    exponents, counts = _patch_exponents(s, spectrum, None)
    report = ky_dimension(np.repeat(exponents, counts), KYMode.GAUSSIAN)

    if spectrum.is_isotropic:
        report = _replace(report, patch_exponents={p.id: float(e) for p, e in zip(spectrum.patches, exponents)})

    return _closed_form(report, exponents, counts)


def _suppression_rows(s: Schedule, spectrum: PatchSpectrum, table: SuppressionTable) -> dict[str, np.ndarray]:
    rows = {}

    for patch in spectrum.patches:
        suppression = table.for_schedule(s, patch.id)
        g = 1.0 + expansion_excess_profile(s, patch.lam) - suppression

        if np.any(g <= 0.0):
            i = int(np.argmax(g <= 0.0))
            t = int(s.timestep_labels[i])
            raise SuppressionError(
                f"suppression {suppression[i]!r} reverses the diagonal factor of patch '{patch.id}' at t={t}",
                patch.id,
                t
            )

        rows[patch.id] = suppression

    return rows


def ky_suppressed(s: Schedule, spectrum: PatchSpectrum, table: SuppressionTable) -> KYReport:
    """
    Kaplan-Yorke dimension with measured suppression.

    Each patch gets the effective exponent (1/T) sum log(f_t(lambda_k) - S_k,t).

    Parameters
    ----------
    s
        Schedule.
    spectrum
        Isotropic patch spectra.
    table
        Suppression covering every patch.
    """

    if not spectrum.is_isotropic:
        raise ValidationError("suppression-corrected dimension needs isotropic patch spectra")

    rows = _suppression_rows(s, spectrum, table)

    effective, counts = _patch_exponents(s, spectrum, rows)
    gaussian, _ = _patch_exponents(s, spectrum, None)

    assert np.all(effective <= gaussian), "suppression raised an effective exponent"

    report = ky_dimension(np.repeat(effective, counts), KYMode.SUPPRESSED)
    baseline = ky_dimension(np.repeat(gaussian, counts), KYMode.GAUSSIAN)

    assert report.dimension <= baseline.dimension + 1e-12, "suppression raised the dimension"

    report = _replace(report, patch_exponents={p.id: float(e) for p, e in zip(spectrum.patches, effective)})
    return _closed_form(report, effective, counts)


def moran_root_suppressed(
        s: Schedule,
        table: SuppressionTable,
        lambda_range: tuple[float, float] = (1.0, SUPPRESSED_ROOT_CAP),
        mode: SuppressionMode = SuppressionMode.PER_PATCH,
        tol: float = MORAN_TOLERANCE,
        patches: Sequence[str] | None = None
        ) -> dict[str, RootResult]:
    """
    Roots of the suppression-corrected Moran equation prod (f_t(lambda) - S_t) = 1.

    A product that stays below 1 up to the top of the range is reported as
    a capped result at the range end rather than an error.

    Parameters
    ----------
    s
        Schedule.
    table
        Suppression table.
    lambda_range
        Search interval (lo, hi).
    mode
        One root per patch, or a single root keyed `average` for the
        patch-averaged suppression.
    tol
        Target |G - 1|.
    patches
        Patches to solve in per-patch mode, all table patches by default.
    """

    lo, hi = lambda_range
    if not 0.0 < lo < hi:
        raise ValidationError(f"invalid search range [{lo}, {hi}]")

    if not tol > 0.0:
        raise ValidationError(f"tolerance must be positive, got {tol}")

    if mode is SuppressionMode.AVERAGED:
        rows = {"average": table.averaged(s)}
    else:
        rows = {p: table.for_schedule(s, p) for p in (patches or table.patches)}

    results = {}
    for key, suppression in rows.items():

        def log_g(lam: float, suppression=suppression) -> float:
            excess = _log_moran_terms(s, lam, suppression)
            if np.any(excess <= -1.0):
                return -math.inf
            return math.fsum(np.log1p(excess).tolist())

        top = log_g(hi)
        if top < 0.0:
            logger.warning("Suppressed Moran product for '%s' stays below 1 up to lambda = %g", key, hi)
            residual = abs(math.expm1(top)) if math.isfinite(top) else 1.0
            results[key] = RootResult(hi, residual, (lo, hi), 0, capped=True)
            continue

        if log_g(lo) >= 0.0:
            raise BracketError(f"suppressed Moran product for '{key}' is not below 1 at lambda = {lo:g}")

        results[key] = _bisect(log_g, lo, hi, tol)
        logger.info("Suppressed Moran root for '%s': %.12g", key, results[key].value)

    return results


def _log_expansion_grid(s: Schedule, spectrum: PatchSpectrum) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mus, counts = spectrum.directions()
    grid = np.log1p(np.array([expansion_excess_profile(s, float(mu)) for mu in mus]))
    return mus, counts, grid


def info_gain_profile(s: Schedule, spectrum: PatchSpectrum, mode: InfoGainMode = InfoGainMode.QUADRATIC) -> np.ndarray:
    """
    Information gain of every step.

    Quadratic mode is sum n_k (log f_t)^2, exact mode the Gaussian KL
    sum (n_k / 2)(e^(2e) - 1 - 2e) with e = log f_t.
    """

    _, counts, eps = _log_expansion_grid(s, spectrum)
    weights = counts[:, None].astype(np.float64)

    if mode is InfoGainMode.EXACT:
        terms = 0.5 * weights * (np.expm1(2.0 * eps) - 2.0 * eps)
    else:
        terms = weights * eps ** 2

    return terms.sum(axis=0)


def info_gain(s: Schedule, t: int, spectrum: PatchSpectrum, mode: InfoGainMode = InfoGainMode.QUADRATIC) -> float:
    """
    Information gain of step t.

    Parameters
    ----------
    s
        Schedule.
    t
        Step index in 1..T.
    spectrum
        Patch spectra.
    mode
        Quadratic approximation or exact Gaussian KL.
    """

    _check_step(s, t)
    return float(info_gain_profile(s, spectrum, mode)[t - 1])


def expanding_count(spectrum: PatchSpectrum, lambda_star_star: float) -> int:
    """ Number of directions with variance above lambda**. """

    mus, counts = spectrum.directions()
    return int(counts[mus > lambda_star_star].sum())


def ky_growth_profile(s: Schedule, spectrum: PatchSpectrum, lambda_star_star: float) -> np.ndarray:
    """ Per-step growth sum n_k log f_t(lambda_k) over directions above lambda**. """

    mus, counts, eps = _log_expansion_grid(s, spectrum)
    mask = mus > lambda_star_star

    if not mask.any():
        return np.zeros(s.T)

    return (counts[mask, None] * eps[mask]).sum(axis=0)


def ky_growth(s: Schedule, t: int, spectrum: PatchSpectrum, lambda_star_star: float) -> float:
    """
    Contribution of step t to the Kaplan-Yorke dimension.

    Parameters
    ----------
    s
        Schedule.
    t
        Step index in 1..T.
    spectrum
        Patch spectra.
    lambda_star_star
        Moran root of the schedule.
    """

    _check_step(s, t)
    return float(ky_growth_profile(s, spectrum, lambda_star_star)[t - 1])
