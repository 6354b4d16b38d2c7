"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import math
import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from pifsched.attractor import PatchSpectrum, expanding_count, info_gain_profile, ky_growth_profile, moran_root
from pifsched.contraction import lambda_star_profile
from pifsched.errors import PifsError, ValidationError
from pifsched.platform import thread_count
from pifsched.schedule import Schedule, ThresholdStats, make_cosine, threshold_stats
from pifsched.stats import cv, fsum_mean, spearman


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleReport:
    """
    One row of a schedule comparison.

    Attributes
    ----------
    name
        Schedule name.
    stats
        Contraction threshold statistics.
    lambda_star_min
        Smallest interior expansion threshold (t = 2..T-1).
    lambda_star_max
        Largest interior expansion threshold.
    lambda_star_argmin
        Timestep label of the smallest interior threshold.
    moran_root
        Moran root, None if it cannot be bracketed.
    ig_cv
        Coefficient of variation of the per-step information gain.
    dd_cv
        Coefficient of variation of |per-step dimension growth|.
    rho
        Spearman correlation between information gain and |growth|.
    ratio_to_theory
        Mean of N++ IG_t / growth_t^2 over steps with non-zero growth.
    n_plus_plus
        Number of directions with variance above the Moran root.
    """

    name: str
    stats: ThresholdStats
    lambda_star_min: float
    lambda_star_max: float
    lambda_star_argmin: int
    moran_root: float | None = None
    ig_cv: float | None = None
    dd_cv: float | None = None
    rho: float | None = None
    ratio_to_theory: float | None = None
    n_plus_plus: int | None = None


@dataclass(frozen=True)
class EqualisationReport:
    """
    Check that a schedule cannot hold its contraction threshold constant.

    Attributes
    ----------
    spread
        max L* - min L*.
    mean
        Mean L*.
    exceeds
        spread > tol * mean.
    unit_crossings
        Number of cumulative signal values a in the schedule with
        g(a) = mean sqrt(1 - a) + sqrt(a) equal to 1 within tol.
    exempt
        True for T < 3, where a constant threshold is attainable.
    """

    spread: float
    mean: float
    exceeds: bool
    unit_crossings: int
    exempt: bool = False

    @property
    def mechanism_holds(self) -> bool:
        return self.unit_crossings <= 2


@dataclass(frozen=True)
class OffsetRow:
    s_off: float
    v_1: float
    L_1_star: float
    ratio: float


@dataclass(frozen=True)
class CensusReport:
    """
    Expansion-forcing steps per patch.

    Attributes
    ----------
    counts
        Patch id -> number of steps with lambda_k > lambda*(t).
    steps
        Number of steps scanned per patch.
    fraction
        Forcing (patch, step) pairs over all pairs.
    """

    counts: Mapping[str, int]
    steps: int
    fraction: float


@dataclass(frozen=True)
class Allocation:
    """
    N-step sampling schedule with equal per-step contraction load.

    Attributes
    ----------
    N
        Number of selected steps.
    positions
        Continuous positions u_i in (0, 1], strictly increasing.
    timesteps
        Selected parent timestep labels, strictly increasing.
    loads
        Per-step load before integer snapping, normalised to 1 for a
        perfectly equal split.
    profile
        Threshold nodes L*_0..L*_T on u_j = j/T, with L*_0 = L*_1.
    mass
        Integral of 1 / L*(u) over [0, 1].
    """

    N: int
    positions: tuple[float, ...]
    timesteps: tuple[int, ...]
    loads: tuple[float, ...]
    profile: tuple[float, ...]
    mass: float

    @property
    def load_spread(self) -> float:
        """ (max load - min load) / mean load. """
        return (max(self.loads) - min(self.loads)) / fsum_mean(self.loads)

    def density(self, u: float | np.ndarray) -> np.ndarray:
        """
        Normalised step density 1 / (L*(u) Z) at positions u in [0, 1].

        L*(u) is the linear interpolation of `profile` on u_j = j/T and Z
        makes the density integrate to 1.
        """

        grid = np.linspace(0.0, 1.0, len(self.profile))
        return 1.0 / (np.interp(u, grid, self.profile) * self.mass)


def _interior(values: np.ndarray) -> slice:
    return slice(1, len(values) - 1) if len(values) >= 3 else slice(0, len(values))


def _report(name: str, s: Schedule, spectrum: PatchSpectrum | None) -> ScheduleReport:
    roots = lambda_star_profile(s)
    window = _interior(roots)
    interior = roots[window]
    i_min = int(np.argmin(interior)) + (window.start or 0)

    try:
        root = moran_root(s).value
    except PifsError as e:
        logger.warning("No Moran root for schedule '%s': %s", name, e)
        root = None

    report = dict(
        name=name,
        stats=threshold_stats(s),
        lambda_star_min=float(interior.min()),
        lambda_star_max=float(interior.max()),
        lambda_star_argmin=int(s.timestep_labels[i_min]),
        moran_root=root
    )

    if spectrum is not None and root is not None:
        ig = info_gain_profile(s, spectrum)
        growth = np.abs(ky_growth_profile(s, spectrum, root))
        n_pp = expanding_count(spectrum, root)

        report["n_plus_plus"] = n_pp
        report["ig_cv"] = cv(ig)

        if np.any(growth > 0.0):
            report["dd_cv"] = cv(growth)

            nonzero = growth > 0.0
            report["ratio_to_theory"] = fsum_mean(ig[nonzero] / growth[nonzero] ** 2) * n_pp

            try:
                report["rho"] = spearman(ig, growth).rho
            except ValidationError:
                logger.warning("Rank correlation undefined for schedule '%s'", name)

    return ScheduleReport(**report)


def compare_schedules(
        schedules: Mapping[str, Schedule] | Sequence[Schedule],
        spectrum: PatchSpectrum | None = None,
        threads: int | None = None
        ) -> list[ScheduleReport]:
    """
    Compare schedules by their contraction statistics.

    Threshold statistics are always reported; information gain columns need
    a spectrum. Reports come back in input order.

    Parameters
    ----------
    schedules
        Named schedules, or a sequence named by position and kind.
    spectrum
        Patch spectra for the information gain columns.
    threads
        Worker count, see `platform.thread_count`.
    """

    if not isinstance(schedules, Mapping):
        schedules = {f"{i}:{s.kind.value}": s for i, s in enumerate(schedules)}

    if not schedules:
        raise ValidationError("no schedules to compare")

    names = list(schedules)
    with ThreadPoolExecutor(max_workers=thread_count(threads)) as pool:
        reports = list(pool.map(lambda name: _report(name, schedules[name], spectrum), names))

    logger.info("Compared %d schedule(s)", len(reports))
    return reports


def equalisation_check(s: Schedule, tol: float = 1e-9) -> EqualisationReport:
    """
    Verify that the contraction threshold of a schedule is not constant.

    Parameters
    ----------
    s
        Schedule, T >= 3 for the check to be meaningful.
    tol
        Relative spread tolerance and unit-crossing tolerance.
    """

    l_star = s.steps.L_star
    spread = float(l_star.max() - l_star.min())
    mean = fsum_mean(l_star)

    # Concave in a with g(1) = 1, so it meets 1 at most twice
    g = mean * np.sqrt(1.0 - s.alpha_bar) + np.sqrt(s.alpha_bar)
    crossings = int(np.count_nonzero(np.abs(g - 1.0) <= tol))

    if s.T < 3:
        logger.info("Equalisation check exempt for T = %d", s.T)
        return EqualisationReport(spread, mean, spread > tol * mean, crossings, exempt=True)

    return EqualisationReport(spread, mean, spread > tol * mean, crossings)


def cosine_offset_analysis(T: int, offsets: Sequence[float]) -> list[OffsetRow]:
    """
    Boundary threshold of cosine schedules against their offset.

    Parameters
    ----------
    T
        Number of steps.
    offsets
        Cosine offsets >= 0. The ratio column is relative to offset 0
        whether or not 0 is listed.
    """

    base = make_cosine(T, 0.0).steps.L_star[0]
    rows = []

    for s_off in offsets:
        steps = make_cosine(T, s_off).steps
        rows.append(OffsetRow(float(s_off), float(steps.v[0]), float(steps.L_star[0]), float(steps.L_star[0] / base)))

    return rows


def expansion_census(s: Schedule, spectrum: PatchSpectrum, include_boundary: bool = True) -> CensusReport:
    """
    Count the steps at which each patch is expanded by the Gaussian dynamics.

    Parameters
    ----------
    s
        Schedule.
    spectrum
        Patch spectra, leading eigenvalues are used.
    include_boundary
        Include the first and last steps.
    """

    roots = lambda_star_profile(s)
    if not include_boundary:
        roots = roots[1:-1]

    if len(roots) == 0:
        raise ValidationError("no steps left to scan")

    counts = {p.id: int(np.count_nonzero(p.lam > roots)) for p in spectrum.patches}
    fraction = sum(counts.values()) / (len(counts) * len(roots))

    return CensusReport(counts, len(roots), fraction)


def minsnr_boundary(s: Schedule, gamma: float) -> tuple[int, float]:
    """
    Where the Min-SNR clamp starts to act.

    Returns the label of the largest step with SNR_t >= gamma and L* there.
    """

    snr = s.steps.snr
    if not snr[-1] <= gamma <= snr[0]:
        raise ValidationError(f"gamma {gamma} is outside the SNR range [{snr[-1]:.6g}, {snr[0]:.6g}]")

    i = int(np.count_nonzero(snr >= gamma)) - 1
    return int(s.timestep_labels[i]), float(s.steps.L_star[i])


def _log1p_ratio(z: np.ndarray) -> np.ndarray:
    safe = np.where(z == 0.0, 1.0, z)
    return np.where(z == 0.0, 1.0, np.log1p(safe) / safe)


def _expm1_ratio(q: float) -> float:
    return 1.0 if q == 0.0 else math.expm1(q) / q


def _nearest_free(want: int, taken: set[int], T: int) -> int:
    for offset in range(T):
        for candidate in (want - offset, want + offset):
            if 1 <= candidate <= T and candidate not in taken:
                return candidate

    raise ValidationError(f"no free step left on a {T}-step chain")


def _snap(positions: np.ndarray, T: int) -> list[int]:
    taken: set[int] = set()

    for u in positions:
        want = min(max(int(round(u * T)), 1), T)
        taken.add(_nearest_free(want, taken, T))

    return sorted(taken)


def allocate_density(l_star: Sequence[float] | np.ndarray, N: int) -> Allocation:
    """
    Place N steps so that each carries the same contraction load.

    The threshold profile is read on the grid u_j = j/T (with L*_0 = L*_1),
    interpolated linearly in u, and positions are drawn by inverting the
    cumulative density 1/L*(u) at i/N. Positions are snapped to the nearest
    free step index in 1..T.

    Parameters
    ----------
    l_star
        Per-step thresholds, all > 0.
    N
        Number of steps, 1 <= N <= T.
    """

    nodes = np.asarray(l_star, dtype=np.float64)
    T = len(nodes)

    if T == 0 or np.any(nodes <= 0.0) or not np.all(np.isfinite(nodes)):
        raise ValidationError("threshold profile must be non-empty, finite and positive")

    if not 1 <= N <= T:
        raise ValidationError(f"cannot place {N} steps on a {T}-step chain")

    nodes = np.concatenate(([nodes[0]], nodes))
    h = 1.0 / T
    left, right = nodes[:-1], nodes[1:]

    cells = (h / left) * _log1p_ratio((right - left) / left)
    cdf = np.concatenate(([0.0], np.cumsum(cells)))
    total = cdf[-1]

    positions = []
    for i in range(1, N + 1):
        target = total * i / N
        j = min(int(np.searchsorted(cdf, target, side="left")) - 1, T - 1)
        j = max(j, 0)

        r = target - cdf[j]
        slope = (right[j] - left[j]) / h
        x = min(r * left[j] * _expm1_ratio(slope * r), h)
        positions.append(j * h + x)

    positions[-1] = 1.0
    u = np.array(positions)

    def cumulative(b: float) -> float:
        j = min(int(b * T), T - 1)
        x = b - j * h
        z = np.array((right[j] - left[j]) * x / (h * left[j]))
        return float(cdf[j] + (x / left[j]) * _log1p_ratio(z))

    # Load of every step under the same interpolated density
    cum = np.array([cumulative(b) for b in np.concatenate(([0.0], u))])
    loads = np.diff(cum) * N / total

    timesteps = _snap(u, T)
    allocation = Allocation(
        N,
        tuple(u.tolist()),
        tuple(timesteps),
        tuple(loads.tolist()),
        tuple(nodes.tolist()),
        float(total)
    )

    logger.debug("Allocated %d steps, load spread %.3g", N, allocation.load_spread)
    return allocation


def allocate_steps(s_parent: Schedule, N: int) -> Allocation:
    """
    Optimal N-step sampling schedule of a parent chain.

    Parameters
    ----------
    s_parent
        Parent schedule.
    N
        Number of steps, at most the parent length.
    """

    if N > s_parent.T:
        raise ValidationError(f"cannot place {N} steps on a {s_parent.T}-step chain")

    allocation = allocate_density(s_parent.steps.L_star, N)
    labels = s_parent.timestep_labels

    return Allocation(
        allocation.N,
        allocation.positions,
        tuple(int(labels[t - 1]) for t in allocation.timesteps),
        allocation.loads,
        allocation.profile,
        allocation.mass
    )
