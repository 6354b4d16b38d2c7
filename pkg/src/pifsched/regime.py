"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import csv
import math
import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType

import numpy as np

from pifsched.common import SUPPRESSION_HEADER, SUPPRESSION_NEGATIVE_TOLERANCE
from pifsched.contraction import expansion_profile, f_t, f_t_derivative
from pifsched.errors import FormatError, ValidationError
from pifsched.models import Interpolation
from pifsched.path import existing_file
from pifsched.schedule import Schedule, _check_step
from pifsched.stats import RankCorrelation, spearman


logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SuppressionTable:
    """
    Measured directional suppression on a (patch, timestep) grid.

    Each patch carries its own sorted list of measured timesteps. Between
    measurements values are interpolated in t, beyond the measured ends the
    nearest measured value is used.

    Attributes
    ----------
    rows
        Patch id -> (timesteps, values), both read-only arrays.
    interpolation
        How values between measured timesteps are read.
    """

    rows: Mapping[str, tuple[np.ndarray, np.ndarray]]
    interpolation: Interpolation = Interpolation.LINEAR

    def __post_init__(self) -> None:
        if not self.rows:
            raise ValidationError("suppression table has no patches")

        frozen = {}
        for patch, (timesteps, values) in self.rows.items():
            ts = np.array(timesteps, dtype=np.int64)
            vs = np.array(values, dtype=np.float64)

            if ts.ndim != 1 or ts.shape != vs.shape or len(ts) == 0:
                raise ValidationError(f"patch '{patch}' needs matching, non-empty timestep and value lists")

            order = np.argsort(ts, kind="stable")
            ts, vs = ts[order], vs[order]

            if np.any(np.diff(ts) == 0):
                t = int(ts[np.argmax(np.diff(ts) == 0)])
                raise ValidationError(f"patch '{patch}' has two values at t={t}")

            if not np.all(np.isfinite(vs)):
                raise ValidationError(f"patch '{patch}' has non-finite suppression values")

            vs = _clamp_negative(vs, str(patch))

            ts.setflags(write=False)
            vs.setflags(write=False)
            frozen[str(patch)] = (ts, vs)

        object.__setattr__(self, "rows", MappingProxyType(frozen))

    @classmethod
    def from_grid(cls,
            patches: Sequence[str],
            timesteps: Sequence[int],
            values: Sequence[Sequence[float]] | np.ndarray,
            interpolation: Interpolation = Interpolation.LINEAR
            ) -> "SuppressionTable":
        """
        Build a table from a dense grid.

        Parameters
        ----------
        patches
            Patch ids, one per grid row.
        timesteps
            Measured timesteps, one per grid column.
        values
            Array of shape (len(patches), len(timesteps)).
        interpolation
            Interpolation rule.
        """

        grid = np.asarray(values, dtype=np.float64)
        if grid.shape != (len(patches), len(timesteps)):
            raise ValidationError(f"grid shape {grid.shape} does not match {len(patches)} x {len(timesteps)}")

        return cls({p: (timesteps, grid[i]) for i, p in enumerate(patches)}, interpolation)

    @classmethod
    def zeros(cls, patches: Sequence[str], timesteps: Sequence[int]) -> "SuppressionTable":
        """ Table with S = 0 everywhere, the Gaussian baseline. """
        return cls.from_grid(patches, timesteps, np.zeros((len(patches), len(timesteps))))

    @classmethod
    def from_csv(cls,
            path: Path | str,
            interpolation: Interpolation = Interpolation.LINEAR
            ) -> "SuppressionTable":
        """
        Read a `patch,t,S` table, rows in any order.

        Parameters
        ----------
        path
            CSV file.
        interpolation
            Interpolation rule.
        """

        path = existing_file(path)
        collected: dict[str, tuple[list[int], list[float]]] = {}

        with open(path, newline="", encoding="utf-8") as file:
            reader = csv.reader(file)

            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != SUPPRESSION_HEADER:
                raise FormatError(f"expected header '{','.join(SUPPRESSION_HEADER)}'", path, 1)

            for row in reader:
                line = reader.line_num
                if not row or all(not cell.strip() for cell in row):
                    continue

                if len(row) != 3:
                    raise FormatError(f"expected 3 fields, got {len(row)}", path, line)

                patch = row[0].strip()
                if not patch:
                    raise FormatError("empty patch id", path, line, 1)

                try:
                    t = int(row[1])
                except ValueError:
                    raise FormatError(f"timestep '{row[1].strip()}' is not an integer", path, line, 2)

                try:
                    value = float(row[2])
                except ValueError:
                    raise FormatError(f"suppression '{row[2].strip()}' is not a number", path, line, 3)

                if not math.isfinite(value):
                    raise FormatError("suppression value is not finite", path, line, 3)

                if value < SUPPRESSION_NEGATIVE_TOLERANCE:
                    raise FormatError(f"negative suppression {value!r}", path, line, 3)

                if t < 1:
                    raise FormatError(f"timestep {t} is below 1", path, line, 2)

                ts, vs = collected.setdefault(patch, ([], []))
                if t in ts:
                    raise FormatError(f"duplicate entry for patch '{patch}' at t={t}", path, line)

                ts.append(t)
                vs.append(value)

        if not collected:
            raise FormatError("suppression table has no rows", path)

        table = cls(collected, interpolation)
        logger.info("Read suppression table with %d patch(es) from %s", len(table.patches), path)
        return table

    @property
    def patches(self) -> tuple[str, ...]:
        return tuple(self.rows)

    def _row(self, patch: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.rows[patch]
        except KeyError:
            raise ValidationError(f"patch '{patch}' is not in the suppression table")

    def values_at(self, patch: str, timesteps: Sequence[int] | np.ndarray) -> np.ndarray:
        """
        Suppression of one patch at the given timestep labels.

        Parameters
        ----------
        patch
            Patch id.
        timesteps
            Timestep labels to read.
        """

        ts, vs = self._row(patch)
        query = np.asarray(timesteps, dtype=np.float64)

        if self.interpolation is Interpolation.LINEAR:
            return np.interp(query, ts, vs)

        # Nearest measured timestep, ties go to the earlier one
        upper = np.clip(np.searchsorted(ts, query, side="left"), 0, len(ts) - 1)
        lower = np.clip(upper - 1, 0, len(ts) - 1)
        pick_lower = np.abs(query - ts[lower]) <= np.abs(ts[upper] - query)
        return np.where(pick_lower, vs[lower], vs[upper])

    def value(self, patch: str, t: int) -> float:
        """ Suppression of one patch at a single timestep label. """
        return float(self.values_at(patch, [t])[0])

    def for_schedule(self, s: Schedule, patch: str) -> np.ndarray:
        """ Suppression of one patch at every executed step of a schedule. """
        return self.values_at(patch, s.timestep_labels)

    def averaged(self, s: Schedule) -> np.ndarray:
        """ Patch-averaged suppression at every executed step of a schedule. """

        grid = np.array([self.for_schedule(s, p) for p in self.patches])
        return grid.mean(axis=0)


def _clamp_negative(values: np.ndarray, patch: str) -> np.ndarray:
    if np.any(values < SUPPRESSION_NEGATIVE_TOLERANCE):
        raise ValidationError(
            f"patch '{patch}' has suppression {values.min()!r} below {SUPPRESSION_NEGATIVE_TOLERANCE}"
        )

    negative = values < 0.0
    if np.any(negative):
        logger.warning("Clamping %d small negative suppression value(s) of patch '%s' to 0", int(negative.sum()), patch)
        values = np.where(negative, 0.0, values)

    return values


@dataclass(frozen=True)
class PatchRelease:
    """
    Release analysis of one patch.

    Attributes
    ----------
    patch
        Patch id.
    lam
        Patch variance.
    margins
        Suppression margin at every executed step, read-only.
    t_rel
        Largest timestep label with a non-positive margin, None if the margin
        is positive everywhere.
    """

    patch: str
    lam: float
    margins: np.ndarray
    t_rel: int | None

    @property
    def gamma_min(self) -> float:
        return float(self.margins.min())

    @property
    def gamma_max(self) -> float:
        return float(self.margins.max())


@dataclass(frozen=True)
class ReleaseReport:
    """
    Release times of every patch.

    Attributes
    ----------
    releases
        One entry per patch, in input order.
    span
        Latest minus earliest release time among released patches, None when
        fewer than two patches release.
    """

    releases: tuple[PatchRelease, ...]
    span: int | None

    def __getitem__(self, patch: str) -> PatchRelease:
        for release in self.releases:
            if release.patch == patch:
                return release

        raise KeyError(patch)

    def rows(self) -> Iterator[tuple[str, float, int | str, float, float]]:
        """ Rows of the release export, `never` for unreleased patches. """

        for r in self.releases:
            yield r.patch, r.lam, "never" if r.t_rel is None else r.t_rel, r.gamma_min, r.gamma_max


def margin(s: Schedule, table: SuppressionTable, lambda_k: float, k: str, t: int) -> float:
    """
    Suppression margin gamma = S_k,t - (f_t(lambda_k) - 1).

    A positive margin keeps the diagonal Rayleigh quotient of the patch below 1.

    Parameters
    ----------
    s
        Schedule.
    table
        Suppression table.
    lambda_k
        Patch variance.
    k
        Patch id.
    t
        Step index in 1..T.
    """

    _check_step(s, t)
    suppression = table.value(k, int(s.timestep_labels[t - 1]))
    return suppression - (f_t(s, t, lambda_k) - 1.0)


def kappa_diag(s: Schedule, table: SuppressionTable, lambda_k: float, k: str, t: int) -> float:
    """ Diagonal Rayleigh quotient f_t(lambda_k) - S_k,t of one patch. """

    _check_step(s, t)
    return f_t(s, t, lambda_k) - table.value(k, int(s.timestep_labels[t - 1]))


def release_times(s: Schedule, table: SuppressionTable, lambdas: Mapping[str, float]) -> ReleaseReport:
    """
    Release time of every patch.

    The release time is the largest step whose margin is <= 0, reported as
    its timestep label.

    Parameters
    ----------
    s
        Schedule.
    table
        Suppression table covering every patch.
    lambdas
        Patch id -> patch variance.
    """

    missing = [p for p in lambdas if p not in table.rows]
    if missing:
        raise ValidationError(f"suppression table has no row for patch(es) {', '.join(missing)}")

    labels = s.timestep_labels
    releases = []

    for patch, lam in lambdas.items():
        gamma = table.for_schedule(s, patch) - (expansion_profile(s, lam) - 1.0)
        gamma.setflags(write=False)

        released = np.flatnonzero(gamma <= 0.0)
        t_rel = int(labels[released[-1]]) if len(released) else None

        releases.append(PatchRelease(patch, float(lam), gamma, t_rel))

    times = [r.t_rel for r in releases if r.t_rel is not None]
    span = max(times) - min(times) if len(times) >= 2 else None

    logger.debug("Release times: %s", {r.patch: r.t_rel for r in releases})
    return ReleaseReport(tuple(releases), span)


def expansion_time_derivative(s: Schedule, t: int, lam: float) -> float:
    """
    d f_t(lambda) / dt by finite differences over adjacent steps.

    Central difference at interior steps, one-sided at the ends.
    """

    _check_step(s, t)

    if s.T < 2:
        raise ValidationError("time derivative needs at least two steps")

    f = expansion_profile(s, lam)
    labels = s.timestep_labels
    lo, hi = max(t - 2, 0), min(t, s.T - 1)

    return float((f[hi] - f[lo]) / (labels[hi] - labels[lo]))


def stratified_span(
        lambda_min: float,
        lambda_max: float,
        dS_dlambda: float,
        dS_dt: float,
        s: Schedule,
        t_bar: int,
        lambda_bar: float
        ) -> float:
    """
    Estimated spread of release times across patches.

    (lambda_max - lambda_min) (dS/dlambda - df/dlambda) / |dS/dt - df/dt|
    with both derivatives of f_t taken at (t_bar, lambda_bar). A negative
    result means the margin decreases with variance.

    Parameters
    ----------
    lambda_min, lambda_max
        Variance range of the patches.
    dS_dlambda
        Slope of suppression in patch variance.
    dS_dt
        Slope of suppression in time.
    s
        Schedule.
    t_bar
        Reference step index.
    lambda_bar
        Reference variance.
    """

    if lambda_max < lambda_min:
        raise ValidationError(f"lambda_max {lambda_max} is below lambda_min {lambda_min}")

    numerator = dS_dlambda - f_t_derivative(s, t_bar, lambda_bar)
    denominator = abs(dS_dt - expansion_time_derivative(s, t_bar, lambda_bar))

    if denominator == 0.0:
        raise ValidationError("stratified span is undefined, the margin does not move in time")

    return (lambda_max - lambda_min) * numerator / denominator


def mm1_threshold(s: Schedule, t: int) -> float:
    """ Smallest c_t (exclusive) for which the variance-monotonicity condition holds at step t. """

    _check_step(s, t)

    a = s.steps
    i = t - 1
    return float(-a.b[i] * math.sqrt(a.v[i]) * a.alpha_bar[i] / a.v[i] ** 2)


def mm1_sufficient(s: Schedule, t: int, c_t: float) -> bool:
    """
    Sufficient condition c_t v_t^2 > |b_t| sqrt(v_t) alpha_bar_t for the
    margin to increase with patch variance.

    Parameters
    ----------
    s
        Schedule.
    t
        Step index.
    c_t
        Suppression slope constant, > 0.
    """

    if not c_t > 0.0:
        raise ValidationError(f"c_t must be positive, got {c_t}")

    return c_t > mm1_threshold(s, t)


def mm1_window(s: Schedule, c_t: float) -> tuple[int, ...]:
    """ Timestep labels at which mm1_sufficient holds for a constant c_t. """

    labels = s.timestep_labels
    return tuple(int(labels[t - 1]) for t in range(1, s.T + 1) if mm1_sufficient(s, t, c_t))


def gaussian_patch_loss(s: Schedule, t: int, lam: float) -> float:
    """ Denoising loss lambda v_t / (alpha_bar_t lambda + v_t) of a Gaussian patch. """

    _check_step(s, t)

    if not lam > 0.0:
        raise ValidationError(f"variance lambda must be positive, got {lam}")

    a = s.steps
    i = t - 1
    return float(lam * a.v[i] / (a.alpha_bar[i] * lam + a.v[i]))


def spearman_vs_lambda(lambdas: Sequence[float], kappa_diag: Sequence[float]) -> RankCorrelation:
    """ Rank correlation between patch variances and diagonal block norms. """
    return spearman(lambdas, kappa_diag)
