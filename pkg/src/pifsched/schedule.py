"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import math
import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType

import numpy as np
from scipy.special import expit

from pifsched.common import ALPHA_BAR_FLOOR, BETA_CLIP
from pifsched.errors import ValidationError
from pifsched.models import ScheduleKind
from pifsched.stats import fsum_mean, population_std


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepArrays:
    """
    Every per-step scalar of a schedule, vectorised over t = 1..T.

    Index i of each array describes step t = i + 1. All arrays are read-only.

    Attributes
    ----------
    t
        Timestep labels (parent-chain indices for subsampled schedules).
    alpha_bar_prev
        Cumulative signal before the step.
    alpha_bar
        Cumulative signal after the step.
    v_prev
        Residual variance before the step.
    v
        Residual variance after the step.
    expand_ratio
        sqrt(alpha_bar_prev / alpha_bar), always > 1.
    expand_minus_one
        expand_ratio - 1 evaluated without cancellation.
    b
        DDIM score step coefficient, always < 0.
    L_star
        Per-step contraction threshold.
    snr
        Signal-to-noise ratio alpha_bar / v.
    logsnr
        Natural log of snr.
    """

    t: np.ndarray
    alpha_bar_prev: np.ndarray
    alpha_bar: np.ndarray
    v_prev: np.ndarray
    v: np.ndarray
    expand_ratio: np.ndarray
    expand_minus_one: np.ndarray
    b: np.ndarray
    L_star: np.ndarray
    snr: np.ndarray
    logsnr: np.ndarray


@dataclass(frozen=True, eq=False)
class Schedule:
    """
    Cumulative noise sequence alpha_bar_0..alpha_bar_T with its provenance.

    Everything else in the package is derived from this sequence. Instances
    are immutable; the stored array is a read-only copy.

    Attributes
    ----------
    alpha_bar
        Array of length T + 1 with alpha_bar[0] = 1, strictly decreasing,
        every value in (0, 1].
    kind
        Construction family.
    params
        Construction parameters (beta endpoints, offset, parent metadata).
    executed_timesteps
        Parent-chain indices executed by a subsampled schedule, None otherwise.
    """

    alpha_bar: np.ndarray
    kind: ScheduleKind = ScheduleKind.CUSTOM
    params: Mapping[str, object] = field(default_factory=dict)
    executed_timesteps: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        alpha_bar = np.array(self.alpha_bar, dtype=np.float64)

        if alpha_bar.ndim != 1 or len(alpha_bar) < 2:
            raise ValidationError("alpha_bar needs at least two entries (T >= 1)")

        if not np.all(np.isfinite(alpha_bar)):
            raise ValidationError("alpha_bar contains non-finite values")

        if alpha_bar[0] != 1.0:
            raise ValidationError(f"alpha_bar[0] must be exactly 1, got {alpha_bar[0]!r}")

        if np.any(alpha_bar <= 0.0):
            t = int(np.argmax(alpha_bar <= 0.0))
            raise ValidationError(f"alpha_bar[{t}] = {alpha_bar[t]!r} is not positive")

        steps = np.diff(alpha_bar)
        if np.any(steps >= 0.0):
            t = int(np.argmax(steps >= 0.0)) + 1
            raise ValidationError(
                f"alpha_bar must be strictly decreasing, "
                f"alpha_bar[{t}] = {alpha_bar[t]!r} >= alpha_bar[{t - 1}] = {alpha_bar[t - 1]!r}"
            )

        if self.executed_timesteps is not None:
            executed = tuple(int(t) for t in self.executed_timesteps)
            if len(executed) != len(alpha_bar) - 1:
                raise ValidationError("executed_timesteps must label every step")
            object.__setattr__(self, "executed_timesteps", executed)

        alpha_bar.setflags(write=False)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    @classmethod
    def from_alpha_bar(cls, alpha_bar: Sequence[float] | np.ndarray) -> "Schedule":
        """ Wrap an explicit cumulative sequence as a custom schedule. """
        return cls(np.asarray(alpha_bar, dtype=np.float64), ScheduleKind.CUSTOM)

    @property
    def T(self) -> int:
        """ Number of steps. """
        return len(self.alpha_bar) - 1

    @property
    def v(self) -> np.ndarray:
        """ Residual variances 1 - alpha_bar, indexed 0..T. """
        return 1.0 - self.alpha_bar

    @property
    def betas(self) -> np.ndarray:
        """ Per-step betas 1 - alpha_bar[t] / alpha_bar[t-1], indexed 1..T. """
        return 1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1]

    @cached_property
    def timestep_labels(self) -> np.ndarray:
        """ Label of each step: parent index for subsampled chains, else 1..T. """

        if self.executed_timesteps is not None:
            labels = np.array(self.executed_timesteps, dtype=np.int64)
        else:
            labels = np.arange(1, self.T + 1, dtype=np.int64)

        labels.setflags(write=False)
        return labels

    @cached_property
    def steps(self) -> StepArrays:
        """ Vectorised per-step geometry, see `StepArrays`. """

        ab_prev = self.alpha_bar[:-1]
        ab = self.alpha_bar[1:]
        v_prev = 1.0 - ab_prev
        v = 1.0 - ab

        sa_prev, sa = np.sqrt(ab_prev), np.sqrt(ab)
        sv_prev, sv = np.sqrt(v_prev), np.sqrt(v)
        drop = ab_prev - ab

        expand = np.sqrt(ab_prev / ab)
        expand_minus_one = (drop / ab) / (expand + 1.0)

        # sa_prev * sv - sa * sv_prev rewritten to avoid cancellation
        cross = sa_prev * sv + sa * sv_prev
        b = -drop / (sa * cross)
        l_star = cross / (sa_prev + sa)

        snr = ab / v
        logsnr = np.log(ab) - np.log(v)

        arrays = StepArrays(
            self.timestep_labels,
            ab_prev,
            ab,
            v_prev,
            v,
            expand,
            expand_minus_one,
            b,
            l_star,
            snr,
            logsnr
        )

        for name in arrays.__dataclass_fields__:
            getattr(arrays, name).setflags(write=False)

        return arrays

    def __repr__(self) -> str:
        return f"Schedule(kind={self.kind.value}, T={self.T}, params={dict(self.params)})"


@dataclass(frozen=True)
class StepGeometry:
    """
    Per-step scalars of one timestep.

    Attributes
    ----------
    t
        Step index in 1..T.
    label
        Timestep label (parent index for subsampled schedules).
    alpha_bar_prev
        Cumulative signal before the step.
    alpha_bar_t
        Cumulative signal after the step.
    v_prev
        Residual variance before the step.
    v_t
        Residual variance after the step.
    expand_ratio
        sqrt(alpha_bar_prev / alpha_bar_t) > 1.
    b_t
        Score step coefficient < 0.
    L_star
        Contraction threshold (expand_ratio - 1) / |b_t| > 0.
    snr_t
        alpha_bar_t / v_t.
    logsnr_t
        log(snr_t).
    """

    t: int
    label: int
    alpha_bar_prev: float
    alpha_bar_t: float
    v_prev: float
    v_t: float
    expand_ratio: float
    b_t: float
    L_star: float
    snr_t: float
    logsnr_t: float


@dataclass(frozen=True)
class ThresholdStats:
    """
    Statistics of the per-step contraction threshold over a chain.

    Attributes
    ----------
    count
        Number of steps.
    mean
        Mean of L_star.
    std
        Population standard deviation of L_star over all T steps.
    cv
        std / mean.
    min_value
        Smallest L_star.
    min_timestep
        Label of the step attaining the minimum.
    value_at_finest_executed_step
        L_star at the first executed step (the finest noise level).
    finest_timestep
        Label of that step.
    """

    count: int
    mean: float
    std: float
    cv: float
    min_value: float
    min_timestep: int
    value_at_finest_executed_step: float
    finest_timestep: int


def _check_step(s: Schedule, t: int) -> None:
    if not 1 <= t <= s.T:
        raise ValidationError(f"timestep {t} is outside 1..{s.T}")


def make_linear(T: int, beta1: float, betaT: float) -> Schedule:
    """
    DDPM linear schedule.

    Parameters
    ----------
    T
        Number of steps.
    beta1
        First beta, 0 < beta1 <= betaT.
    betaT
        Last beta, betaT < 1.
    """

    if T < 1:
        raise ValidationError(f"T must be at least 1, got {T}")

    if not 0.0 < beta1 <= betaT < 1.0:
        raise ValidationError(f"need 0 < beta1 <= betaT < 1, got beta1={beta1}, betaT={betaT}")

    betas = np.linspace(beta1, betaT, T, dtype=np.float64)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))

    schedule = Schedule(alpha_bar, ScheduleKind.LINEAR, {"beta1": beta1, "betaT": betaT})
    logger.info("Built linear schedule with %d steps", T)
    return schedule


def make_cosine(T: int, s_off: float = 0.008, clip_beta: bool = True) -> Schedule:
    """
    Improved-DDPM cosine schedule.

    alpha_bar[t] = f(t) / f(0) with f(t) = cos^2((t/T + s_off)/(1 + s_off) * pi/2).
    The formula reaches zero at t = T for s_off = 0, so every value is floored
    at 1e-12. With `clip_beta` each per-step beta is then capped at 0.999.

    Parameters
    ----------
    T
        Number of steps.
    s_off
        Offset, >= 0.
    clip_beta
        Cap per-step betas at 0.999.
    """

    if T < 1:
        raise ValidationError(f"T must be at least 1, got {T}")

    if not s_off >= 0.0:
        raise ValidationError(f"cosine offset must be >= 0, got {s_off}")

    ts = np.arange(T + 1, dtype=np.float64)
    f = np.cos((ts / T + s_off) / (1.0 + s_off) * (math.pi / 2.0)) ** 2

    alpha_bar = np.maximum(f / f[0], ALPHA_BAR_FLOOR)
    alpha_bar[0] = 1.0

    if clip_beta:
        ratios = alpha_bar[1:] / alpha_bar[:-1]
        if np.any(ratios < 1.0 - BETA_CLIP):
            logger.debug("Clipping %d cosine beta(s) at %g", int(np.sum(ratios < 1.0 - BETA_CLIP)), BETA_CLIP)
            alpha_bar = np.concatenate(([1.0], np.cumprod(np.maximum(ratios, 1.0 - BETA_CLIP))))

    schedule = Schedule(alpha_bar, ScheduleKind.COSINE, {"s_off": s_off, "clip_beta": clip_beta})
    logger.info("Built cosine schedule with %d steps (offset %g)", T, s_off)
    return schedule


def stride_timesteps(T: int, stride: int) -> list[int]:
    """ Parent indices {stride, 2*stride, ..., <= T} executed by a stride-k sampler. """

    if stride < 1 or stride > T:
        raise ValidationError(f"stride must be in 1..{T}, got {stride}")

    return list(range(stride, T + 1, stride))


def even_timesteps(T: int, steps: int) -> list[int]:
    """ Parent indices of an N-step sampler with stride T // N. """

    if not 1 <= steps <= T:
        raise ValidationError(f"step count must be in 1..{T}, got {steps}")

    stride = T // steps
    return [stride * (i + 1) for i in range(steps)]


def subsample(parent: Schedule, executed: Sequence[int]) -> Schedule:
    """
    Chain executing only some timesteps of a parent schedule.

    The result has alpha_bar[0] = 1 and alpha_bar[i] = parent.alpha_bar[executed[i - 1]].

    Parameters
    ----------
    parent
        Schedule to subsample.
    executed
        Strictly increasing parent step indices in 1..parent.T.
    """

    indices = [int(t) for t in executed]

    if not indices:
        raise ValidationError("executed timestep list is empty")

    for prev, curr in zip(indices, indices[1:]):
        if curr <= prev:
            raise ValidationError(f"executed timesteps must be strictly increasing, got {prev} then {curr}")

    if indices[0] < 1 or indices[-1] > parent.T:
        raise ValidationError(f"executed timesteps must lie in 1..{parent.T}")

    alpha_bar = np.concatenate(([1.0], parent.alpha_bar[indices]))
    labels = parent.timestep_labels[np.array(indices) - 1]

    params = dict(parent.params)
    params["parent"] = parent.kind.value
    params["parent_T"] = parent.T

    return Schedule(alpha_bar, ScheduleKind.SUBSAMPLED, params, tuple(int(t) for t in labels))


def step_geometry(s: Schedule, t: int) -> StepGeometry:
    """
    Geometry of step t.

    Parameters
    ----------
    s
        Schedule.
    t
        Step index in 1..T.
    """

    _check_step(s, t)

    arrays = s.steps
    i = t - 1

    geometry = StepGeometry(
        t,
        int(arrays.t[i]),
        float(arrays.alpha_bar_prev[i]),
        float(arrays.alpha_bar[i]),
        float(arrays.v_prev[i]),
        float(arrays.v[i]),
        float(arrays.expand_ratio[i]),
        float(arrays.b[i]),
        float(arrays.L_star[i]),
        float(arrays.snr[i]),
        float(arrays.logsnr[i])
    )

    if not geometry.b_t < 0.0:
        raise ValidationError(f"score step coefficient b_t = {geometry.b_t!r} at step {t} is not negative")

    return geometry


def iter_geometry(s: Schedule) -> Iterator[StepGeometry]:
    """ Iterate over the geometry of every step. """

    for t in range(1, s.T + 1):
        yield step_geometry(s, t)


def threshold_stats(s: Schedule) -> ThresholdStats:
    """ Statistics of L_star over every executed step of the chain. """

    l_star = s.steps.L_star
    labels = s.timestep_labels

    mean = fsum_mean(l_star)
    std = population_std(l_star)
    i_min = int(np.argmin(l_star))

    return ThresholdStats(
        len(l_star),
        mean,
        std,
        std / mean,
        float(l_star[i_min]),
        int(labels[i_min]),
        float(l_star[0]),
        int(labels[0])
    )


def logsnr_shift(s: Schedule, d: float, d_base: float) -> Schedule:
    """
    Resolution shift of a schedule.

    logSNR^(d)(t) = logSNR^(d_base)(t) + 2 log(d_base / d), and alpha_bar is
    recovered as SNR / (1 + SNR).

    Parameters
    ----------
    s
        Schedule at the base resolution.
    d
        Target resolution.
    d_base
        Base resolution.
    """

    if not (d > 0.0 and d_base > 0.0):
        raise ValidationError(f"resolutions must be positive, got d={d}, d_base={d_base}")

    if d == d_base:
        return s

    shift = 2.0 * math.log(d_base / d)
    alpha_bar = np.concatenate(([1.0], expit(s.steps.logsnr + shift)))

    if np.any(alpha_bar[1:] <= 0.0) or np.any(alpha_bar[1:] >= 1.0) or np.any(np.diff(alpha_bar) >= 0.0):
        raise ValidationError(f"logSNR shift of {shift:+.6g} under- or overflows alpha_bar")

    params = dict(s.params)
    params["base"] = s.kind.value
    params["logsnr_shift"] = shift

    return Schedule(alpha_bar, ScheduleKind.CUSTOM, params, s.executed_timesteps)


def minsnr_weights(s: Schedule, gamma: float) -> np.ndarray:
    """
    Min-SNR-gamma loss weights w_t = min(SNR_t, gamma) / SNR_t.

    Parameters
    ----------
    s
        Schedule.
    gamma
        Clamp level > 0, may be infinite.
    """

    if not gamma > 0.0:
        raise ValidationError(f"gamma must be positive, got {gamma}")

    snr = s.steps.snr
    return np.minimum(snr, gamma) / snr


def collage_weights(s: Schedule) -> np.ndarray:
    """ Per-step weight SNR_t of the denoising objective written as a collage error. """

    snr = s.steps.snr
    if np.any(s.steps.v <= 0.0):
        raise ValidationError("SNR is undefined where v_t = 0")

    return np.array(snr)


def geometry_rows(s: Schedule) -> Iterator[tuple[int, float, float, float, float, float, float, float]]:
    """ Rows of the per-step geometry export, one per executed step. """

    arrays = s.steps
    for i in range(s.T):
        yield (
            int(arrays.t[i]),
            float(arrays.alpha_bar_prev[i]),
            float(arrays.alpha_bar[i]),
            float(arrays.v[i]),
            float(arrays.b[i]),
            float(arrays.L_star[i]),
            float(arrays.snr[i]),
            float(arrays.logsnr[i])
        )
