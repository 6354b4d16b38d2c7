"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import math
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from pifsched.errors import ValidationError
from pifsched.schedule import Schedule, _check_step


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EuclideanCertificate:
    """
    Euclidean contraction certificate of one DDIM step.

    Attributes
    ----------
    t
        Step index.
    nu_min
        Lower bound of the score Jacobian eigenvalues.
    delta
        Non-normal part bound.
    L_star
        Contraction threshold of the step.
    c1_holds
        nu_min > L_star + delta.
    c2_holds
        |b_t| nu_min <= expand_ratio.
    kappa
        1 - |b_t|(nu_min - L_star - delta) when both conditions hold, else None.
    """

    t: int
    nu_min: float
    delta: float
    L_star: float
    c1_holds: bool
    c2_holds: bool
    kappa: float | None

    @property
    def holds(self) -> bool:
        return self.c1_holds and self.c2_holds


@dataclass(frozen=True)
class HighNoiseParams:
    """
    Certificate inputs that hold automatically once the score is close to
    the Gaussian one.

    Attributes
    ----------
    nu_star
        1 / sqrt(v_t).
    delta_star
        C M^2 alpha_bar_t / v_t^(3/2).
    margin
        nu_star - delta_star - L_star.
    """

    nu_star: float
    delta_star: float
    margin: float

    def __iter__(self):
        yield self.nu_star
        yield self.delta_star
        yield self.margin


@dataclass(frozen=True)
class BlockCertificate:
    """
    Block-max (patch) contraction certificate of one step.

    Attributes
    ----------
    t
        Step index.
    kappa_diag
        Largest diagonal block norm.
    delta_cross
        Largest off-diagonal coupling.
    kappa_pc
        kappa_diag + delta_cross.
    satisfied
        kappa_pc < 1.
    """

    t: int
    kappa_diag: float
    delta_cross: float
    kappa_pc: float
    satisfied: bool


@dataclass(frozen=True)
class BridgeBound:
    """
    Collage bound on the distance between the chain output and the fixed point.

    Attributes
    ----------
    s_loc
        Product of every step contraction factor.
    weights
        c_t = product of kappa_k for k < t, so c_1 = 1.
    value
        Bound value, math.inf when any factor is not a contraction.
    """

    s_loc: float
    weights: tuple[float, ...]
    value: float


@dataclass(frozen=True)
class FlowMatchingStep:
    """
    Euler flow-matching step contraction factor.

    Attributes
    ----------
    kappa_tilde
        (1 - mu_min / (T(1 - t))) + delta_tilde / T.
    mu_min_holds
        mu_min > delta_tilde (1 - t).
    mu_max_holds
        mu_max < T (1 - t).
    """

    kappa_tilde: float
    mu_min_holds: bool
    mu_max_holds: bool

    @property
    def holds(self) -> bool:
        return self.mu_min_holds and self.mu_max_holds


def _check_lambda(lam: float) -> None:
    if not lam > 0.0:
        raise ValidationError(f"variance lambda must be positive, got {lam}")


def f_t(s: Schedule, t: int, lam: float) -> float:
    """
    Diagonal expansion factor of step t along an eigendirection of variance lambda.

    f_t(lambda) = sqrt(alpha_bar_prev / alpha_bar) - |b_t| sqrt(v_t) / (lambda alpha_bar_t + v_t)

    Parameters
    ----------
    s
        Schedule.
    t
        Step index in 1..T.
    lam
        Data variance along the direction, > 0.
    """

    _check_step(s, t)
    _check_lambda(lam)

    a = s.steps
    i = t - 1
    return float(a.expand_ratio[i] + a.b[i] * math.sqrt(a.v[i]) / (lam * a.alpha_bar[i] + a.v[i]))


def f_t_snr_form(s: Schedule, t: int, lam: float) -> float:
    """ f_t written in terms of SNR_t, an independent evaluation path. """

    _check_step(s, t)
    _check_lambda(lam)

    a = s.steps
    i = t - 1
    x = lam * a.snr[i]
    return float((a.expand_ratio[i] * x + math.sqrt(a.v_prev[i] / a.v[i])) / (x + 1.0))


def lambda_star_profile(s: Schedule) -> np.ndarray:
    """ Expansion threshold lambda*(t) for every step. """

    a = s.steps
    sa_prev, sa = np.sqrt(a.alpha_bar_prev), np.sqrt(a.alpha_bar)
    sv_prev, sv = np.sqrt(a.v_prev), np.sqrt(a.v)

    # (sv - sv_prev) / (sa_prev - sa) equals (sa_prev + sa) / (sv + sv_prev)
    return sv * (sa_prev + sa) / ((sv + sv_prev) * sa)


def lambda_star(s: Schedule, t: int) -> float:
    """
    Expansion threshold of step t.

    Directions whose variance lies above lambda*(t) are expanded by the step,
    directions below it are contracted. Always > 1.

    Parameters
    ----------
    s
        Schedule.
    t
        Step index in 1..T.
    """

    _check_step(s, t)
    return float(lambda_star_profile(s)[t - 1])


def expansion_profile(s: Schedule, lam: float) -> np.ndarray:
    """ f_t(lambda) for every step. """

    _check_lambda(lam)

    a = s.steps
    return a.expand_ratio + a.b * np.sqrt(a.v) / (lam * a.alpha_bar + a.v)


def expansion_excess_profile(s: Schedule, lam: float) -> np.ndarray:
    """
    f_t(lambda) - 1 for every step, without cancellation near lambda*(t).

    Parameters
    ----------
    s
        Schedule.
    lam
        Data variance, > 0.
    """

    _check_lambda(lam)

    a = s.steps
    roots = lambda_star_profile(s)

    # f(lam) - f(lam*) with f(lam*) = 1
    return (
        -a.b * np.sqrt(a.v) * a.alpha_bar * (lam - roots)
        / ((lam * a.alpha_bar + a.v) * (roots * a.alpha_bar + a.v))
    )


def f_t_derivative(s: Schedule, t: int, lam: float) -> float:
    """ Closed-form d f_t / d lambda = |b_t| sqrt(v_t) alpha_bar_t / (lambda alpha_bar_t + v_t)^2. """

    _check_step(s, t)
    _check_lambda(lam)

    a = s.steps
    i = t - 1
    return float(-a.b[i] * math.sqrt(a.v[i]) * a.alpha_bar[i] / (lam * a.alpha_bar[i] + a.v[i]) ** 2)


def euclidean_certificate(s: Schedule, t: int, nu_min: float, delta: float) -> EuclideanCertificate:
    """
    Euclidean contraction certificate of step t.

    Parameters
    ----------
    s
        Schedule.
    t
        Step index in 1..T.
    nu_min
        Lower bound of the score Jacobian eigenvalues, > 0.
    delta
        Bound of the non-normal part, >= 0.
    """

    _check_step(s, t)

    if not nu_min > 0.0:
        raise ValidationError(f"nu_min must be positive, got {nu_min}")

    if not delta >= 0.0:
        raise ValidationError(f"delta must be non-negative, got {delta}")

    a = s.steps
    i = t - 1
    abs_b = float(-a.b[i])
    l_star = float(a.L_star[i])

    c1 = nu_min > l_star + delta
    c2 = abs_b * nu_min <= float(a.expand_ratio[i])
    kappa = 1.0 - abs_b * (nu_min - l_star - delta) if c1 and c2 else None

    return EuclideanCertificate(t, nu_min, delta, l_star, c1, c2, kappa)


def high_noise_params(s: Schedule, t: int, M_bound: float, C: float) -> HighNoiseParams:
    """
    Gaussian-regime certificate inputs at step t.

    Parameters
    ----------
    s
        Schedule.
    t
        Step index in 1..T.
    M_bound
        Bound on the data norm, > 0.
    C
        Constant of the score deviation bound, > 0.
    """

    _check_step(s, t)

    if not (M_bound > 0.0 and C > 0.0):
        raise ValidationError(f"M_bound and C must be positive, got {M_bound} and {C}")

    a = s.steps
    i = t - 1
    v = float(a.v[i])

    nu_star = 1.0 / math.sqrt(v)
    delta_star = C * M_bound ** 2 * float(a.alpha_bar[i]) / v ** 1.5

    return HighNoiseParams(nu_star, delta_star, nu_star - delta_star - float(a.L_star[i]))


def high_noise_window(s: Schedule, M_bound: float, C: float) -> tuple[int, int] | None:
    """
    Longest run of consecutive steps with a positive high-noise margin.

    Returns the (first, last) timestep labels of the run, None when no step
    has a positive margin.
    """

    margins = [high_noise_params(s, t, M_bound, C).margin for t in range(1, s.T + 1)]
    labels = s.timestep_labels

    best = None
    start = None
    for i, margin in enumerate(margins + [-math.inf]):
        if margin > 0.0:
            if start is None: start = i
            continue

        if start is not None:
            if best is None or i - start > best[1] - best[0] + 1:
                best = (start, i - 1)
            start = None

    if best is None:
        return None

    return int(labels[best[0]]), int(labels[best[1]])


def block_certificate(t: int, kappa_diag: float, delta_cross: float) -> BlockCertificate:
    """
    Block-max contraction certificate from measured block norms.

    Parameters
    ----------
    t
        Step index.
    kappa_diag
        Largest diagonal block norm, >= 0.
    delta_cross
        Largest off-diagonal coupling, >= 0.
    """

    if not (kappa_diag >= 0.0 and delta_cross >= 0.0):
        raise ValidationError(
            f"block norms must be non-negative, got kappa_diag={kappa_diag}, delta_cross={delta_cross}"
        )

    kappa_pc = kappa_diag + delta_cross
    return BlockCertificate(t, kappa_diag, delta_cross, kappa_pc, kappa_pc < 1.0)


def coupling_cs_bound(frobenius_sq_sum: float, b_t: float, M: int) -> float:
    """
    Cauchy-Schwarz bound on the off-diagonal coupling of one patch.

    |b_t| sqrt(sum of squared Frobenius norms) sqrt(M)

    Parameters
    ----------
    frobenius_sq_sum
        Sum of squared Frobenius norms of the off-diagonal Jacobian blocks, >= 0.
    b_t
        Score step coefficient.
    M
        Number of patches, >= 1.
    """

    if M < 1:
        raise ValidationError(f"patch count must be at least 1, got {M}")

    if not frobenius_sq_sum >= 0.0:
        raise ValidationError(f"Frobenius mass must be non-negative, got {frobenius_sq_sum}")

    return abs(b_t) * math.sqrt(frobenius_sq_sum) * math.sqrt(M)


def attention_cross_bound(
        offdiag_attention_mass: float,
        wv_norm: float,
        l_ff: float,
        p_norm: float,
        grad_A_max: float,
        b_t: float
        ) -> float:
    """
    Off-diagonal coupling bound of an attention layer.

    |b_t| L_ff (1 + |p| max|grad A|) |W_V| max_k sum_{j != k} A_kj

    Parameters
    ----------
    offdiag_attention_mass
        Largest off-diagonal attention row mass, in [0, 1].
    wv_norm
        Operator norm of the value projection.
    l_ff
        Lipschitz constant of the feed-forward part.
    p_norm
        Norm of the positional term.
    grad_A_max
        Largest attention weight gradient norm.
    b_t
        Score step coefficient.
    """

    if not 0.0 <= offdiag_attention_mass <= 1.0:
        raise ValidationError(f"off-diagonal attention mass must lie in [0, 1], got {offdiag_attention_mass}")

    for name, value in (("wv_norm", wv_norm), ("l_ff", l_ff), ("p_norm", p_norm), ("grad_A_max", grad_A_max)):
        if not value >= 0.0:
            raise ValidationError(f"{name} must be non-negative, got {value}")

    return abs(b_t) * l_ff * (1.0 + p_norm * grad_A_max) * wv_norm * offdiag_attention_mass


def _bridge_weights(kappas: Sequence[float], strict: bool) -> tuple[np.ndarray, float] | None:
    k = np.asarray(kappas, dtype=np.float64)

    if k.ndim != 1 or len(k) == 0:
        raise ValidationError("need at least one contraction factor")

    if np.any(k <= 0.0) or np.any(k >= 1.0) or not np.all(np.isfinite(k)):
        if strict:
            bad = int(np.argmax((k <= 0.0) | (k >= 1.0) | ~np.isfinite(k)))
            raise ValidationError(f"contraction factor {bad + 1} is {k[bad]!r}, outside (0, 1)")
        return None

    weights = np.concatenate(([1.0], np.cumprod(k[:-1])))
    return weights, float(np.prod(k))


def _non_negative(values: Sequence[float], name: str, length: int) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)

    if array.shape != (length,):
        raise ValidationError(f"{name} must have {length} entries, got {array.size}")

    if np.any(array < 0.0) or not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} must be finite and non-negative")

    return array


def collage_bridge(kappas_pc: Sequence[float], displacements: Sequence[float], strict: bool = True) -> BridgeBound:
    """
    Distance bound between the chain output and the fixed point of the chain.

    bound = (1 / (1 - s_loc)) sum_t c_t d_t

    Parameters
    ----------
    kappas_pc
        Per-step contraction factors, each in (0, 1).
    displacements
        Per-step collage displacements d_t >= 0.
    strict
        Raise on a non-contracting factor. Otherwise the bound is math.inf.
    """

    d = _non_negative(displacements, "displacements", len(kappas_pc))
    result = _bridge_weights(kappas_pc, strict)

    if result is None:
        logger.debug("Collage bridge undefined, returning inf")
        return BridgeBound(math.inf, (), math.inf)

    weights, s_loc = result
    value = math.fsum((weights * d).tolist()) / (1.0 - s_loc)

    return BridgeBound(s_loc, tuple(weights.tolist()), value)


def w1_bridge(
        kappas_pc: Sequence[float],
        R_norms: Sequence[float],
        losses: Sequence[float],
        B: Sequence[float],
        T: int | None = None,
        strict: bool = True
        ) -> float:
    """
    Wasserstein-1 bound between the generated law and a point mass at the fixed point.

    (sqrt(T) / (1 - s_loc)) (sum_t c_t^2 (R_t + B_t sqrt(L_t))^2)^(1/2)

    Parameters
    ----------
    kappas_pc
        Per-step contraction factors in (0, 1).
    R_norms
        Root mean square residual norms per step.
    losses
        Per-step excess risks.
    B
        Per-step |b_t|.
    T
        Number of steps, defaults to the number of factors.
    strict
        Raise on a non-contracting factor. Otherwise return math.inf.
    """

    n = len(kappas_pc)
    T = n if T is None else T
    if T < 1:
        raise ValidationError(f"T must be at least 1, got {T}")

    r = _non_negative(R_norms, "R_norms", n)
    losses = _non_negative(losses, "losses", n)
    b = _non_negative(B, "B", n)

    result = _bridge_weights(kappas_pc, strict)
    if result is None:
        return math.inf

    weights, s_loc = result
    terms = (weights * (r + b * np.sqrt(losses))) ** 2

    return math.sqrt(T) / (1.0 - s_loc) * math.sqrt(math.fsum(terms.tolist()))


def fm_kappa(T: int, t: float, mu_min: float, mu_max: float, delta_tilde: float) -> FlowMatchingStep:
    """
    Contraction factor of an Euler step of a flow-matching sampler.

    Parameters
    ----------
    T
        Number of Euler steps.
    t
        Time in [0, 1).
    mu_min
        Smallest velocity Jacobian eigenvalue bound, > 0.
    mu_max
        Largest velocity Jacobian eigenvalue bound, >= mu_min.
    delta_tilde
        Non-normal part bound, >= 0.
    """

    if T < 1:
        raise ValidationError(f"T must be at least 1, got {T}")

    if not 0.0 <= t < 1.0:
        raise ValidationError(f"time must lie in [0, 1), got {t}")

    if not 0.0 < mu_min <= mu_max:
        raise ValidationError(f"need 0 < mu_min <= mu_max, got {mu_min} and {mu_max}")

    if not delta_tilde >= 0.0:
        raise ValidationError(f"delta_tilde must be non-negative, got {delta_tilde}")

    remaining = T * (1.0 - t)
    kappa = (1.0 - mu_min / remaining) + delta_tilde / T

    return FlowMatchingStep(kappa, mu_min > delta_tilde * (1.0 - t), mu_max < remaining)


def contraction_rows(s: Schedule, lam: float) -> Iterator[tuple[int, float, float, float]]:
    """ Rows of the contraction export for one lambda, one per step. """

    f = expansion_profile(s, lam)
    roots = lambda_star_profile(s)
    a = s.steps

    for i in range(s.T):
        yield int(a.t[i]), float(f[i]), float(roots[i]), float(a.L_star[i])
