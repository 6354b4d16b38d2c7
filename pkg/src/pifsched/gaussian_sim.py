"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import math
import logging
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.stats import ortho_group

from pifsched.attractor import PatchSpectrum
from pifsched.contraction import fm_kappa
from pifsched.errors import ValidationError
from pifsched.schedule import Schedule


logger = logging.getLogger(__name__)

# Largest patch simulated with explicit Jacobian matrices
DENSE_MAX_DIM = 64


@dataclass(frozen=True, eq=False)
class DenseBlock:
    """
    Explicit covariance of one patch for the dense simulation mode.

    Attributes
    ----------
    patch
        Patch id.
    covariance
        n x n covariance with a random eigenbasis, read-only.
    """

    patch: str
    covariance: np.ndarray


@dataclass(frozen=True, eq=False)
class LinearChain:
    """
    DDIM chain with the exact Gaussian score, one scalar map per direction.

    Attributes
    ----------
    schedule
        Schedule the chain runs.
    mus
        Variance of every simulated direction.
    counts
        Multiplicity of every direction.
    multipliers
        Array of shape (T, directions), row i holds step t = i + 1.
    dense
        Explicit patch covariances when built in dense mode.
    """

    schedule: Schedule
    mus: np.ndarray
    counts: np.ndarray
    multipliers: np.ndarray
    dense: tuple[DenseBlock, ...] = ()

    @property
    def T(self) -> int:
        return self.schedule.T


@dataclass(frozen=True)
class ChainResult:
    """
    Outcome of running a linear chain from t = T down to t = 1.

    Attributes
    ----------
    gains
        Total gain of every direction.
    lyapunov
        log(gain) / T per direction.
    variance_gains
        gain^2, the variance of the pushforward of a standard prior.
    output
        Final per-direction coordinates.
    fixed_point_residual
        |Phi(0)|, zero for a linear chain.
    """

    gains: np.ndarray
    lyapunov: np.ndarray
    variance_gains: np.ndarray
    output: np.ndarray
    fixed_point_residual: float


@dataclass(frozen=True)
class FlowMatchingChain:
    """
    Euler flow-matching chain with a constant linear velocity field.

    Attributes
    ----------
    factors
        Per-step contraction factors.
    product
        Product of every factor.
    """

    factors: tuple[float, ...]
    product: float


def _step_operands(s: Schedule) -> tuple[np.ndarray, ...]:
    ab_prev = s.alpha_bar[:-1]
    ab = s.alpha_bar[1:]
    return ab_prev, ab, 1.0 - ab_prev, 1.0 - ab


def posterior_multipliers(s: Schedule, mus: np.ndarray) -> np.ndarray:
    """
    Per-step gain of every direction, from the Gaussian posterior mean.

    x0_hat = sqrt(ab) mu / (ab mu + v) x and eps_hat = sqrt(v) / (ab mu + v) x,
    so the DDIM update sqrt(ab_prev) x0_hat + sqrt(v_prev) eps_hat is linear in x.
    """

    ab_prev, ab, v_prev, v = (a[:, None] for a in _step_operands(s))
    mu = np.asarray(mus, dtype=np.float64)[None, :]

    denominator = ab * mu + v
    x0_hat = np.sqrt(ab) * mu / denominator
    eps_hat = np.sqrt(v) / denominator

    return np.sqrt(ab_prev) * x0_hat + np.sqrt(v_prev) * eps_hat


def build_chain(
        s: Schedule,
        spectrum: PatchSpectrum,
        dense: bool = False,
        seed: int = 0
        ) -> LinearChain:
    """
    Build the exact-score chain of a schedule on Gaussian patches.

    Parameters
    ----------
    s
        Schedule.
    spectrum
        Patch spectra.
    dense
        Also build explicit covariances with a seeded random eigenbasis for
        every patch of dimension <= 64.
    seed
        Seed of the eigenbasis generator.
    """

    mus, counts = spectrum.directions()
    multipliers = posterior_multipliers(s, mus)

    for array in (mus, counts, multipliers):
        array.setflags(write=False)

    blocks = []
    if dense:
        rng = np.random.default_rng(seed)

        for patch in spectrum.patches:
            if patch.n > DENSE_MAX_DIM:
                logger.warning("Patch '%s' has dimension %d, skipped in dense mode", patch.id, patch.n)
                continue

            eigenvalues = np.full(patch.n, patch.lam) if patch.isotropic else np.array(patch.eigenvalues)
            basis = ortho_group.rvs(patch.n, random_state=rng) if patch.n > 1 else np.ones((1, 1))

            covariance = (basis * eigenvalues) @ basis.T
            covariance = 0.5 * (covariance + covariance.T)
            covariance.setflags(write=False)

            blocks.append(DenseBlock(patch.id, covariance))

    logger.debug("Built chain with %d direction(s) over %d steps", len(mus), s.T)
    return LinearChain(s, mus, counts, multipliers, tuple(blocks))


def run_chain(chain: LinearChain, x_T: np.ndarray | None = None) -> ChainResult:
    """
    Iterate the chain from t = T down to t = 1.

    Parameters
    ----------
    chain
        Linear chain.
    x_T
        Starting coordinate of every direction, ones by default.
    """

    n = chain.multipliers.shape[1]
    x = np.ones(n) if x_T is None else np.array(x_T, dtype=np.float64)

    if x.shape != (n,):
        raise ValidationError(f"starting point needs {n} coordinates, got shape {x.shape}")

    origin = np.zeros(n)
    for i in reversed(range(chain.T)):
        x = chain.multipliers[i] * x
        origin = chain.multipliers[i] * origin

    gains = np.prod(chain.multipliers, axis=0)
    lyapunov = np.log(gains) / chain.T

    return ChainResult(gains, lyapunov, gains ** 2, x, float(np.linalg.norm(origin)))


def generated_covariance(chain: LinearChain) -> np.ndarray:
    """ Variance of the pushforward of a standard Gaussian prior, per direction. """
    return np.prod(chain.multipliers, axis=0) ** 2


def sample_generated_variance(
        chain: LinearChain,
        samples: int = 100_000,
        seed: int | np.random.Generator | None = 0
        ) -> np.ndarray:
    """
    Monte Carlo estimate of generated_covariance.

    Parameters
    ----------
    chain
        Linear chain.
    samples
        Number of prior draws, >= 2.
    seed
        Seed or generator.
    """

    if samples < 2:
        raise ValidationError(f"need at least 2 samples, got {samples}")

    rng = np.random.default_rng(seed)
    prior = rng.standard_normal((samples, chain.multipliers.shape[1]))

    # The composed chain is diagonal, one total gain per direction
    generated = prior * np.prod(chain.multipliers, axis=0)
    return generated.var(axis=0, ddof=1)


def dense_jacobians(s: Schedule, covariance: np.ndarray) -> Iterator[np.ndarray]:
    """ Jacobian of every step on one patch, in chain order t = T..1. """

    ab_prev, ab, v_prev, v = _step_operands(s)
    eye = np.eye(len(covariance))

    for i in reversed(range(s.T)):
        numerator = math.sqrt(ab_prev[i] * ab[i]) * covariance + math.sqrt(v_prev[i] * v[i]) * eye
        yield linalg.solve(ab[i] * covariance + v[i] * eye, numerator, assume_a="sym")


def dense_singular_values(chain: LinearChain, patch: str) -> np.ndarray:
    """
    Singular values of the full chain Jacobian on one patch, descending.

    Parameters
    ----------
    chain
        Chain built in dense mode.
    patch
        Patch id.
    """

    block = next((b for b in chain.dense if b.patch == patch), None)
    if block is None:
        raise ValidationError(f"patch '{patch}' has no dense block")

    total = np.eye(len(block.covariance))
    for jacobian in dense_jacobians(chain.schedule, block.covariance):
        total = jacobian @ total

    return linalg.svdvals(total)


def fm_chain(T: int, mu: float, delta_tilde: float = 0.0) -> FlowMatchingChain:
    """
    Contraction of an Euler flow-matching chain with velocity field -mu x / (1 - t).

    Parameters
    ----------
    T
        Number of Euler steps.
    mu
        Velocity Jacobian eigenvalue, mu_min = mu_max.
    delta_tilde
        Non-normal part bound.
    """

    factors = []

    for i in range(T):
        step = fm_kappa(T, i / T, mu, mu, delta_tilde)

        if not step.holds:
            raise ValidationError(f"flow-matching contraction condition fails at step {i} (t = {i / T:g})")

        factors.append(1.0 - mu / (T - i) + delta_tilde / T)

    return FlowMatchingChain(tuple(factors), math.prod(factors))


def gains_rows(chain: LinearChain) -> Iterator[tuple[float, float, float]]:
    """ Rows of the simulator export, see GAINS_HEADER. """

    result = run_chain(chain)
    for mu, gain, lyap in zip(chain.mus, result.gains, result.lyapunov):
        yield float(mu), float(gain), float(lyap)
