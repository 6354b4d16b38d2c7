"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import os
from pathlib import Path

import numpy as np
import pytest

from pifsched.attractor import PatchSpectrum
from pifsched.schedule import Schedule, make_cosine, make_linear, stride_timesteps, subsample


CIFAR10_ENV = "PIFS_CIFAR10_DIR"


def random_schedule(rng: np.random.Generator, T: int | None = None) -> Schedule:
    """ Strictly decreasing alpha_bar from random betas in (1e-5, 0.3). """

    T = int(rng.integers(2, 60)) if T is None else T
    betas = rng.uniform(1e-5, 0.3, size=T)
    return Schedule.from_alpha_bar(np.concatenate(([1.0], np.cumprod(1.0 - betas))))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def linear() -> Schedule:
    return make_linear(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def cosine() -> Schedule:
    return make_cosine(1000, 0.0)


@pytest.fixture(scope="session")
def cosine_improved() -> Schedule:
    return make_cosine(1000, 0.008)


@pytest.fixture(scope="session")
def ddim50(cosine) -> Schedule:
    return subsample(cosine, stride_timesteps(1000, 20))


@pytest.fixture
def synthetic_spectrum() -> PatchSpectrum:
    """ 16 isotropic 8x8x3 patches with variances spread over CIFAR's range. """

    lams = np.geomspace(1.05, 40.0, 16)[::-1]
    return PatchSpectrum.isotropic((f"r{i // 4}c{i % 4}", 192, float(lam)) for i, lam in enumerate(lams))


@pytest.fixture
def cifar_dir() -> Path:
    value = os.environ.get(CIFAR10_ENV)
    if not value or not Path(value).is_dir():
        pytest.skip(f"set {CIFAR10_ENV} to a directory of CIFAR-10 binary batches")

    return Path(value)
