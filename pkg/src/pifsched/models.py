"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

from enum import Enum


class ScheduleKind(Enum):
    """
    Schedule construction family.

    Fields
    ------
    LINEAR
        Betas interpolated linearly between two endpoints.
    COSINE
        Squared-cosine cumulative signal curve with an offset.
    SUBSAMPLED
        Executed subset of a parent chain.
    CUSTOM
        Any other strictly decreasing cumulative sequence.
    """

    LINEAR = "linear"
    COSINE = "cosine"
    SUBSAMPLED = "subsampled"
    CUSTOM = "custom"


class Interpolation(Enum):
    """
    How sparse suppression grids are read between measured timesteps.

    Fields
    ------
    LINEAR
        Piecewise-linear in t, constant beyond the measured ends.
    NEAREST
        Value of the closest measured timestep.
    """

    LINEAR = "linear"
    NEAREST = "nearest"


class SuppressionMode(Enum):
    """
    Which suppression values enter a suppression-corrected Moran product.

    Fields
    ------
    PER_PATCH
        One root per patch using that patch's own row.
    AVERAGED
        A single root using the patch-averaged suppression per step.
    """

    PER_PATCH = "per-patch"
    AVERAGED = "averaged"


class KYMode(Enum):
    """ Origin of the Lyapunov spectrum in a Kaplan-Yorke report. """

    RAW = "raw"
    GAUSSIAN = "gaussian"
    SUPPRESSED = "suppressed"


class InfoGainMode(Enum):
    """
    Information gain evaluation.

    Fields
    ------
    QUADRATIC
        Leading-order form, sum of n_k (log f)^2.
    EXACT
        Per-block Gaussian KL, (n_k / 2)(e^(2e) - 1 - 2e).
    """

    QUADRATIC = "quadratic"
    EXACT = "exact"


class Normalization(Enum):
    """
    Pixel mapping applied to 8-bit image data.

    Fields
    ------
    SYMMETRIC
        [0, 255] -> [-1, 1] (2x/255 - 1).
    UNIT
        [0, 255] -> [0, 1].
    NONE
        Values are used as stored.
    """

    SYMMETRIC = "symmetric"
    UNIT = "unit"
    NONE = "none"


class ImageFormat(Enum):
    """ On-disk image container. """

    CIFAR10_BINARY = "cifar10-binary"
    RAW_F32 = "raw-f32"


class OutputFormat(Enum):
    """ Machine-readable output format of the command line. """

    CSV = "csv"
    JSON = "json"
