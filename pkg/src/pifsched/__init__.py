"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

__version__ = "0.1.0"


from pifsched.attractor import Patch, PatchSpectrum, ky_gaussian, ky_suppressed, moran_root, moran_root_suppressed
from pifsched.config import Config
from pifsched.contraction import f_t, lambda_star, lambda_star_profile
from pifsched.design import allocate_steps, compare_schedules
from pifsched.errors import PifsError, ValidationError
from pifsched.models import ScheduleKind
from pifsched.regime import SuppressionTable, release_times
from pifsched.schedule import Schedule, make_cosine, make_linear, subsample


__all__ = (
    "__version__",
    "Patch",
    "PatchSpectrum",
    "ky_gaussian",
    "ky_suppressed",
    "moran_root",
    "moran_root_suppressed",
    "Config",
    "f_t",
    "lambda_star",
    "lambda_star_profile",
    "allocate_steps",
    "compare_schedules",
    "PifsError",
    "ValidationError",
    "ScheduleKind",
    "SuppressionTable",
    "release_times",
    "Schedule",
    "make_cosine",
    "make_linear",
    "subsample",
)
