"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import os
import logging
import platform
import multiprocessing

from pifsched.common import THREADS_ENV
from pifsched.errors import ValidationError


logger = logging.getLogger(__name__)


def thread_count(requested: int | None = None) -> int:
    """
    Number of worker threads to use.

    The explicit request wins, then the `PIFS_SCHED_THREADS` environment
    variable, then the number of CPU cores. The environment variable also caps
    an explicit request.

    Parameters
    ----------
    requested
        Thread count asked for by the caller, None for automatic.
    """

    cores = multiprocessing.cpu_count()

    cap = None
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer, got '{raw}'")

        if cap < 1:
            raise ValidationError(f"{THREADS_ENV} must be at least 1, got {cap}")

    if requested is not None and requested < 1:
        raise ValidationError(f"thread count must be at least 1, got {requested}")

    count = requested if requested is not None else (cap if cap is not None else cores)
    if cap is not None:
        count = min(count, cap)

    logger.debug("Using %d worker thread(s)", count)
    return count


def get_cpu_info() -> dict:
    """
    Gather CPU information.

    Returned dictionary consists of these information:
    - name:  Processor name. (eg. Intel(R) Core(TM) i5-9300H CPU @ 2.4GHz)
    - cores: Number of cores the processor has.
    """

    # Default processor name to fall back to if parsing fails
    def_name = platform.processor()

    name = ""

    # /proc/cpuinfo carries the marketing name on Linux
    if platform.system() == "Linux":
        try:
            with open("/proc/cpuinfo", encoding="utf-8") as file:
                for line in file:
                    if line.startswith("model name"):
                        name = line.split(":", 1)[1].strip()
                        break

        except OSError:
            pass

    if name == "": name = def_name

    return {
        "name": name,
        "cores": multiprocessing.cpu_count()
    }
