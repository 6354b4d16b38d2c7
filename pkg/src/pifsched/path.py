"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import os
from pathlib import Path

from pifsched.errors import DatasetIOError


def resolve(*children: Path | str) -> Path:
    """ Resolve a path against the current working directory. """
    return (Path(os.getcwd()) / Path(*children)).resolve()


def existing_file(path: Path | str) -> Path:
    """
    Resolve a path that must point to a readable file.

    Parameters
    ----------
    path
        Path to the input file.
    """

    resolved = resolve(path)

    if not resolved.is_file():
        raise DatasetIOError(f"no such file: '{path}'")

    if not os.access(resolved, os.R_OK):
        raise DatasetIOError(f"file is not readable: '{path}'")

    return resolved
