"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

from pathlib import Path


class PifsError(Exception):
    """ Base class of every error raised by pifsched. """


class ValidationError(PifsError, ValueError):
    """ An argument or input violates a precondition. """


class FormatError(ValidationError):
    """
    Malformed input file.

    Attributes
    ----------
    path
        File being parsed, if known.
    line
        1-based line number, if known.
    column
        1-based column number, if known.
    """

    def __init__(self,
            message: str,
            path: Path | str | None = None,
            line: int | None = None,
            column: int | None = None
            ) -> None:
        self.path = path
        self.line = line
        self.column = column

        where = []
        if path is not None: where.append(str(path))
        if line is not None: where.append(f"line {line}")
        if column is not None: where.append(f"column {column}")

        if where:
            message = f"{', '.join(where)}: {message}"

        super().__init__(message)


class SuppressionError(ValidationError):
    """
    Suppression reverses the sign of a diagonal factor.

    Attributes
    ----------
    patch
        Offending patch id.
    t
        Offending step.
    """

    def __init__(self, message: str, patch: str, t: int) -> None:
        self.patch = patch
        self.t = t
        super().__init__(message)


class BracketError(PifsError, ArithmeticError):
    """ A root solver could not bracket its root. """


class DatasetIOError(PifsError, OSError):
    """ A dataset or input file is missing or unreadable. """
