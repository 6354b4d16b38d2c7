"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import csv
import sys
import json
import math
import dataclasses
from collections.abc import Iterable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Any, TextIO

import numpy as np

from pifsched.common import FLOAT_DIGITS


def format_float(value: float) -> str:
    """ Shortest text that keeps every significant digit of a double. """
    return f"{value:.{FLOAT_DIGITS}g}"


def format_cell(value: Any) -> str:
    """ CSV text of one value. """

    if value is None:
        return ""

    if isinstance(value, bool | np.bool_):
        return "true" if value else "false"

    if isinstance(value, int | np.integer):
        return str(int(value))

    if isinstance(value, float | np.floating):
        return format_float(float(value))

    if isinstance(value, Enum):
        return str(value.value)

    return str(value)


def to_jsonable(value: Any) -> Any:
    """
    Convert results to plain JSON types.

    Dataclasses become objects, arrays and tuples become lists, enums their
    values, and non-finite floats null.
    """

    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}

    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}

    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]

    if isinstance(value, list | tuple):
        return [to_jsonable(v) for v in value]

    if isinstance(value, Enum):
        return value.value

    if isinstance(value, bool | np.bool_):
        return bool(value)

    if isinstance(value, int | np.integer):
        return int(value)

    if isinstance(value, float | np.floating):
        value = float(value)
        return value if math.isfinite(value) else None

    if isinstance(value, Path):
        return str(value)

    return value


@contextmanager
def open_output(path: Path | str | None) -> Iterator[TextIO]:
    """ Open an output file, or standard output for None or `-`. """

    if path is None or str(path) == "-":
        yield sys.stdout
        return

    with open(path, "w", newline="", encoding="utf-8") as file:
        yield file


def write_csv(out: TextIO, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """
    Write a header and rows with full float precision.

    Parameters
    ----------
    out
        Text stream.
    header
        Column names.
    rows
        Row values.
    """

    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)

    for row in rows:
        writer.writerow([format_cell(v) for v in row])


def dumps_json(payload: Mapping[str, Any]) -> str:
    """ JSON text of a result object, with a `version` field. """

    from pifsched import __version__

    document = {"version": __version__}
    document.update(to_jsonable(payload))
    return json.dumps(document, indent=2, allow_nan=False)


def write_json(out: TextIO, payload: Mapping[str, Any]) -> None:
    out.write(dumps_json(payload))
    out.write("\n")
