"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pifsched import __version__
from pifsched.export import dumps_json, format_cell, format_float, open_output, to_jsonable, write_csv
from pifsched.models import ScheduleKind


@dataclass(frozen=True)
class _Row:
    name: str
    value: float
    kind: ScheduleKind


def test_format_float_keeps_every_digit():
    for value in (0.1, 1 / 3, 2.0 ** -40, 1.0024183311, 123456789.123456789):
        assert float(format_float(value)) == value

    assert format_float(0.5) == "0.5"


def test_format_cell():
    assert format_cell(None) == ""
    assert format_cell(True) == "true"
    assert format_cell(np.bool_(False)) == "false"
    assert format_cell(np.int64(7)) == "7"
    assert format_cell(np.float32(0.5)) == "0.5"
    assert format_cell(ScheduleKind.COSINE) == "cosine"
    assert format_cell("r0c0") == "r0c0"


def test_to_jsonable():
    payload = {
        "row": _Row("a", math.nan, ScheduleKind.LINEAR),
        "values": np.array([1.0, np.inf]),
        "pair": (np.int32(3), Path("out.csv")),
        "flag": np.bool_(True)
    }

    assert to_jsonable(payload) == {
        "row": {"name": "a", "value": None, "kind": "linear"},
        "values": [1.0, None],
        "pair": [3, "out.csv"],
        "flag": True
    }


def test_dumps_json_is_strict():
    document = json.loads(dumps_json({"root": math.inf, "n": 3}))

    assert document == {"version": __version__, "root": None, "n": 3}


def test_write_csv():
    out = io.StringIO()
    write_csv(out, ("t", "value", "ok"), [(1, 0.1, True), (2, None, False)])

    assert out.getvalue() == "t,value,ok\n1,0.10000000000000001,true\n2,,false\n"


def test_open_output(tmp_path: Path, capsys):
    with open_output(None) as out:
        out.write("to stdout\n")

    with open_output(tmp_path / "result.csv") as out:
        out.write("to file\n")

    assert capsys.readouterr().out == "to stdout\n"
    assert (tmp_path / "result.csv").read_text() == "to file\n"
