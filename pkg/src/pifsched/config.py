"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import logging
import dataclasses
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from pifsched.common import MORAN_TOLERANCE, POWER_TOLERANCE
from pifsched.errors import FormatError, ValidationError
from pifsched.models import OutputFormat, ScheduleKind
from pifsched.path import existing_file
from pifsched.schedule import Schedule, even_timesteps, make_cosine, make_linear, stride_timesteps, subsample


logger = logging.getLogger(__name__)


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()

    if lowered in ("1", "true", "yes", "on"):
        return True

    if lowered in ("0", "false", "no", "off"):
        return False

    raise ValueError(f"'{text}' is not a boolean")


def parse_subsample(text: str) -> str:
    """ Validate a `stride:K` or `steps:N` subsampling rule. """

    rule, _, value = text.strip().partition(":")
    if rule not in ("stride", "steps") or not value.strip().isdigit() or int(value) < 1:
        raise ValueError(f"'{text}' is not of the form stride:K or steps:N")

    return f"{rule}:{int(value)}"


def subsample_timesteps(rule: str, T: int) -> list[int]:
    """
    Parent timesteps selected by a subsampling rule.

    Parameters
    ----------
    rule
        `stride:K` executes {K, 2K, ..., <= T}, `steps:N` uses stride T // N.
    T
        Parent length.
    """

    kind, _, value = parse_subsample(rule).partition(":")

    if kind == "stride":
        return stride_timesteps(T, int(value))

    return even_timesteps(T, int(value))


def _optional(convert: Callable[[str], Any]) -> Callable[[str], Any]:
    def wrapper(text: str) -> Any:
        return None if text.strip().lower() in ("", "none") else convert(text)

    return wrapper


# Text parser of every configuration key
CONVERTERS: dict[str, Callable[[str], Any]] = {
    "kind": lambda text: ScheduleKind(text.strip()),
    "T": int,
    "beta1": float,
    "betaT": float,
    "offset": float,
    "clip_beta": parse_bool,
    "subsample": _optional(parse_subsample),
    "spectrum": _optional(Path),
    "suppression": _optional(Path),
    "dataset": _optional(Path),
    "moran_tol": float,
    "power_tol": float,
    "format": lambda text: OutputFormat(text.strip()),
    "threads": _optional(int),
    "seed": int
}


@dataclass(frozen=True)
class Config:
    """
    Settings shared by every command.

    Attributes
    ----------
    kind
        Schedule family, linear or cosine.
    T
        Number of steps.
    beta1, betaT
        Linear schedule endpoints.
    offset
        Cosine offset.
    clip_beta
        Cap cosine betas at 0.999.
    subsample
        Optional `stride:K` or `steps:N` rule.
    spectrum
        Patch spectrum CSV.
    suppression
        Suppression table CSV.
    dataset
        Dataset directory or file.
    moran_tol
        Moran root tolerance.
    power_tol
        Power iteration tolerance.
    format
        Output format.
    threads
        Worker thread count, automatic when None.
    seed
        Seed of every random generator.
    """

    kind: ScheduleKind = ScheduleKind.LINEAR
    T: int = 1000
    beta1: float = 1e-4
    betaT: float = 0.02
    offset: float = 0.008
    clip_beta: bool = True
    subsample: str | None = None
    spectrum: Path | None = None
    suppression: Path | None = None
    dataset: Path | None = None
    moran_tol: float = MORAN_TOLERANCE
    power_tol: float = POWER_TOLERANCE
    format: OutputFormat = OutputFormat.CSV
    threads: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in (ScheduleKind.LINEAR, ScheduleKind.COSINE):
            raise ValidationError(f"schedule kind must be linear or cosine, got {self.kind.value}")

        if self.T < 1:
            raise ValidationError(f"T must be at least 1, got {self.T}")

        if not (self.moran_tol > 0.0 and self.power_tol > 0.0):
            raise ValidationError("tolerances must be positive")

        if self.threads is not None and self.threads < 1:
            raise ValidationError(f"thread count must be at least 1, got {self.threads}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "Config | None" = None) -> "Config":
        """
        Config with `values` laid over `base` (or the defaults).

        String values are parsed with the key's converter, other values are
        used as given.
        """

        fields = dataclasses.asdict(base or cls())

        for key, value in values.items():
            if key not in CONVERTERS:
                raise ValidationError(f"unknown configuration key '{key}'")

            if isinstance(value, str):
                try:
                    value = CONVERTERS[key](value)
                except ValueError as e:
                    raise ValidationError(f"invalid value for '{key}': {e}")

            fields[key] = value

        return cls(**fields)

    def schedule(self) -> Schedule:
        """ Build the configured schedule, subsampled if a rule is set. """

        if self.kind is ScheduleKind.LINEAR:
            s = make_linear(self.T, self.beta1, self.betaT)
        else:
            s = make_cosine(self.T, self.offset, self.clip_beta)

        if self.subsample is not None:
            s = subsample(s, subsample_timesteps(self.subsample, self.T))

        return s


def load_config(path: Path | str) -> dict[str, Any]:
    """
    Parse a flat `key = value` file.

    Blank lines and `#` comments are ignored. Unknown keys and unparsable
    values raise FormatError naming the line.

    Parameters
    ----------
    path
        Configuration file.
    """

    path = existing_file(path)
    values = {}

    with open(path, encoding="utf-8") as file:
        for line_no, raw in enumerate(file, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue

            key, sep, text = line.partition("=")
            key = key.strip()

            if not sep or not key:
                raise FormatError("expected 'key = value'", path, line_no)

            if key not in CONVERTERS:
                raise FormatError(f"unknown key '{key}'", path, line_no)

            try:
                values[key] = CONVERTERS[key](text.strip())
            except ValueError as e:
                raise FormatError(f"invalid value for '{key}': {e}", path, line_no, raw.index("=") + 2)

    logger.debug("Loaded %d setting(s) from %s", len(values), path)
    return values
