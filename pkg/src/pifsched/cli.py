"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import sys
import logging
import argparse
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NoReturn

from pifsched import __version__
from pifsched.attractor import PatchSpectrum, ky_gaussian, ky_suppressed, moran_root, moran_root_suppressed
from pifsched.common import (
    CONTRACTION_HEADER,
    GAINS_HEADER,
    GEOMETRY_HEADER,
    REFERENCE_PRESETS,
    RELEASE_HEADER,
    SPECTRUM_PRESETS
)
from pifsched.config import Config, load_config
from pifsched.contraction import contraction_rows, lambda_star_profile
from pifsched.design import allocate_steps, compare_schedules, cosine_offset_analysis, expansion_census
from pifsched.errors import DatasetIOError, PifsError, ValidationError
from pifsched.export import open_output, write_csv, write_json
from pifsched.gaussian_sim import build_chain, gains_rows, run_chain
from pifsched.models import ImageFormat, Interpolation, Normalization, OutputFormat, ScheduleKind, SuppressionMode
from pifsched.patches import patch_covariances, read_cifar10, read_raw_f32, read_spectrum, write_spectrum
from pifsched.platform import get_cpu_info
from pifsched.regime import SuppressionTable, release_times
from pifsched.schedule import geometry_rows, threshold_stats


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2

COMPARE_HEADER = (
    "name", "mean", "std", "cv", "min", "min_t", "finest", "finest_t",
    "lambda_star_min", "lambda_star_argmin", "lambda_star_max", "moran_root",
    "ig_cv", "dd_cv", "rho", "ratio_to_theory", "n_plus_plus"
)


class UsageError(ValidationError):
    """ Malformed command line. """


class ArgumentParser(argparse.ArgumentParser):
    """ argparse parser that reports usage errors as exit code 1. """

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


class Result:
    """
    Output of a command, written only after every computation succeeded.

    Parameters
    ----------
    header
        CSV header, None for plain line output.
    rows
        CSV rows or plain lines.
    payload
        JSON document.
    """

    def __init__(self, header: Sequence[str] | None, rows: list, payload: dict[str, Any]) -> None:
        self.header = header
        self.rows = rows
        self.payload = payload

    def write(self, path: Path | None, format: OutputFormat) -> None:
        with open_output(path) as out:
            if format is OutputFormat.JSON:
                write_json(out, self.payload)
            elif self.header is None:
                for row in self.rows:
                    out.write(f"{row}\n")
            else:
                write_csv(out, self.header, self.rows)


def _add_common(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("schedule")
    group.add_argument("--config", type=Path, help="Flat 'key = value' settings file.")
    group.add_argument("--kind", choices=[ScheduleKind.LINEAR.value, ScheduleKind.COSINE.value])
    group.add_argument("--T", type=int, help="Number of steps.")
    group.add_argument("--beta1", type=float, help="First beta of the linear schedule.")
    group.add_argument("--betaT", type=float, help="Last beta of the linear schedule.")
    group.add_argument("--offset", type=float, help="Cosine schedule offset.")
    group.add_argument("--no-clip-beta", dest="clip_beta", action="store_const", const=False,
                       help="Do not cap cosine betas at 0.999.")
    group.add_argument("--subsample", help="Subsampling rule, stride:K or steps:N.")

    group = parser.add_argument_group("output")
    group.add_argument("--format", choices=[f.value for f in OutputFormat])
    group.add_argument("--out", type=Path, help="Output file, standard output by default.")
    group.add_argument("--threads", type=int)
    group.add_argument("--seed", type=int)
    group.add_argument("-v", "--verbose", action="count", default=0, help="More logging, repeat for debug.")
    group.add_argument("-q", "--quiet", action="store_true", help="Only log errors.")


def _config(args: argparse.Namespace) -> Config:
    keys = ("kind", "T", "beta1", "betaT", "offset", "clip_beta", "subsample", "spectrum",
            "suppression", "dataset", "format", "threads", "seed")

    base = Config.from_mapping(load_config(args.config)) if args.config else Config()

    overrides = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value

    if getattr(args, "tol", None) is not None:
        overrides["moran_tol"] = args.tol

    if getattr(args, "power_tol", None) is not None:
        overrides["power_tol"] = args.power_tol

    return Config.from_mapping(overrides, base)


def _require_spectrum(config: Config) -> PatchSpectrum:
    if config.spectrum is None:
        raise ValidationError("this command needs --spectrum")

    return read_spectrum(config.spectrum)


def _require_suppression(config: Config, interpolation: Interpolation = Interpolation.LINEAR) -> SuppressionTable:
    if config.suppression is None:
        raise ValidationError("this command needs --suppression")

    return SuppressionTable.from_csv(config.suppression, interpolation)


def cmd_schedule(args: argparse.Namespace, config: Config) -> Result:
    s = config.schedule()

    if args.lam is not None:
        rows = list(contraction_rows(s, args.lam))
        return Result(CONTRACTION_HEADER, rows, {"lambda": args.lam, "header": CONTRACTION_HEADER, "rows": rows})

    rows = list(geometry_rows(s))
    return Result(GEOMETRY_HEADER, rows, {
        "schedule": {"kind": s.kind, "T": s.T, "params": dict(s.params)},
        "stats": threshold_stats(s),
        "header": GEOMETRY_HEADER,
        "rows": rows
    })


def _report_row(r) -> tuple:
    st = r.stats
    return (
        r.name, st.mean, st.std, st.cv, st.min_value, st.min_timestep,
        st.value_at_finest_executed_step, st.finest_timestep,
        r.lambda_star_min, r.lambda_star_argmin, r.lambda_star_max, r.moran_root,
        r.ig_cv, r.dd_cv, r.rho, r.ratio_to_theory, r.n_plus_plus
    )


def cmd_compare(args: argparse.Namespace, config: Config) -> Result:
    spectrum = read_spectrum(config.spectrum) if config.spectrum is not None else None

    if args.presets == "table2" and spectrum is None:
        raise ValidationError("--presets table2 needs --spectrum")

    if args.presets is None:
        schedules = {config.kind.value: config.schedule()}
    else:
        presets = REFERENCE_PRESETS if args.presets == "table1" else SPECTRUM_PRESETS
        schedules = {name: Config.from_mapping(values).schedule() for name, values in presets}

    reports = compare_schedules(schedules, spectrum, config.threads)
    rows = [_report_row(r) for r in reports]
    return Result(COMPARE_HEADER, rows, {"reports": reports})


def cmd_moran(args: argparse.Namespace, config: Config) -> Result:
    s = config.schedule()

    if config.suppression is not None:
        table = _require_suppression(config, Interpolation(args.interpolation))
        results = moran_root_suppressed(s, table, (1.0, args.cap), SuppressionMode(args.mode), config.moran_tol)

        rows = [(key, r.value, r.residual, r.iterations, r.capped) for key, r in results.items()]
        header = ("patch", "lambda_triple_star", "residual", "iterations", "capped")
        return Result(header, rows, {"mode": args.mode, "roots": results})

    root = moran_root(s, config.moran_tol)
    minimum = float(lambda_star_profile(s).min())

    rows = [(root.value, root.residual, root.iterations, minimum, root.value - minimum)]
    header = ("lambda_star_star", "residual", "iterations", "min_lambda_star", "margin")
    return Result(header, rows, {"root": root, "min_lambda_star": minimum})


def cmd_ky(args: argparse.Namespace, config: Config) -> Result:
    s = config.schedule()
    spectrum = _require_spectrum(config)

    if config.suppression is not None:
        report = ky_suppressed(s, spectrum, _require_suppression(config, Interpolation(args.interpolation)))
    else:
        report = ky_gaussian(s, spectrum)

    header = ("mode", "dimension", "j_star", "expanding", "n", "condition_holds", "closed_form", "lower_bound", "saturated")
    rows = [(report.mode, report.dimension, report.j_star, report.expanding, len(report.exponents),
             report.condition_holds, report.closed_form, report.lower_bound, report.saturated)]
    return Result(header, rows, {"report": report})


def cmd_allocate(args: argparse.Namespace, config: Config) -> Result:
    allocation = allocate_steps(config.schedule(), args.N)
    return Result(None, list(allocation.timesteps), {"allocation": allocation, "load_spread": allocation.load_spread})


def _dataset_files(path: Path, format: ImageFormat) -> list[Path]:
    if path.is_file():
        return [path]

    if not path.is_dir():
        raise DatasetIOError(f"no such dataset: '{path}'")

    pattern = "data_batch_*.bin" if format is ImageFormat.CIFAR10_BINARY else "*.f32"
    files = sorted(path.glob(pattern))

    if not files:
        raise DatasetIOError(f"no '{pattern}' files under '{path}'")

    return files


def cmd_patches(args: argparse.Namespace, config: Config) -> Result:
    if config.dataset is None:
        raise ValidationError("patches needs --dataset")

    if args.out is None:
        raise ValidationError("patches needs --out for the spectrum file")

    format = ImageFormat(args.image_format)
    files = _dataset_files(config.dataset, format)

    if format is ImageFormat.CIFAR10_BINARY:
        source = read_cifar10(files, Normalization(args.normalization or "symmetric"))
    else:
        source = read_raw_f32(files, Normalization(args.normalization or "none"))

    spectrum = patch_covariances(source, args.patch_size, args.full_spectrum, config.power_tol, config.threads, seed=config.seed)

    write_spectrum(spectrum, args.out)
    return Result(None, [], {})


def cmd_simulate(args: argparse.Namespace, config: Config) -> Result:
    chain = build_chain(config.schedule(), _require_spectrum(config))
    rows = list(gains_rows(chain))
    result = run_chain(chain)
    return Result(GAINS_HEADER, rows, {"header": GAINS_HEADER, "rows": rows, "fixed_point_residual": result.fixed_point_residual})


def cmd_regime(args: argparse.Namespace, config: Config) -> Result:
    s = config.schedule()
    spectrum = _require_spectrum(config)
    table = _require_suppression(config, Interpolation(args.interpolation))

    report = release_times(s, table, spectrum.lambdas())
    rows = list(report.rows())
    return Result(RELEASE_HEADER, rows, {"header": RELEASE_HEADER, "rows": rows, "span": report.span})


def cmd_offset(args: argparse.Namespace, config: Config) -> Result:
    rows = cosine_offset_analysis(config.T, args.offsets)
    return Result(("s_off", "v_1", "L_1_star", "ratio"), [(r.s_off, r.v_1, r.L_1_star, r.ratio) for r in rows], {"rows": rows})


def cmd_census(args: argparse.Namespace, config: Config) -> Result:
    report = expansion_census(config.schedule(), _require_spectrum(config), not args.no_boundary)
    rows = [(pid, count, report.steps) for pid, count in report.counts.items()]
    return Result(("patch", "forcing_steps", "steps"), rows, {"census": report})


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a comma separated list of numbers")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="pifsched",
        description="Contraction geometry, attractor dimensions and design criteria for diffusion noise schedules"
    )
    parser.add_argument("--version", action="version", version=f"pifsched {__version__}")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def add(name: str, handler: Callable[[argparse.Namespace, Config], Result], help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        _add_common(p)
        p.set_defaults(handler=handler)
        return p

    p = add("schedule", cmd_schedule, "Per-step geometry of a schedule.")
    p.add_argument("--lambda", dest="lam", type=float, help="Emit f_t(lambda) and lambda*(t) instead.")

    p = add("compare", cmd_compare, "Contraction statistics of several schedules.")
    p.add_argument("--presets", choices=["table1", "table2"],
                   help="table1: the four reference schedules, table2: linear and improved cosine with --spectrum.")
    p.add_argument("--spectrum", type=Path)

    p = add("moran", cmd_moran, "Root of the Moran equation.")
    p.add_argument("--tol", type=float)
    p.add_argument("--suppression", type=Path)
    p.add_argument("--mode", choices=[m.value for m in SuppressionMode], default=SuppressionMode.PER_PATCH.value)
    p.add_argument("--cap", type=float, default=500.0)
    p.add_argument("--interpolation", choices=[i.value for i in Interpolation], default=Interpolation.LINEAR.value)

    p = add("ky", cmd_ky, "Kaplan-Yorke dimension of the chain attractor.")
    p.add_argument("--spectrum", type=Path)
    p.add_argument("--suppression", type=Path)
    p.add_argument("--interpolation", choices=[i.value for i in Interpolation], default=Interpolation.LINEAR.value)

    p = add("allocate", cmd_allocate, "Equal-load N-step sampling schedule.")
    p.add_argument("--N", type=int, required=True)

    p = add("patches", cmd_patches, "Patch covariance spectra of an image dataset.")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--image-format", choices=[f.value for f in ImageFormat], default=ImageFormat.CIFAR10_BINARY.value)
    p.add_argument("--normalization", choices=[n.value for n in Normalization])
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--full-spectrum", action="store_true")
    p.add_argument("--power-tol", type=float)

    p = add("simulate", cmd_simulate, "Exact-score Gaussian chain gains.")
    p.add_argument("--spectrum", type=Path)

    p = add("regime", cmd_regime, "Patch release times from a suppression table.")
    p.add_argument("--spectrum", type=Path)
    p.add_argument("--suppression", type=Path)
    p.add_argument("--interpolation", choices=[i.value for i in Interpolation], default=Interpolation.LINEAR.value)

    p = add("offset", cmd_offset, "Boundary threshold of cosine schedules by offset.")
    p.add_argument("--offsets", type=_float_list, default=[0.0, 0.008])

    p = add("census", cmd_census, "Expansion-forcing steps per patch.")
    p.add_argument("--spectrum", type=Path)
    p.add_argument("--no-boundary", action="store_true", help="Skip the first and last steps.")

    return parser


def _configure_logging(verbose: int, quiet: bool) -> None:
    if quiet:
        level = logging.ERROR
    elif verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = logging.WARNING

    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Sequence[str] | None = None) -> int:
    """
    Command-line entry point.

    Parameters
    ----------
    argv
        Arguments without the program name, sys.argv[1:] by default.

    Returns
    -------
    Exit code: 0 on success, 1 on usage or validation errors, 2 on I/O errors.
    """

    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.verbose, args.quiet)

        cpu = get_cpu_info()
        logger.debug("pifsched %s on %s (%d cores)", __version__, cpu["name"], cpu["cores"])

        config = _config(args)
        result = args.handler(args, config)

        if args.command != "patches":
            result.write(args.out, config.format)

    except (DatasetIOError, OSError) as e:
        print(f"pifsched: error: {e}", file=sys.stderr)
        return EXIT_IO

    except PifsError as e:
        print(f"pifsched: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    return EXIT_OK
