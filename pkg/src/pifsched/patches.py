"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import csv
import math
import struct
import logging
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import islice
from pathlib import Path

import numpy as np
from scipy import linalg

from pifsched.attractor import Patch, PatchSpectrum
from pifsched.common import (
    CIFAR10_RECORD_BYTES,
    CIFAR10_SHAPE,
    FULL_SPECTRUM_MAX_DIM,
    POWER_MAX_ITERATIONS,
    POWER_TOLERANCE,
    RAW_F32_HEADER_BYTES,
    RAW_F32_MAGIC
)
from pifsched.errors import DatasetIOError, FormatError, ValidationError
from pifsched.export import format_float
from pifsched.models import ImageFormat, Normalization
from pifsched.path import existing_file, resolve
from pifsched.platform import thread_count


logger = logging.getLogger(__name__)

_RAW_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class ImageSource:
    """
    Collection of equally sized images on disk.

    Attributes
    ----------
    format
        Container format.
    paths
        Files in read order.
    shape
        (H, W, C) of every image.
    count
        Number of images over all files.
    normalization
        Pixel mapping applied when reading.
    """

    format: ImageFormat
    paths: tuple[Path, ...]
    shape: tuple[int, int, int]
    count: int
    normalization: Normalization = Normalization.SYMMETRIC

    def _read(self, path: Path) -> np.ndarray:
        if self.format is ImageFormat.CIFAR10_BINARY:
            records = np.fromfile(path, dtype=np.uint8).reshape(-1, CIFAR10_RECORD_BYTES)
            # Label byte first, then channel-planar R, G, B
            pixels = records[:, 1:].reshape(-1, CIFAR10_SHAPE[2], CIFAR10_SHAPE[0], CIFAR10_SHAPE[1])
            images = pixels.transpose(0, 2, 3, 1)
        else:
            images = np.fromfile(path, dtype="<f4", offset=RAW_F32_HEADER_BYTES).reshape(-1, *self.shape)

        images = images.astype(np.float64)

        match self.normalization:
            case Normalization.SYMMETRIC:
                return images * (2.0 / 255.0) - 1.0
            case Normalization.UNIT:
                return images / 255.0
            case Normalization.NONE:
                return images

    def batches(self, size: int) -> Iterator[np.ndarray]:
        """
        Images in read order, `size` at a time.

        Parameters
        ----------
        size
            Batch size, the last batch may be shorter.
        """

        if size < 1:
            raise ValidationError(f"batch size must be at least 1, got {size}")

        pending = []
        waiting = 0

        for path in self.paths:
            try:
                images = self._read(path)
            except OSError as e:
                raise DatasetIOError(f"cannot read '{path}': {e}")

            start = 0
            while start < len(images):
                take = min(size - waiting, len(images) - start)
                pending.append(images[start:start + take])
                waiting += take
                start += take

                if waiting == size:
                    yield np.concatenate(pending)
                    pending, waiting = [], 0

        if pending:
            yield np.concatenate(pending)

    def images(self) -> Iterator[np.ndarray]:
        """ Images one at a time. """

        for batch in self.batches(1024):
            yield from batch


def _check_paths(paths: Sequence[Path | str]) -> tuple[Path, ...]:
    if not paths:
        raise ValidationError("no input files given")

    return tuple(existing_file(p) for p in paths)


def read_cifar10(paths: Sequence[Path | str], normalization: Normalization = Normalization.SYMMETRIC) -> ImageSource:
    """
    Open CIFAR-10 binary batch files.

    Every record is one label byte followed by 3072 pixel bytes, channel-planar.

    Parameters
    ----------
    paths
        Batch files, e.g. data_batch_1.bin .. data_batch_5.bin.
    normalization
        Pixel mapping.
    """

    files = _check_paths(paths)
    count = 0

    for path in files:
        size = path.stat().st_size
        if size == 0 or size % CIFAR10_RECORD_BYTES:
            raise FormatError(f"file size {size} is not a positive multiple of {CIFAR10_RECORD_BYTES}", path)

        count += size // CIFAR10_RECORD_BYTES

    logger.info("Opened %d CIFAR-10 image(s) from %d file(s)", count, len(files))
    return ImageSource(ImageFormat.CIFAR10_BINARY, files, CIFAR10_SHAPE, count, normalization)


def _read_raw_header(path: Path) -> tuple[int, tuple[int, int, int]]:
    with open(path, "rb") as file:
        header = file.read(RAW_F32_HEADER_BYTES)

    if len(header) < RAW_F32_HEADER_BYTES:
        raise FormatError("truncated header", path)

    magic, count, height, packed = _RAW_HEADER.unpack(header)
    if magic != RAW_F32_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RAW_F32_MAGIC!r}", path)

    shape = (height, packed & 0xFFFF, packed >> 16)
    if min(shape) < 1:
        raise FormatError(f"invalid image shape {shape}", path)

    expected = RAW_F32_HEADER_BYTES + 4 * count * math.prod(shape)
    if path.stat().st_size != expected:
        raise FormatError(f"file size {path.stat().st_size} does not match header ({expected} bytes)", path)

    return count, shape


def read_raw_f32(paths: Sequence[Path | str], normalization: Normalization = Normalization.NONE) -> ImageSource:
    """
    Open raw float32 image files.

    The 16-byte header holds the magic `PSPC`, then little-endian u32 image
    count, u32 height and a u32 packing width (low 16 bits) and channels
    (high 16 bits). Little-endian float32 pixels follow in HWC order.

    Parameters
    ----------
    paths
        Files with identical image shapes.
    normalization
        Pixel mapping.
    """

    files = _check_paths(paths)
    count = 0
    shape = None

    for path in files:
        n, file_shape = _read_raw_header(path)

        if shape is not None and file_shape != shape:
            raise FormatError(f"image shape {file_shape} differs from {shape}", path)

        shape = file_shape
        count += n

    return ImageSource(ImageFormat.RAW_F32, files, shape, count, normalization)


def write_raw_f32(path: Path | str, images: np.ndarray) -> None:
    """
    Write images of shape (N, H, W, C) as a raw float32 file.

    Parameters
    ----------
    path
        Output file.
    images
        Image stack.
    """

    stack = np.asarray(images)
    if stack.ndim != 4:
        raise ValidationError(f"expected an (N, H, W, C) stack, got shape {stack.shape}")

    count, height, width, channels = stack.shape
    if width > 0xFFFF or channels > 0xFFFF:
        raise ValidationError("width and channels must fit in 16 bits")

    with open(resolve(path), "wb") as file:
        file.write(_RAW_HEADER.pack(RAW_F32_MAGIC, count, height, width | (channels << 16)))
        file.write(np.ascontiguousarray(stack, dtype="<f4").tobytes())


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Cut images into non-overlapping square patches.

    Returns an array of shape (N, rows * cols, patch_size^2 * C), patches in
    row-major order.
    """

    count, height, width, channels = images.shape
    rows, cols = height // patch_size, width // patch_size

    tiles = images.reshape(count, rows, patch_size, cols, patch_size, channels)
    return tiles.transpose(0, 1, 3, 2, 4, 5).reshape(count, rows * cols, patch_size * patch_size * channels)


def patch_ids(shape: tuple[int, int, int], patch_size: int) -> list[str]:
    rows, cols = shape[0] // patch_size, shape[1] // patch_size
    return [f"r{r}c{c}" for r in range(rows) for c in range(cols)]


class CovarianceAccumulator:
    """
    Running mean and scatter of every patch.

    Partial accumulators are merged with the pairwise update of Chan et al.,
    so chunked and serial runs agree up to reassociation.

    Parameters
    ----------
    patches
        Number of patches.
    dim
        Dimension of every patch.
    """

    def __init__(self, patches: int, dim: int) -> None:
        self.count = 0
        self.mean = np.zeros((patches, dim))
        self.scatter = np.zeros((patches, dim, dim))

    def update(self, samples: np.ndarray) -> None:
        """
        Add a batch of patch vectors.

        Parameters
        ----------
        samples
            Array of shape (N, patches, dim).
        """

        if len(samples) == 0:
            return

        batch = CovarianceAccumulator(*self.mean.shape)
        batch.count = len(samples)
        batch.mean = samples.mean(axis=0)

        centered = samples - batch.mean
        batch.scatter = np.einsum("npi,npj->pij", centered, centered)

        self.merge(batch)

    def merge(self, other: "CovarianceAccumulator") -> None:
        """ Fold another accumulator into this one. """

        if other.count == 0:
            return

        if self.count == 0:
            self.count = other.count
            self.mean = other.mean.copy()
            self.scatter = other.scatter.copy()
            return

        total = self.count + other.count
        delta = other.mean - self.mean

        self.scatter = self.scatter + other.scatter + np.einsum("pi,pj->pij", delta, delta) * (self.count * other.count / total)
        self.mean = self.mean + delta * (other.count / total)
        self.count = total

    def covariance(self) -> np.ndarray:
        """ Sample covariance (n - 1 denominator) of every patch. """

        if self.count < 2:
            raise ValidationError(f"covariance needs at least 2 samples, got {self.count}")

        covariance = self.scatter / (self.count - 1)
        return 0.5 * (covariance + covariance.transpose(0, 2, 1))


def power_iteration(
        matrix: np.ndarray,
        tol: float = POWER_TOLERANCE,
        max_iter: int = POWER_MAX_ITERATIONS,
        seed: int = 0
        ) -> tuple[float, int]:
    """
    Leading eigenvalue of a symmetric positive semidefinite matrix.

    Iterates from a seeded random start until |A x - lambda x| <= tol * lambda.
    A zero matrix has leading eigenvalue 0.

    Parameters
    ----------
    matrix
        Symmetric matrix.
    tol
        Relative residual tolerance.
    max_iter
        Iteration cap.
    seed
        Seed of the starting vector.

    Returns
    -------
    (eigenvalue, iterations)
    """

    a = np.asarray(matrix, dtype=np.float64)
    rng = np.random.default_rng(seed)

    x = rng.standard_normal(len(a))
    x /= np.linalg.norm(x)

    lam = 0.0
    for iteration in range(1, max_iter + 1):
        y = a @ x
        norm = np.linalg.norm(y)

        if norm == 0.0:
            return 0.0, iteration

        lam = float(x @ y)
        x = y / norm

        residual = np.linalg.norm(a @ x - lam * x)
        if residual <= tol * abs(lam):
            return lam, iteration

    logger.warning("Power iteration stopped at the %d-iteration cap", max_iter)
    return lam, max_iter


def _accumulate(images: np.ndarray, patch_size: int) -> CovarianceAccumulator:
    samples = extract_patches(images, patch_size)
    acc = CovarianceAccumulator(samples.shape[1], samples.shape[2])
    acc.update(samples)
    return acc


def patch_covariances(
        source: ImageSource,
        patch_size: int,
        full_spectrum: bool = False,
        tol: float = POWER_TOLERANCE,
        threads: int | None = None,
        chunk_size: int = 2000,
        seed: int = 0
        ) -> PatchSpectrum:
    """
    Estimate the covariance spectrum of every patch position.

    Covariances are centred on the dataset mean of each patch. Chunks of
    images are accumulated in parallel and merged in chunk order.

    Parameters
    ----------
    source
        Images.
    patch_size
        Side of the square patches, must divide H and W.
    full_spectrum
        Report every eigenvalue (patch dimension <= 256) instead of only the
        leading one.
    tol
        Power iteration tolerance.
    threads
        Worker count.
    chunk_size
        Images per parallel chunk.
    seed
        Power iteration seed.
    """

    height, width, channels = source.shape

    if patch_size < 1 or height % patch_size or width % patch_size:
        raise ValidationError(f"patch size {patch_size} does not divide {height}x{width} images")

    if source.count < 2:
        raise ValidationError(f"covariance needs at least 2 images, got {source.count}")

    dim = patch_size * patch_size * channels
    if full_spectrum and dim > FULL_SPECTRUM_MAX_DIM:
        raise ValidationError(f"full spectra need patch dimension <= {FULL_SPECTRUM_MAX_DIM}, got {dim}")

    ids = patch_ids(source.shape, patch_size)
    total = CovarianceAccumulator(len(ids), dim)
    workers = thread_count(threads)

    chunks = source.batches(chunk_size)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        while window := list(islice(chunks, workers)):
            for partial in pool.map(lambda images: _accumulate(images, patch_size), window):
                total.merge(partial)

            logger.debug("Accumulated %d image(s)", total.count)

    covariances = total.covariance()
    patches = []

    for pid, cov in zip(ids, covariances):
        if full_spectrum:
            eigenvalues = np.clip(linalg.eigh(cov, eigvals_only=True)[::-1], 0.0, None)
        else:
            lam, _ = power_iteration(cov, tol, seed=seed)
            eigenvalues = np.array([max(lam, 0.0)])

        patches.append(Patch(pid, dim, eigenvalues))

    logger.info("Estimated %d patch spectra from %d image(s)", len(patches), total.count)
    return PatchSpectrum(tuple(patches))


def write_spectrum(spectrum: PatchSpectrum, path: Path | str) -> None:
    """
    Write a spectrum CSV.

    Isotropic spectra use the header `patch,n_k,lambda`, full spectra
    `patch,n_k,mu_1,...,mu_n`.
    """

    if spectrum.is_isotropic:
        header = ["patch", "n_k", "lambda"]
    elif all(not p.isotropic for p in spectrum.patches):
        header = ["patch", "n_k"] + [f"mu_{i + 1}" for i in range(max(p.n for p in spectrum.patches))]
    else:
        raise ValidationError("cannot write a spectrum mixing isotropic and full patches")

    with open(resolve(path), "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(header)

        for p in spectrum.patches:
            writer.writerow([p.id, p.n] + [format_float(float(mu)) for mu in p.eigenvalues])

    logger.info("Wrote spectrum of %d patch(es) to %s", len(spectrum.patches), path)


def read_spectrum(path: Path | str) -> PatchSpectrum:
    """
    Read a spectrum CSV written by write_spectrum or by hand.

    Parameters
    ----------
    path
        CSV file with header `patch,n_k,lambda` or `patch,n_k,mu_1,...`.
    """

    path = existing_file(path)
    patches = []

    with open(path, newline="", encoding="utf-8") as file:
        reader = csv.reader(file)
        header = [h.strip() for h in next(reader, [])]

        if header[:2] != ["patch", "n_k"] or len(header) < 3:
            raise FormatError("expected header 'patch,n_k,lambda' or 'patch,n_k,mu_1,...'", path, 1)

        isotropic = header[2:] == ["lambda"]
        if not isotropic and header[2:] != [f"mu_{i + 1}" for i in range(len(header) - 2)]:
            raise FormatError("eigenvalue columns must be 'lambda' or 'mu_1,...,mu_n'", path, 1)

        for row in reader:
            line = reader.line_num
            cells = [c.strip() for c in row]

            while cells and cells[-1] == "":
                cells.pop()

            if not cells:
                continue

            if len(cells) < 3 or len(cells) > len(header):
                raise FormatError(f"expected up to {len(header)} fields, got {len(cells)}", path, line)

            try:
                n = int(cells[1])
            except ValueError:
                raise FormatError(f"n_k '{cells[1]}' is not an integer", path, line, 2)

            values = []
            for column, cell in enumerate(cells[2:], start=3):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise FormatError(f"eigenvalue '{cell}' is not a number", path, line, column)

            if not isotropic and len(values) != n:
                raise FormatError(f"patch has n_k = {n} but {len(values)} eigenvalue(s)", path, line)

            try:
                patches.append(Patch(cells[0], n, np.array(values)))
            except ValidationError as e:
                raise FormatError(str(e), path, line)

    if not patches:
        raise FormatError("spectrum has no patches", path)

    try:
        return PatchSpectrum(tuple(patches))
    except ValidationError as e:
        raise FormatError(str(e), path)
