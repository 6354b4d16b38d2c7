"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import numpy as np
import pytest

from pifsched.attractor import Patch, PatchSpectrum, ky_gaussian
from pifsched.errors import DatasetIOError, FormatError, ValidationError
from pifsched.models import Normalization
from pifsched.patches import (
    CovarianceAccumulator,
    extract_patches,
    patch_covariances,
    patch_ids,
    power_iteration,
    read_cifar10,
    read_raw_f32,
    read_spectrum,
    write_raw_f32,
    write_spectrum
)
from pifsched.schedule import make_linear


def _cifar_file(path, images, labels=None):
    """ Write (N, 32, 32, 3) uint8 images as a CIFAR-10 binary batch. """

    count = len(images)
    labels = np.zeros(count, dtype=np.uint8) if labels is None else labels

    planar = images.transpose(0, 3, 1, 2).reshape(count, -1)
    records = np.concatenate([labels[:, None], planar], axis=1).astype(np.uint8)
    records.tofile(path)
    return path


def test_constant_cifar_record(tmp_path):
    path = _cifar_file(tmp_path / "data_batch_1.bin", np.full((1, 32, 32, 3), 128, dtype=np.uint8))
    source = read_cifar10([path])

    assert source.count == 1
    assert source.shape == (32, 32, 3)

    image = next(source.images())
    assert np.allclose(image, 2.0 * 128 / 255 - 1.0)


def test_cifar_channel_layout(tmp_path, rng):
    images = rng.integers(0, 256, size=(3, 32, 32, 3), dtype=np.uint8)
    path = _cifar_file(tmp_path / "batch.bin", images, np.array([1, 2, 3], dtype=np.uint8))

    source = read_cifar10([path], Normalization.UNIT)
    read = np.concatenate(list(source.batches(2)))

    assert np.allclose(read, images / 255.0)


def test_cifar_bad_length(tmp_path):
    path = tmp_path / "broken.bin"
    path.write_bytes(b"\x00" * 100)

    with pytest.raises(FormatError):
        read_cifar10([path])


def test_cifar_missing_inputs(tmp_path):
    with pytest.raises(ValidationError):
        read_cifar10([])

    with pytest.raises(DatasetIOError):
        read_cifar10([tmp_path / "absent.bin"])


def test_raw_f32_file(tmp_path, rng):
    images = rng.standard_normal((5, 4, 6, 2)).astype(np.float32)
    path = tmp_path / "images.f32"
    write_raw_f32(path, images)

    source = read_raw_f32([path])

    assert source.shape == (4, 6, 2)
    assert source.count == 5
    assert np.array_equal(np.concatenate(list(source.batches(3))), images.astype(np.float64))


def test_raw_f32_bad_magic(tmp_path):
    path = tmp_path / "bad.f32"
    path.write_bytes(b"NOPE" + b"\x00" * 12)

    with pytest.raises(FormatError):
        read_raw_f32([path])


def test_patch_layout():
    images = np.arange(4 * 4 * 1, dtype=np.float64).reshape(1, 4, 4, 1)
    patches = extract_patches(images, 2)

    assert patches.shape == (1, 4, 4)
    assert list(patches[0, 1]) == [2.0, 3.0, 6.0, 7.0]
    assert patch_ids((4, 4, 1), 2) == ["r0c0", "r0c1", "r1c0", "r1c1"]


def test_chunked_accumulation_matches_serial(rng):
    samples = rng.standard_normal((500, 3, 6)) * np.array([1.0, 3.0, 0.5, 2.0, 1.0, 4.0])

    serial = CovarianceAccumulator(3, 6)
    serial.update(samples)

    chunked = CovarianceAccumulator(3, 6)
    for start in range(0, 500, 70):
        part = CovarianceAccumulator(3, 6)
        part.update(samples[start:start + 70])
        chunked.merge(part)

    assert chunked.count == 500
    assert np.allclose(chunked.covariance(), serial.covariance(), rtol=1e-8, atol=1e-12)
    assert np.allclose(serial.covariance()[1], np.cov(samples[:, 1, :], rowvar=False), rtol=1e-10)


def test_covariance_needs_two_samples(rng):
    acc = CovarianceAccumulator(1, 2)
    acc.update(rng.standard_normal((1, 1, 2)))

    with pytest.raises(ValidationError):
        acc.covariance()


def test_power_iteration_matches_dense_solver(rng):
    a = rng.standard_normal((192, 192))
    matrix = a @ a.T / 192

    lam, iterations = power_iteration(matrix)

    assert lam == pytest.approx(np.linalg.eigvalsh(matrix)[-1], rel=1e-9)
    assert iterations <= 10_000


def test_power_iteration_zero_matrix():
    assert power_iteration(np.zeros((4, 4)))[0] == 0.0


def _gaussian_images(rng, count):
    # 4x4 single-channel images, 2x2 patches with a known covariance
    scales = np.array([3.0, 1.0, 0.5, 0.2])
    tiles = rng.standard_normal((count, 4, 4)) * scales
    images = np.zeros((count, 4, 4, 1))

    for k, (r, c) in enumerate([(0, 0), (0, 2), (2, 0), (2, 2)]):
        images[:, r:r + 2, c:c + 2, 0] = tiles[:, k].reshape(count, 2, 2)

    return images, scales ** 2


def test_patch_covariances_recover_known_spectrum(tmp_path, rng):
    images, variances = _gaussian_images(rng, 4000)
    path = tmp_path / "gauss.f32"
    write_raw_f32(path, images)

    spectrum = patch_covariances(read_raw_f32([path]), 2, threads=2, chunk_size=300)
    full = patch_covariances(read_raw_f32([path]), 2, full_spectrum=True)

    assert [p.id for p in spectrum.patches] == ["r0c0", "r0c1", "r1c0", "r1c1"]

    for patch, full_patch in zip(spectrum.patches, full.patches):
        assert patch.isotropic
        assert patch.n == 4
        assert full_patch.eigenvalues.shape == (4,)
        assert patch.lam == pytest.approx(full_patch.lam, rel=1e-8)
        assert patch.lam == pytest.approx(variances.max(), rel=0.1)


def test_image_order_does_not_matter(tmp_path, rng):
    images, _ = _gaussian_images(rng, 600)
    write_raw_f32(tmp_path / "a.f32", images)
    write_raw_f32(tmp_path / "b.f32", images[::-1])

    a = patch_covariances(read_raw_f32([tmp_path / "a.f32"]), 2, chunk_size=100)
    b = patch_covariances(read_raw_f32([tmp_path / "b.f32"]), 2, chunk_size=64)

    for pa, pb in zip(a.patches, b.patches):
        assert pa.lam == pytest.approx(pb.lam, rel=1e-8)


def test_constant_dataset_has_zero_variance(tmp_path):
    write_raw_f32(tmp_path / "flat.f32", np.ones((10, 4, 4, 1)))
    spectrum = patch_covariances(read_raw_f32([tmp_path / "flat.f32"]), 2)

    assert all(p.lam == 0.0 for p in spectrum.patches)


def test_patch_size_must_divide(tmp_path):
    write_raw_f32(tmp_path / "x.f32", np.ones((4, 4, 4, 1)))

    with pytest.raises(ValidationError):
        patch_covariances(read_raw_f32([tmp_path / "x.f32"]), 3)


def test_spectrum_file(tmp_path):
    spectrum = PatchSpectrum.isotropic([("r0c0", 192, 44.4), ("r0c1", 192, 1 / 3)])
    path = tmp_path / "spectrum.csv"
    write_spectrum(spectrum, path)

    read = read_spectrum(path)

    assert [p.id for p in read.patches] == ["r0c0", "r0c1"]
    assert read.patches[1].lam == 1 / 3
    assert read.dimension == 384


def test_full_spectrum_file(tmp_path):
    spectrum = PatchSpectrum((Patch("a", 2, np.array([3.0, 1.0])), Patch("b", 2, np.array([2.0, 0.5]))))
    path = tmp_path / "full.csv"
    write_spectrum(spectrum, path)

    assert path.read_text().splitlines()[0] == "patch,n_k,mu_1,mu_2"
    assert list(read_spectrum(path).patches[1].eigenvalues) == [2.0, 0.5]


def test_hand_written_spectrum(tmp_path):
    path = tmp_path / "hand.csv"
    path.write_text("patch,n_k,lambda\nr0c0,192,18.7\nr0c1,192,44.4\n")

    spectrum = read_spectrum(path)
    report = ky_gaussian(make_linear(100, 1e-4, 0.02), spectrum)

    assert spectrum.lambdas() == {"r0c0": 18.7, "r0c1": 44.4}
    assert report.n == 384


@pytest.mark.parametrize(
    ("text", "line", "column"),
    [
        ("id,n,lambda\n", 1, None),
        ("patch,n_k,lambda\nr0c0,x,1.0\n", 2, 2),
        ("patch,n_k,lambda\nr0c0,4,1.0\nr0c1,4,big\n", 3, 3),
        ("patch,n_k,mu_1,mu_2\nr0c0,2,1.0\n", 2, None),
    ]
)
def test_malformed_spectrum(tmp_path, text, line, column):
    path = tmp_path / "bad.csv"
    path.write_text(text)

    with pytest.raises(FormatError) as info:
        read_spectrum(path)

    assert info.value.line == line
    assert info.value.column == column


@pytest.mark.dataset
@pytest.mark.slow
def test_cifar10_patch_spectrum(cifar_dir):
    files = sorted(cifar_dir.glob("data_batch_*.bin"))
    source = read_cifar10(files)

    assert source.count == 50_000

    spectrum = patch_covariances(source, 8)
    lams = [p.lam for p in spectrum.patches]

    assert len(lams) == 16
    assert min(lams) == pytest.approx(18.7, abs=0.5)
    assert max(lams) == pytest.approx(44.4, abs=0.5)
