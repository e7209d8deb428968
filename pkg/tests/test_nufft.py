from unittest import mock

import numpy as np
import pytest

from nikrecon import geometry, nufft
from nikrecon.utils import ConfigError, DataError


def _random_image(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _grid_coords(h, w):
    ky, kx = np.meshgrid(
        geometry.cartesian_axis(h), geometry.cartesian_axis(w), indexing="ij"
    )
    return np.stack([kx.ravel(), ky.ravel()], axis=-1)


@pytest.mark.parametrize("seed", range(20))
def test_adjointness(seed):
    """
    <A x, y> == <x, A^H y> for random images and coordinates.
    """
    rng = np.random.default_rng(seed)
    x = _random_image(rng, (16, 16))
    coords = rng.uniform(-1, 1, size=(300, 2))
    y = _random_image(rng, 300)

    lhs = np.vdot(nufft.nudft_forward(x, coords), y)
    rhs = np.vdot(x, nufft.nudft_adjoint(y, coords, None, 16, 16))

    assert abs(lhs - rhs) / abs(lhs) < 1e-10


def test_on_grid_matches_centered_fft():
    rng = np.random.default_rng(1)
    x = _random_image(rng, (16, 8))

    values = nufft.nudft_forward(x, _grid_coords(16, 8)).reshape(16, 8)
    expected = np.sqrt(16 * 8) * nufft.fft2c(x)

    assert np.linalg.norm(values - expected) / np.linalg.norm(expected) < 1e-9


def test_centered_impulse_is_flat():
    x = np.zeros((8, 8), dtype=complex)
    x[4, 4] = 1
    coords = np.random.default_rng(0).uniform(-1, 1, size=(50, 2))

    np.testing.assert_allclose(nufft.nudft_forward(x, coords), np.ones(50))


def test_coil_stack():
    rng = np.random.default_rng(2)
    x = _random_image(rng, (3, 8, 8))
    coords = rng.uniform(-1, 1, size=(20, 2))

    values = nufft.nudft_forward(x, coords)

    assert values.shape == (3, 20)
    np.testing.assert_allclose(values[1], nufft.nudft_forward(x[1], coords))
    assert nufft.nudft_adjoint(values, coords, None, 8, 8).shape == (3, 8, 8)


def test_result_does_not_depend_on_threads():
    rng = np.random.default_rng(3)
    x = _random_image(rng, (8, 8))
    coords = rng.uniform(-1, 1, size=(100, 2))
    y = _random_image(rng, 100)

    with mock.patch.object(nufft, "CHUNK_SIZE", 16):
        with mock.patch("nikrecon.config.THREADS", 1):
            forward_serial = nufft.nudft_forward(x, coords)
            adjoint_serial = nufft.nudft_adjoint(y, coords, None, 8, 8)
        with mock.patch("nikrecon.config.THREADS", 4):
            forward_threaded = nufft.nudft_forward(x, coords)
            adjoint_threaded = nufft.nudft_adjoint(y, coords, None, 8, 8)

    np.testing.assert_array_equal(forward_serial, forward_threaded)
    np.testing.assert_array_equal(adjoint_serial, adjoint_threaded)


def test_fft_roundtrip():
    x = _random_image(np.random.default_rng(4), (8, 16))
    np.testing.assert_allclose(nufft.ifft2c(nufft.fft2c(x)), x, atol=1e-12)


def test_fft_needs_power_of_two():
    with pytest.raises(ConfigError):
        nufft.fft2c(np.zeros((6, 8)))


def test_coordinates_outside_unit_square():
    with pytest.raises(DataError):
        nufft.nudft_forward(np.zeros((4, 4)), np.array([[1.5, 0.0]]))


def test_adjoint_size_mismatch():
    with pytest.raises(DataError):
        nufft.nudft_adjoint(np.zeros(3), np.zeros((4, 2)), None, 4, 4)

    with pytest.raises(DataError):
        nufft.nudft_adjoint(
            np.zeros(4),
            np.zeros((4, 2)),
            nufft.DensityWeights(values=np.ones(3)),
            4,
            4,
        )


def test_ramp_weights():
    """
    Off-centre weights add up to one over all spokes; every centre sample
    gets a quarter of the central cell.
    """
    traj = geometry.golden_angle_trajectory(7, 16)
    weights = nufft.radial_density_weights(traj).values.reshape(7, 16)

    dr = 2 / 16
    np.testing.assert_allclose(weights[:, 8], dr * dr / (4 * 7))
    np.testing.assert_allclose(np.delete(weights, 8, axis=1).sum(), 1.0)
    np.testing.assert_allclose(weights[:, 0], dr / 7)
    # equal radii have equal weights whatever the angle
    assert len(np.unique(weights[:, 3])) == 1


def test_density_weights_must_be_positive():
    with pytest.raises(DataError):
        nufft.DensityWeights(values=np.array([1.0, 0.0]))


def test_scales():
    assert nufft.pixel_area((16, 16)) == pytest.approx(4 / 256)
    assert nufft.unitary_scale((16, 16)) == pytest.approx(4.0)
    assert nufft.adjoint_scale((16, 16)) == pytest.approx(np.pi * 16)
