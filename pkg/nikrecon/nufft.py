"""
Exact non-uniform discrete Fourier transforms and centered Cartesian FFTs.

Conventions shared by every module:

- image pixel `(p, q)` of an `H x W` grid sits at `(y, x) = (p - H//2, q - W//2)`;
- k-space coordinates `(kx, ky)` are normalised to [-1, 1);
- the forward transform is `sum_p image(p) exp(-i pi (kx x_p + ky y_p))`,
  unnormalised, so a centred unit impulse transforms to 1 everywhere;
- `fft2c`/`ifft2c` are unitary, so on grid coordinates
  `nudft_forward(x) == sqrt(H W) * fft2c(x)`.

Acquired samples are scaled by `pixel_area` so they approximate the
continuous Fourier transform of an object living in [-1, 1]^2.
"""
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Tuple

import numpy as np

from nikrecon import config
from nikrecon.geometry import Trajectory
from nikrecon.utils import ConfigError, DataError

LOG = logging.getLogger(__name__)

CHUNK_SIZE = 4096


@dataclasses.dataclass(frozen=True)
class DensityWeights:
    values: np.ndarray

    def __post_init__(self):
        if np.any(self.values <= 0):
            raise DataError("density weights must be strictly positive")

    def __len__(self):
        return len(self.values)


def pixel_area(shape: Tuple[int, int]) -> float:
    h, w = shape
    return 4.0 / (h * w)


def unitary_scale(shape: Tuple[int, int]) -> float:
    """
    Factor converting acquired (continuous-transform) k-space values to the
    scale of `fft2c` of the same image.
    """
    h, w = shape
    return math.sqrt(h * w) / 4.0


def adjoint_scale(shape: Tuple[int, int]) -> float:
    """
    Factor turning a density-weighted adjoint of acquired samples back into
    image intensities (inverse transform of the unit-disk coverage).
    """
    h, w = shape
    return math.pi * h * w / 16.0


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _check_grid(shape):
    if not all(_is_power_of_two(n) for n in shape[-2:]):
        raise ConfigError(f"grid size must be a power of two, got {shape[-2:]}")


def fft2c(image: np.ndarray) -> np.ndarray:
    """
    Centered unitary 2D FFT over the last two axes.
    """
    _check_grid(image.shape)
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(image, axes=axes), norm="ortho"), axes=axes
    )


def ifft2c(kspace: np.ndarray) -> np.ndarray:
    """
    Centered unitary inverse 2D FFT over the last two axes.
    """
    _check_grid(kspace.shape)
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(kspace, axes=axes), norm="ortho"), axes=axes
    )


def _check_coords(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if coords.size and np.abs(coords).max() > 1.0:
        raise DataError("k-space coordinates must lie in [-1, 1]")
    return coords


def _phase_factors(coords: np.ndarray, shape):
    h, w = shape
    y = np.arange(h) - h // 2
    x = np.arange(w) - w // 2
    ex = np.exp(-1j * np.pi * np.outer(coords[:, 0], x))
    ey = np.exp(-1j * np.pi * np.outer(coords[:, 1], y))
    return ex, ey


def _chunks(n: int):
    return [slice(i, min(i + CHUNK_SIZE, n)) for i in range(0, n, CHUNK_SIZE)]


def _map(fn, items):
    if config.THREADS <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    with ThreadPoolExecutor(max_workers=config.THREADS) as pool:
        return list(pool.map(fn, items))


def nudft_forward(image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """
    Evaluates the exact Fourier sum of `image` at non-Cartesian coordinates.

    Arguments:
        image (np.ndarray): complex image `(H, W)` or stack `(C, H, W)`.
        coords (np.ndarray): `(M, 2)` coordinates `(kx, ky)`.

    Returns:
        np.ndarray: `(M,)` or `(C, M)` complex samples.
    """
    coords = _check_coords(coords)
    image = np.asarray(image, dtype=complex)
    stacked = image.ndim == 3
    images = image if stacked else image[None]
    shape = images.shape[-2:]

    def _forward(chunk):
        ex, ey = _phase_factors(coords[chunk], shape)
        # separable sum: rows with `ey`, then columns with `ex`
        rows = np.matmul(ey, images)
        return (rows * ex[None]).sum(axis=-1)

    parts = _map(_forward, _chunks(len(coords)))
    values = (
        np.concatenate(parts, axis=-1)
        if parts
        else np.zeros((len(images), 0), dtype=complex)
    )
    return values if stacked else values[0]


def nudft_adjoint(
    values: np.ndarray,
    coords: np.ndarray,
    weights: Optional[DensityWeights],
    height: int,
    width: int,
) -> np.ndarray:
    """
    Adjoint of `nudft_forward`, optionally weighting every sample.

    Arguments:
        values (np.ndarray): `(M,)` or `(C, M)` complex samples.
        coords (np.ndarray): `(M, 2)` coordinates `(kx, ky)`.
        weights (DensityWeights or None): per-sample weights, `None` for 1.
        height (int): image rows.
        width (int): image columns.

    Returns:
        np.ndarray: `(H, W)` or `(C, H, W)` complex image.
    """
    coords = _check_coords(coords)
    values = np.asarray(values, dtype=complex)
    stacked = values.ndim == 2
    values = values if stacked else values[None]

    if values.shape[-1] != len(coords):
        raise DataError(
            f"got {values.shape[-1]} values for {len(coords)} coordinates"
        )

    if weights is not None:
        if len(weights) != len(coords):
            raise DataError(
                f"got {len(weights)} weights for {len(coords)} coordinates"
            )
        values = values * weights.values[None]

    shape = (height, width)

    def _adjoint(chunk):
        ex, ey = _phase_factors(coords[chunk], shape)
        weighted = ey.conj().T[None] * values[:, None, chunk]
        return np.matmul(weighted, ex.conj())

    image = np.zeros((len(values), height, width), dtype=complex)
    # summed in chunk order so the result does not depend on thread scheduling
    for part in _map(_adjoint, _chunks(len(coords))):
        image += part

    return image if stacked else image[0]


def ramp_weights(coords: np.ndarray, n_spokes: int, n_fe: int) -> DensityWeights:
    """
    Ramp density compensation for full-diameter radial samples.

    Every sample gets the k-space area it represents divided by the area of
    the unit disk; the center sample of each spoke gets the area of the
    central cell shared between all spokes.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    dr = 2.0 / n_fe
    radius = np.hypot(coords[:, 0], coords[:, 1])
    # equal radii must give bit-equal weights whatever the spoke angle
    radius = np.round(radius / dr) * dr

    weights = dr * radius / n_spokes
    weights[radius == 0] = dr * dr / (4 * n_spokes)

    return DensityWeights(values=weights)


def radial_density_weights(traj: Trajectory) -> DensityWeights:
    return ramp_weights(traj.flat_coords(), traj.n_spokes, traj.n_fe)


def density_compensated_adjoint(
    values: np.ndarray,
    coords: np.ndarray,
    weights: DensityWeights,
    height: int,
    width: int,
) -> np.ndarray:
    """
    Gridding-free inverse NUFFT of acquired samples.
    """
    image = nudft_adjoint(values, coords, weights, height, width)
    return adjoint_scale((height, width)) * image
