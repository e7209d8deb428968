"""
Synthetic free-breathing acquisitions: ellipse phantoms with respiratory
motion, analytic coil maps and radial multi-coil k-space.
"""
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.special

from nikrecon import config, nufft
from nikrecon.geometry import Trajectory
from nikrecon.utils import ConfigError, DataError

LOG = logging.getLogger(__name__)

SUPERSAMPLING = 2


@dataclasses.dataclass(frozen=True)
class Ellipse:
    center: Tuple[float, float]  # (cx, cy), normalised image units
    axes: Tuple[float, float]  # (a, b) semi-axes along the rotated x/y
    angle: float = 0.0  # radians
    amplitude: complex = 1.0
    translation: float = 0.0  # y shift per unit of nav
    scaling: float = 0.0  # relative axis growth per unit of nav

    def at(self, nav: float) -> "Ellipse":
        """
        Returns the ellipse displaced to motion state `nav`.
        """
        cx, cy = self.center
        a, b = self.axes
        grow = 1.0 + self.scaling * nav
        return dataclasses.replace(
            self,
            center=(cx, cy + self.translation * nav),
            axes=(a * grow, b * grow),
            translation=0.0,
            scaling=0.0,
        )


@dataclasses.dataclass(frozen=True)
class EllipsePhantom:
    ellipses: Tuple[Ellipse, ...] = ()

    def __post_init__(self):
        for i, ellipse in enumerate(self.ellipses):
            if min(ellipse.axes) <= 0:
                raise ConfigError(f"ellipse {i}: semi-axes must be positive")

            for nav in (-1.0, 1.0):
                moved = ellipse.at(nav)
                reach = math.hypot(*moved.center) + max(moved.axes)
                if reach > 1.0:
                    raise ConfigError(
                        f"ellipse {i} leaves the field of view at nav={nav:+.0f}"
                    )

    def scaled(self, factor: complex) -> "EllipsePhantom":
        return EllipsePhantom(
            tuple(
                dataclasses.replace(e, amplitude=e.amplitude * factor)
                for e in self.ellipses
            )
        )


@dataclasses.dataclass(frozen=True)
class CoilMaps:
    maps: np.ndarray  # (n_c, H, W) complex

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.maps.shape[1:]


@dataclasses.dataclass(frozen=True)
class MotionModel:
    amplitude: float = 1.0
    period: float = 60.0  # spokes
    phase: float = 0.0  # radians
    drift: float = 0.0  # nav units per spoke

    def __call__(self, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        nav = self.amplitude * np.sin(2 * np.pi * times / self.period + self.phase)
        return np.clip(nav + self.drift * times, -1.0, 1.0)


@dataclasses.dataclass(frozen=True)
class DatasetMeta:
    n_spokes: int
    n_fe: int
    n_coils: int
    height: int
    width: int
    noise_std: float = 0.0
    provenance: str = "simulated"
    true_nav: Optional[np.ndarray] = None  # (n_spokes,)
    spoke_ids: Optional[np.ndarray] = None  # (n_spokes,) index in the acquisition


@dataclasses.dataclass(frozen=True)
class KSpaceDataset:
    coords: np.ndarray  # (N, 3) rows (nav, kx, ky)
    values: np.ndarray  # (N, n_c) complex64
    meta: DatasetMeta
    coils: Optional[CoilMaps] = None

    def __post_init__(self):
        meta = self.meta
        n = meta.n_spokes * meta.n_fe
        if self.coords.shape != (n, 3):
            raise DataError(f"expected coords of shape {(n, 3)}, got {self.coords.shape}")

        if self.values.shape != (n, meta.n_coils):
            raise DataError(
                f"expected values of shape {(n, meta.n_coils)}, got {self.values.shape}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.meta.height, self.meta.width

    @property
    def spoke_ids(self) -> np.ndarray:
        if self.meta.spoke_ids is None:
            return np.arange(self.meta.n_spokes)
        return self.meta.spoke_ids

    @property
    def spoke_nav(self) -> np.ndarray:
        """
        Navigator value of every spoke (samples of a spoke share one value).
        """
        return self.coords[:: self.meta.n_fe, 0]

    def kspace_coords(self) -> np.ndarray:
        return self.coords[:, 1:]

    def spokes(self, spokes: Sequence[int]) -> "KSpaceDataset":
        """
        Returns the dataset restricted to the given spoke positions.
        """
        spokes = np.asarray(spokes, dtype=int)
        n_fe = self.meta.n_fe
        rows = (spokes[:, None] * n_fe + np.arange(n_fe)[None]).ravel()
        true_nav = self.meta.true_nav
        meta = dataclasses.replace(
            self.meta,
            n_spokes=len(spokes),
            true_nav=None if true_nav is None else true_nav[spokes],
            spoke_ids=self.spoke_ids[spokes],
        )
        return KSpaceDataset(
            coords=self.coords[rows],
            values=self.values[rows],
            meta=meta,
            coils=self.coils,
        )


def default_phantom() -> EllipsePhantom:
    """
    Abdominal-like phantom: body outline, a bright liver-like organ moving
    feet-head, two small moving structures and a static spine.
    """
    return EllipsePhantom(
        (
            Ellipse(center=(0.0, 0.0), axes=(0.78, 0.6), amplitude=0.3, scaling=0.02),
            Ellipse(
                center=(-0.22, 0.12),
                axes=(0.34, 0.26),
                angle=0.35,
                amplitude=0.9,
                translation=0.14,
            ),
            Ellipse(
                center=(0.34, -0.05),
                axes=(0.1, 0.14),
                angle=-0.3,
                amplitude=0.6,
                translation=0.1,
            ),
            Ellipse(center=(0.1, 0.25), axes=(0.05, 0.05), amplitude=1.0, translation=0.14),
            Ellipse(center=(0.0, -0.45), axes=(0.09, 0.07), amplitude=0.7),
        )
    )


def _pixel_grid(height: int, width: int, supersampling: int):
    # sub-pixel centres in normalised units; pixel q spans [q - W/2 - 1/2, q - W/2 + 1/2)
    offsets = (np.arange(supersampling) + 0.5) / supersampling - 0.5
    y = ((np.arange(height) - height // 2)[:, None] + offsets[None]).ravel() / (
        height / 2
    )
    x = ((np.arange(width) - width // 2)[:, None] + offsets[None]).ravel() / (width / 2)
    return np.meshgrid(y, x, indexing="ij")


def phantom_image(
    phantom: EllipsePhantom, nav: float, height: int, width: int
) -> np.ndarray:
    """
    Rasterizes the phantom at motion state `nav`.

    Arguments:
        phantom (EllipsePhantom): the phantom.
        nav (float): motion state in [-1, 1].
        height (int): image rows, at least 8.
        width (int): image columns, at least 8.

    Returns:
        np.ndarray: complex image `(height, width)`; overlapping ellipses add.
    """
    if height < 8 or width < 8:
        raise ConfigError(f"image size must be at least 8x8, got {height}x{width}")

    s = SUPERSAMPLING
    yy, xx = _pixel_grid(height, width, s)
    fine = np.zeros(yy.shape, dtype=complex)

    for ellipse in phantom.ellipses:
        moved = ellipse.at(nav)
        cx, cy = moved.center
        a, b = moved.axes
        cos, sin = math.cos(moved.angle), math.sin(moved.angle)
        u = (xx - cx) * cos + (yy - cy) * sin
        v = -(xx - cx) * sin + (yy - cy) * cos
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        fine[inside] += moved.amplitude

    return fine.reshape(height, s, width, s).mean(axis=(1, 3))


def ground_truth_states(
    phantom: EllipsePhantom, navs: Sequence[float], height: int, width: int
) -> np.ndarray:
    return np.stack([phantom_image(phantom, nav, height, width) for nav in navs])


def _jinc(rho: np.ndarray) -> np.ndarray:
    # 2 J1(rho) / rho, with its limit 1 at rho = 0
    rho = np.asarray(rho, dtype=float)
    out = np.ones_like(rho)
    nonzero = np.abs(rho) > 1e-12
    out[nonzero] = 2 * scipy.special.j1(rho[nonzero]) / rho[nonzero]
    return out


def analytic_ellipse_kspace(
    ellipse: Ellipse, kx, ky, nav: float, shape: Tuple[int, int]
) -> np.ndarray:
    """
    Exact continuous Fourier transform of a moving ellipse indicator.

    The frequency scale matches `nufft`: a coordinate `k` of an `H x W`
    grid is the angular frequency `pi * (W/2) * kx` (resp. `H/2`, `ky`) in
    normalised image units, so the result equals
    `pixel_area * nudft_forward(image)` up to rasterization error.
    """
    height, width = shape
    moved = ellipse.at(nav)
    wx = np.pi * (width / 2) * np.asarray(kx, dtype=float)
    wy = np.pi * (height / 2) * np.asarray(ky, dtype=float)

    cos, sin = math.cos(moved.angle), math.sin(moved.angle)
    a, b = moved.axes
    # frequency seen in the ellipse's own frame, scaled by its semi-axes
    wu = a * (wx * cos + wy * sin)
    wv = b * (-wx * sin + wy * cos)
    rho = np.hypot(wu, wv)

    cx, cy = moved.center
    shift = np.exp(-1j * (wx * cx + wy * cy))
    return moved.amplitude * np.pi * a * b * _jinc(rho) * shift


def coil_maps_analytic(n_coils: int, height: int, width: int) -> CoilMaps:
    """
    Smooth coil sensitivities: Gaussian lobes on a circle around the field of
    view with linear phase ramps, normalised to unit sum of squares.

    Coil 0 carries no phase ramp, so a single coil map is identically 1.
    """
    if n_coils < 1:
        raise ConfigError(f"n_coils must be at least 1, got {n_coils}")

    y = (np.arange(height) - height // 2) / (height / 2)
    x = (np.arange(width) - width // 2) / (width / 2)
    yy, xx = np.meshgrid(y, x, indexing="ij")

    width_lobe = 0.6
    maps = []
    for c in range(n_coils):
        theta = 2 * np.pi * c / n_coils
        px, py = 1.1 * math.cos(theta), 1.1 * math.sin(theta)
        magnitude = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * width_lobe**2))
        ramp = 0.5 * np.pi * (c / n_coils) * (xx * math.cos(theta) + yy * math.sin(theta))
        maps.append(magnitude * np.exp(1j * ramp))

    maps = np.stack(maps)
    maps /= np.sqrt((np.abs(maps) ** 2).sum(axis=0, keepdims=True))
    return CoilMaps(maps=maps)


def simulate_acquisition(
    phantom: EllipsePhantom,
    motion: MotionModel,
    coils: CoilMaps,
    traj: Trajectory,
    noise_std: float,
    seed: int,
) -> KSpaceDataset:
    """
    Simulates a quasi-static multi-coil radial acquisition.

    Each spoke sees the phantom frozen at `motion(times[i])`; samples are
    the exact transform of the coil-weighted raster image plus complex
    Gaussian noise of standard deviation `noise_std` drawn from a stream
    seeded by `(seed, spoke)`.

    Returns:
        KSpaceDataset: coordinates `(nav, kx, ky)` with the true navigator.
    """
    height, width = coils.shape
    if traj.n_fe != width or traj.n_fe != height:
        raise ConfigError(
            f"trajectory with n_fe={traj.n_fe} does not match a {height}x{width} coil grid"
        )

    navs = motion(traj.times)
    area = nufft.pixel_area((height, width))

    def _spoke(i: int) -> np.ndarray:
        image = phantom_image(phantom, navs[i], height, width)
        values = area * nufft.nudft_forward(coils.maps * image[None], traj.coords[i])
        values = values.T  # (n_fe, n_c)

        if noise_std > 0:
            rng = np.random.default_rng([seed, i])
            noise = rng.standard_normal(values.shape) + 1j * rng.standard_normal(
                values.shape
            )
            values = values + noise_std / math.sqrt(2) * noise

        return values

    LOG.info(
        f"Simulating {traj.n_spokes} spokes x {traj.n_fe} samples x {coils.n_coils} coils"
    )
    if config.THREADS > 1:
        with ThreadPoolExecutor(max_workers=config.THREADS) as pool:
            spokes: List[np.ndarray] = list(pool.map(_spoke, range(traj.n_spokes)))
    else:
        spokes = [_spoke(i) for i in range(traj.n_spokes)]

    coords = np.concatenate(
        [np.repeat(navs, traj.n_fe)[:, None], traj.flat_coords()], axis=1
    )
    meta = DatasetMeta(
        n_spokes=traj.n_spokes,
        n_fe=traj.n_fe,
        n_coils=coils.n_coils,
        height=height,
        width=width,
        noise_std=noise_std,
        provenance="simulated",
        true_nav=navs,
        spoke_ids=np.arange(traj.n_spokes),
    )
    return KSpaceDataset(
        coords=coords,
        values=np.concatenate(spokes).astype(np.complex64),
        meta=meta,
        coils=coils,
    )


def retrospective_undersample(ds: KSpaceDataset, factor: float) -> KSpaceDataset:
    """
    Keeps the first `ceil(n_spokes / factor)` spokes, as a shorter scan would.
    """
    if factor < 1:
        raise ConfigError(f"undersampling factor must be at least 1, got {factor}")

    keep = math.ceil(ds.meta.n_spokes / factor)
    return ds.spokes(np.arange(keep))


def single_ellipse_phantom() -> EllipsePhantom:
    """
    One static centered ellipse, the simplest object to fit.
    """
    return EllipsePhantom((Ellipse(center=(0.0, 0.0), axes=(0.5, 0.4), amplitude=1.0),))


PHANTOMS = {
    "default": default_phantom,
    "single": single_ellipse_phantom,
}


def center_magnitude(phantom: EllipsePhantom, coils: CoilMaps) -> float:
    """
    Mean over coils of the noiseless k=0 sample magnitude at nav=0.
    """
    height, width = coils.shape
    image = phantom_image(phantom, 0.0, height, width)
    dc = nufft.pixel_area((height, width)) * (coils.maps * image[None]).sum(axis=(1, 2))
    return float(np.abs(dc).mean())
