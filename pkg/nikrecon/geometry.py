"""
Golden-angle radial trajectories and the k-space coordinate convention.

Coordinates are normalised to [-1, 1): a Cartesian grid of size `n` has
spacing `2 / n` and its sample `q` sits at `(q - n // 2) * 2 / n`.
"""
import dataclasses
import math

import numpy as np

from nikrecon.utils import ConfigError

GOLDEN_RATIO = (1 + math.sqrt(5)) / 2

# 180° / φ ≈ 111.2461°
GOLDEN_ANGLE = math.pi / GOLDEN_RATIO


@dataclasses.dataclass(frozen=True)
class Trajectory:
    n_spokes: int
    n_fe: int
    angles: np.ndarray  # (n_spokes,) radians in [0, π)
    coords: np.ndarray  # (n_spokes, n_fe, 2) as (kx, ky)
    times: np.ndarray  # (n_spokes,) in units of spoke index

    @property
    def n_samples(self) -> int:
        return self.n_spokes * self.n_fe

    @property
    def radii(self) -> np.ndarray:
        return spoke_radii(self.n_fe)

    def flat_coords(self) -> np.ndarray:
        """
        Returns the (n_samples, 2) coordinate list in spoke-major order.
        """
        return self.coords.reshape(-1, 2)

    def subset(self, spokes) -> "Trajectory":
        spokes = np.asarray(spokes, dtype=int)
        return Trajectory(
            n_spokes=len(spokes),
            n_fe=self.n_fe,
            angles=self.angles[spokes],
            coords=self.coords[spokes],
            times=self.times[spokes],
        )


def spoke_radii(n_fe: int) -> np.ndarray:
    """
    Signed sample radii along a full-diameter spoke, from -1 to 1 - 2/n_fe.
    """
    half = n_fe // 2
    return (np.arange(n_fe) - half) / half


def cartesian_axis(n: int, pad: int = 0) -> np.ndarray:
    """
    Cartesian k-space positions of a grid axis of size `n`, optionally
    extended by `pad` cells on both sides.
    """
    return (np.arange(-pad, n + pad) - n // 2) * (2.0 / n)


def golden_angle_trajectory(n_spokes: int, n_fe: int) -> Trajectory:
    """
    Creates a full-spoke golden-angle radial trajectory.

    Arguments:
        n_spokes (int): number of spokes, at least 1.
        n_fe (int): samples per spoke, even and at least 2.

    Returns:
        Trajectory: spoke `i` has angle `(i * GOLDEN_ANGLE) mod π` and its
            sample `j` sits at radius `(j - n_fe/2) / (n_fe/2)`.
    """
    if n_spokes < 1:
        raise ConfigError(f"n_spokes must be at least 1, got {n_spokes}")

    if n_fe < 2 or n_fe % 2:
        raise ConfigError(f"n_fe must be even and at least 2, got {n_fe}")

    angles = np.mod(np.arange(n_spokes) * GOLDEN_ANGLE, math.pi)
    radii = spoke_radii(n_fe)

    direction = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    coords = radii[None, :, None] * direction[:, None, :]

    # the center sample must be exactly zero, not a rounded product
    coords[:, n_fe // 2, :] = 0.0

    return Trajectory(
        n_spokes=n_spokes,
        n_fe=n_fe,
        angles=angles,
        coords=coords,
        times=np.arange(n_spokes, dtype=float),
    )
