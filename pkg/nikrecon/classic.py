"""
Baseline reconstructions: gated inverse NUFFT and XD-GRASP.

XD-GRASP minimizes, jointly over all motion states `x = (x_1 ... x_n)`,

    sum_b || E_b x_b - y_b ||^2 + l_s TV_space(x) + l_t TV_time(x)

where `E_b` samples the coil images of state `b` on that bin's spokes.
The data term is density compensated: `E_b` and `y_b` both carry the
square root of the ramp weights, scaled so that `E_b^H y_b` is exactly the
`inufft_recon` image of the bin.
"""
import csv
import dataclasses
import logging
import math
import warnings
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from nikrecon import nufft
from nikrecon.simulator import CoilMaps, KSpaceDataset
from nikrecon.utils import ConfigError, DataError, DivergenceError

LOG = logging.getLogger(__name__)


class LineSearchWarning(UserWarning):
    pass


class IterationRecord(NamedTuple):
    iteration: int
    objective: float
    step: float
    backtracks: int


@dataclasses.dataclass(frozen=True)
class DynamicImage:
    images: np.ndarray  # (n_d, H, W) complex
    nav_ranges: Tuple[Tuple[float, float], ...] = ()
    method: str = ""
    config_hash: str = ""
    history: Tuple[IterationRecord, ...] = ()
    line_search_failed: bool = False

    def __post_init__(self):
        if self.images.ndim != 3 or len(self.images) < 1:
            raise DataError(f"expected (n_d, H, W) images, got {self.images.shape}")

        if not np.all(np.isfinite(self.images)):
            raise DivergenceError(f"{self.method or 'reconstruction'} is not finite")

    @property
    def n_states(self) -> int:
        return len(self.images)


@dataclasses.dataclass(frozen=True)
class XDGraspConfig:
    lambda_spatial: float = 0.01
    lambda_temporal: float = 0.1
    n_iter: int = 40
    tv_smoothing: float = 1e-7
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    restart: int = 10
    # None: the factors are relative to max |inufft_recon|
    regularization_scale: Optional[float] = None

    def __post_init__(self):
        if self.lambda_spatial < 0 or self.lambda_temporal < 0:
            raise ConfigError("xdgrasp regularization weights must be non-negative")

        if self.tv_smoothing <= 0:
            raise ConfigError("xdgrasp tv_smoothing must be positive")

        if self.n_iter < 1:
            raise ConfigError("xdgrasp n_iter must be at least 1")

        if not 0 < self.backtrack < 1 or not 0 < self.armijo < 1:
            raise ConfigError("xdgrasp line-search parameters must lie in (0, 1)")


def nav_ranges(bins: Sequence[KSpaceDataset]) -> Tuple[Tuple[float, float], ...]:
    ranges = []
    for b in bins:
        nav = b.spoke_nav
        ranges.append((float(nav.min()), float(nav.max())))
    return tuple(ranges)


def _check_grid(bins: Sequence[KSpaceDataset], coils: CoilMaps):
    if not bins:
        raise DataError("no motion bins to reconstruct")

    for b in bins:
        if b.shape != tuple(coils.shape) or b.meta.n_coils != coils.n_coils:
            raise DataError(
                f"bin of {b.meta.n_coils} coils on {b.shape} does not match "
                f"{coils.n_coils} coil maps on {tuple(coils.shape)}"
            )


def bin_weights(ds: KSpaceDataset) -> nufft.DensityWeights:
    return nufft.ramp_weights(ds.kspace_coords(), ds.meta.n_spokes, ds.meta.n_fe)


def combine_coils(coil_images: np.ndarray, coils: CoilMaps) -> np.ndarray:
    return (np.conj(coils.maps) * coil_images).sum(axis=0)


def inufft_recon(bins: Sequence[KSpaceDataset], coils: CoilMaps) -> DynamicImage:
    """
    Gated reconstruction: density-compensated adjoint of every bin, combined
    with the conjugate coil maps.
    """
    _check_grid(bins, coils)
    height, width = coils.shape

    images = []
    for b in bins:
        coil_images = nufft.density_compensated_adjoint(
            b.values.T, b.kspace_coords(), bin_weights(b), height, width
        )
        images.append(combine_coils(coil_images, coils))

    return DynamicImage(
        images=np.stack(images), nav_ranges=nav_ranges(bins), method="inufft"
    )


def _diff(x: np.ndarray, axis: int) -> np.ndarray:
    # forward differences: circular over motion states, replicate in space
    if axis == 0:
        return np.roll(x, -1, axis=0) - x

    d = np.zeros_like(x)
    inner = [slice(None)] * x.ndim
    inner[axis] = slice(0, -1)
    d[tuple(inner)] = np.diff(x, axis=axis)
    return d


def _diff_adjoint(v: np.ndarray, axis: int) -> np.ndarray:
    if axis == 0:
        return np.roll(v, 1, axis=0) - v

    v = v.copy()
    last = [slice(None)] * v.ndim
    last[axis] = -1
    v[tuple(last)] = 0

    shifted = np.zeros_like(v)
    dst = [slice(None)] * v.ndim
    src = [slice(None)] * v.ndim
    dst[axis] = slice(1, None)
    src[axis] = slice(0, -1)
    shifted[tuple(dst)] = v[tuple(src)]
    return shifted - v


def _tv_from_diff(d: np.ndarray, mu: float) -> float:
    # offset by sqrt(mu) so a constant image costs nothing
    return float(np.sum(np.sqrt(np.abs(d) ** 2 + mu) - math.sqrt(mu)))


def tv_value(x: np.ndarray, mu: float, axes: Sequence[int] = (0, 1, 2)) -> float:
    """
    Smoothed total variation `sum sqrt(|D x|^2 + mu) - sqrt(mu)` of an image
    series `(n_d, H, W)` along `axes` (0 = motion state, 1/2 = space).
    """
    return sum(_tv_from_diff(_diff(x, axis), mu) for axis in axes)


def tv_grad(x: np.ndarray, mu: float, axes: Sequence[int] = (0, 1, 2)) -> np.ndarray:
    """
    Gradient of `tv_value` with respect to the real and imaginary parts of
    `x`, packed as a complex array.
    """
    if mu <= 0:
        raise ConfigError("tv smoothing must be positive")

    grad = np.zeros_like(x, dtype=complex)
    for axis in axes:
        d = _diff(x, axis)
        grad += _diff_adjoint(d / np.sqrt(np.abs(d) ** 2 + mu), axis)
    return grad


@dataclasses.dataclass
class _Bin:
    coords: np.ndarray
    sqrt_w: np.ndarray
    target: np.ndarray  # (n_c, M) weighted data


class XDGraspProblem:
    """
    The XD-GRASP objective for fixed data, with cached operator products.
    """

    def __init__(
        self,
        bins: Sequence[KSpaceDataset],
        coils: CoilMaps,
        cfg: XDGraspConfig,
        init: Optional[DynamicImage] = None,
    ):
        _check_grid(bins, coils)
        self.coils = coils
        self.cfg = cfg
        self.shape = tuple(coils.shape)

        # E = alpha sqrt(w) F S, y~ = beta sqrt(w) y with alpha beta = adjoint_scale
        # and alpha = beta pixel_area, so E^H y~ is the inufft image
        self.alpha = math.sqrt(math.pi) / 2
        self.beta = self.alpha / nufft.pixel_area(self.shape)

        self.bins = []
        for b in bins:
            sqrt_w = np.sqrt(bin_weights(b).values)
            self.bins.append(
                _Bin(
                    coords=b.kspace_coords(),
                    sqrt_w=sqrt_w,
                    target=self.beta * sqrt_w[None] * b.values.T.astype(complex),
                )
            )

        if cfg.regularization_scale is not None:
            scale = cfg.regularization_scale
        else:
            if init is None:
                init = inufft_recon(bins, coils)
            scale = float(np.abs(init.images).max())

        self.lambda_spatial = cfg.lambda_spatial * scale
        self.lambda_temporal = cfg.lambda_temporal * scale
        LOG.debug(
            f"xdgrasp weights: spatial={self.lambda_spatial:.4g}, "
            f"temporal={self.lambda_temporal:.4g}"
        )

    @property
    def n_states(self) -> int:
        return len(self.bins)

    def forward(self, x: np.ndarray) -> List[np.ndarray]:
        out = []
        for b, image in zip(self.bins, x):
            values = nufft.nudft_forward(self.coils.maps * image[None], b.coords)
            out.append(self.alpha * b.sqrt_w[None] * values)
        return out

    def adjoint(self, values: Sequence[np.ndarray]) -> np.ndarray:
        height, width = self.shape
        images = []
        for b, v in zip(self.bins, values):
            coil_images = nufft.nudft_adjoint(
                self.alpha * b.sqrt_w[None] * v, b.coords, None, height, width
            )
            images.append(combine_coils(coil_images, self.coils))
        return np.stack(images)

    def _weighted_axes(self):
        return [
            (axis, weight)
            for axis, weight in (
                (0, self.lambda_temporal),
                (1, self.lambda_spatial),
                (2, self.lambda_spatial),
            )
            if weight > 0
        ]

    def residual(self, ex: Sequence[np.ndarray]) -> List[np.ndarray]:
        return [e - b.target for e, b in zip(ex, self.bins)]

    def _value(self, residual, diffs) -> float:
        mu = self.cfg.tv_smoothing
        value = sum(float(np.vdot(r, r).real) for r in residual)
        for (axis, weight), d in zip(self._weighted_axes(), diffs):
            value += weight * _tv_from_diff(d, mu)
        return value

    def objective(self, x: np.ndarray) -> float:
        diffs = [_diff(x, axis) for axis, _ in self._weighted_axes()]
        return self._value(self.residual(self.forward(x)), diffs)

    def gradient(self, x: np.ndarray, residual=None) -> np.ndarray:
        if residual is None:
            residual = self.residual(self.forward(x))

        grad = 2 * self.adjoint(residual)
        for axis, weight in self._weighted_axes():
            grad += weight * tv_grad(x, self.cfg.tv_smoothing, axes=(axis,))
        return grad


def objective_value(
    bins: Sequence[KSpaceDataset],
    coils: CoilMaps,
    x: DynamicImage,
    cfg: XDGraspConfig,
) -> float:
    return XDGraspProblem(bins, coils, cfg).objective(x.images)


def _real_dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a, b).real)


def xdgrasp_recon(
    bins: Sequence[KSpaceDataset],
    coils: CoilMaps,
    cfg: XDGraspConfig,
    init: Optional[DynamicImage] = None,
) -> DynamicImage:
    """
    Motion-resolved reconstruction by nonlinear conjugate gradient.

    Arguments:
        bins (list): one dataset per motion state, end-exhale first.
        coils (CoilMaps): coil sensitivities.
        cfg (XDGraspConfig): weights and solver settings.
        init (DynamicImage): starting point, `inufft_recon(bins)` by default.

    Returns:
        DynamicImage: the best iterate; `history` holds the objective after
            every iteration, starting with the initial value.
    """
    if init is None:
        init = inufft_recon(bins, coils)

    problem = XDGraspProblem(bins, coils, cfg, init=init)
    axes = problem._weighted_axes()
    mu = cfg.tv_smoothing

    x = init.images.astype(complex)
    ex = problem.forward(x)
    residual = problem.residual(ex)
    phi_x = [_diff(x, axis) for axis, _ in axes]
    value = problem._value(residual, phi_x)
    grad = problem.gradient(x, residual)
    direction = -grad

    history = [IterationRecord(0, value, 0.0, 0)]
    failed = False

    for iteration in range(1, cfg.n_iter + 1):
        slope = _real_dot(grad, direction)
        if slope >= 0:
            direction = -grad
            slope = _real_dot(grad, direction)

        if slope == 0:
            LOG.info(f"xdgrasp converged at iteration {iteration - 1}")
            break

        ed = problem.forward(direction)
        phi_d = [_diff(direction, axis) for axis, _ in axes]

        # start from the exact minimizer of the data term along the direction
        curvature = sum(_real_dot(e, e) for e in ed)
        step = 1.0
        if curvature > 0:
            step = -sum(_real_dot(r, e) for r, e in zip(residual, ed)) / curvature
            if not step > 0:
                step = 1.0

        for backtracks in range(cfg.max_backtracks + 1):
            trial_residual = [r + step * e for r, e in zip(residual, ed)]
            trial_phi = [p + step * d for p, d in zip(phi_x, phi_d)]
            trial = problem._value(trial_residual, trial_phi)

            if not math.isfinite(trial):
                raise DivergenceError("xdgrasp objective is not finite")

            if trial <= value + cfg.armijo * step * slope:
                break

            step *= cfg.backtrack
        else:
            failed = True
            message = f"xdgrasp line search failed at iteration {iteration}"
            LOG.warning(message)
            warnings.warn(message, LineSearchWarning)
            break

        x = x + step * direction
        residual = trial_residual
        phi_x = [_diff(x, axis) for axis, _ in axes]
        value = trial
        history.append(IterationRecord(iteration, value, step, backtracks))

        new_grad = problem.gradient(x, residual)
        if iteration % cfg.restart == 0:
            direction = -new_grad
        else:
            fletcher_reeves = _real_dot(new_grad, new_grad) / _real_dot(grad, grad)
            direction = -new_grad + fletcher_reeves * direction
        grad = new_grad

        LOG.debug(f"xdgrasp iteration {iteration}: objective {value:.6g}")

    # every accepted step decreases the objective, so the last iterate is the best
    LOG.info(f"xdgrasp finished after {len(history) - 1} iterations: {value:.6g}")
    return DynamicImage(
        images=x,
        nav_ranges=nav_ranges(bins),
        method="xdgrasp",
        history=tuple(history),
        line_search_failed=failed,
    )


def write_objective_csv(history: Sequence[IterationRecord], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(IterationRecord._fields)
        for record in history:
            writer.writerow(
                [record.iteration, repr(record.objective), repr(record.step), record.backtracks]
            )
