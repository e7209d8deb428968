"""
Informed correction of NIK predictions.

A stack of three complex 3x3 convolutions (valid padding, complex ReLU in
between) maps the 7x7 neighbourhood of NIK predictions around a k-space
location to a corrected multi-coil value. The kernel is calibrated on the
measured samples of the auto-calibration region (ACR) around the k-space
center, with NIK frozen.

The kernel works on values divided by the NIK `value_scale`, so its offsets
and the loss `eps` are relative to the largest training sample.
"""
import dataclasses
import logging
import math
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from nikrecon.nik import (
    NIKModel,
    TrainConfig,
    evaluate_grid,
    grid_coords,
    hdr_loss,
    nik_forward,
    warn_if_extrapolating,
)
from nikrecon.optim import Adam
from nikrecon.simulator import KSpaceDataset
from nikrecon.utils import ConfigError, DataError, DivergenceError

LOG = logging.getLogger(__name__)

PATCH = 7
HALF = PATCH // 2
PATCH_CHUNK = 512


class EmptyACRError(DataError):
    """
    Raised when no measured sample lies inside the calibration region.
    """


@dataclasses.dataclass(frozen=True)
class ACRSpec:
    radius: float = 0.4

    def __post_init__(self):
        if not 0 < self.radius <= 1:
            raise ConfigError(f"ACR radius must lie in (0, 1], got {self.radius}")

    def contains(self, kx, ky) -> np.ndarray:
        # strictly inside: a sample at distance exactly r is excluded
        return np.hypot(kx, ky) < self.radius


@dataclasses.dataclass(frozen=True)
class ICoConfig:
    acr: ACRSpec = ACRSpec()
    hidden_channels: Optional[int] = None  # defaults to 2 n_c
    offset: float = 4.0
    train: TrainConfig = TrainConfig(epochs=500)


@dataclasses.dataclass(frozen=True)
class ICoKernel:
    weights: Tuple[np.ndarray, ...]  # (out, in, 3, 3) complex per layer
    biases: Tuple[np.ndarray, ...]  # (out,) complex per layer

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ConfigError("an ICo kernel has exactly three layers")

        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 4 or w.shape[2:] != (3, 3):
                raise ConfigError(f"ICo layer {i} must have 3x3 kernels, got {w.shape}")

            if b.shape != (w.shape[0],):
                raise ConfigError(f"ICo layer {i} bias does not match {w.shape[0]} outputs")

        for i in range(2):
            if self.weights[i + 1].shape[1] != self.weights[i].shape[0]:
                raise ConfigError(f"ICo layers {i} and {i + 1} do not chain")

        if self.weights[0].shape[1] != self.weights[2].shape[0]:
            raise ConfigError("ICo input and output channel counts differ")

    @property
    def n_coils(self) -> int:
        return self.weights[0].shape[1]

    def parameters(self) -> List[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    @classmethod
    def from_parameters(cls, params) -> "ICoKernel":
        params = [np.asarray(p, dtype=complex) for p in params]
        return cls(weights=tuple(params[0::2]), biases=tuple(params[1::2]))


def identity_kernel(n_coils: int, hidden: Optional[int] = None, offset: float = 4.0) -> ICoKernel:
    """
    Kernel whose output equals the patch center as long as every real and
    imaginary part of the input exceeds `-offset`.
    """
    hidden = hidden or 2 * n_coils
    if hidden < n_coils:
        raise ConfigError(f"hidden channels ({hidden}) must be at least n_c ({n_coils})")

    plan = [(hidden, n_coils), (hidden, hidden), (n_coils, hidden)]
    weights = []
    for n_out, n_in in plan:
        w = np.zeros((n_out, n_in, 3, 3), dtype=complex)
        for c in range(n_coils):
            w[c, c, 1, 1] = 1.0
        weights.append(w)

    shift = offset * (1 + 1j)
    biases = [
        np.full(hidden, shift),
        np.zeros(hidden, dtype=complex),
        np.full(n_coils, -shift),
    ]
    return ICoKernel(weights=tuple(weights), biases=tuple(biases))


def crelu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z.real, 0) + 1j * np.maximum(z.imag, 0)


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    # valid cross-correlation over the last two axes of (..., in, H, W)
    windows = sliding_window_view(x, (3, 3), axis=(-2, -1))
    out = np.einsum("...ihwab,oiab->...ohw", windows, w) + b[:, None, None]
    return out, windows


def _conv_backward(grad: np.ndarray, windows: np.ndarray, w: np.ndarray):
    # grad convention: dL/dRe + i dL/dIm
    batched = grad.reshape((-1,) + grad.shape[-3:])
    flat_windows = windows.reshape((-1,) + windows.shape[-5:])
    dw = np.einsum("bohw,bihwac->oiac", batched, np.conj(flat_windows))
    db = batched.sum(axis=(0, 2, 3))

    pad = [(0, 0)] * (grad.ndim - 2) + [(2, 2), (2, 2)]
    padded = sliding_window_view(np.pad(grad, pad), (3, 3), axis=(-2, -1))
    dx = np.einsum("...ohwab,oiab->...ihw", padded, np.conj(w[:, :, ::-1, ::-1]))
    return dx, dw, db


class _Trace(NamedTuple):
    windows: List[np.ndarray]
    pre_activations: List[np.ndarray]


def _stack(kernel: ICoKernel, x: np.ndarray, keep: bool = False):
    windows, pre = [], []
    for i, (w, b) in enumerate(zip(kernel.weights, kernel.biases)):
        z, win = _conv(x, w, b)
        if keep:
            windows.append(win)
            pre.append(z)
        x = crelu(z) if i < 2 else z
    return x, _Trace(windows, pre)


def _stack_backward(kernel: ICoKernel, trace: _Trace, grad: np.ndarray):
    grads = []
    for i in reversed(range(3)):
        if i < 2:
            z = trace.pre_activations[i]
            grad = grad.real * (z.real > 0) + 1j * grad.imag * (z.imag > 0)
        dx, dw, db = _conv_backward(grad, trace.windows[i], kernel.weights[i])
        grads.extend([db, dw])
        grad = dx
    return grads[::-1]


def ico_forward(kernel: ICoKernel, patch: np.ndarray) -> np.ndarray:
    """
    Corrected `(n_c,)` value from a `(n_c, 7, 7)` neighbourhood.
    """
    if patch.shape != (kernel.n_coils, PATCH, PATCH):
        raise DataError(
            f"expected a ({kernel.n_coils}, {PATCH}, {PATCH}) patch, got {patch.shape}"
        )
    out, _ = _stack(kernel, np.asarray(patch, dtype=complex))
    return out[:, 0, 0]


def apply_kernel(kernel: ICoKernel, grid: np.ndarray) -> np.ndarray:
    """
    Runs the convolution stack over a whole `(n_c, H + 6, W + 6)` grid.
    """
    if grid.shape[-3] != kernel.n_coils:
        raise DataError(f"grid has {grid.shape[-3]} coils, kernel {kernel.n_coils}")
    out, _ = _stack(kernel, np.asarray(grid, dtype=complex))
    return out


class PatchCoords(NamedTuple):
    coords: np.ndarray  # (7, 7, 3), rows along ky
    outside: np.ndarray  # (7, 7) bool, outside [-1, 1)


def sample_patch_coords(v, n_fe: int) -> PatchCoords:
    """
    The 7x7 neighbourhood of `v = (nav, kx, ky)` with one Cartesian cell
    (`2 / n_fe`) between points.
    """
    nav, kx, ky = (float(c) for c in v)
    delta = 2.0 / n_fe
    offsets = (np.arange(PATCH) - HALF) * delta
    kyy, kxx = np.meshgrid(ky + offsets, kx + offsets, indexing="ij")
    coords = np.stack([np.full_like(kxx, nav), kxx, kyy], axis=-1)

    def _outside(k):
        return (k < -1.0) | (k >= 1.0)

    return PatchCoords(coords, _outside(kxx) | _outside(kyy))


def _patch_grid(coords: np.ndarray, n_fe: int) -> np.ndarray:
    # (M, 3) -> (M, 7, 7, 3), identical arithmetic to sample_patch_coords
    delta = 2.0 / n_fe
    offsets = (np.arange(PATCH) - HALF) * delta
    m = len(coords)
    out = np.empty((m, PATCH, PATCH, 3))
    out[..., 0] = coords[:, 0, None, None]
    out[..., 1] = coords[:, 1, None, None] + offsets[None, None, :]
    out[..., 2] = coords[:, 2, None, None] + offsets[None, :, None]
    return out


def predict_patches(nik: NIKModel, coords: np.ndarray, n_fe: int) -> np.ndarray:
    """
    NIK predictions on the neighbourhood of every coordinate, `(M, n_c, 7, 7)`
    in units of `nik.value_scale`.
    """
    patches = []
    for start in range(0, len(coords), PATCH_CHUNK):
        grid = _patch_grid(coords[start : start + PATCH_CHUNK], n_fe)
        values = nik_forward(nik, grid.reshape(-1, 3)) / nik.value_scale
        patches.append(
            values.reshape(len(grid), PATCH, PATCH, nik.n_coils).transpose(0, 3, 1, 2)
        )
    return np.concatenate(patches)


def iconik_point(nik: NIKModel, kernel: ICoKernel, v, n_fe: int) -> np.ndarray:
    """
    Corrected value at a single coordinate through its explicit patch.
    """
    patch = predict_patches(nik, np.asarray(v, dtype=float).reshape(1, 3), n_fe)[0]
    return nik.value_scale * ico_forward(kernel, patch)


def _acr_loss(kernel, patches, targets, coords, cfg: TrainConfig) -> float:
    pred = _stack(kernel, patches)[0][:, :, 0, 0]
    return hdr_loss(pred, targets, coords, cfg.sigma, cfg.eps, cfg.lam).value


def calibrate_ico(
    nik: NIKModel,
    ds: KSpaceDataset,
    acr: ACRSpec,
    cfg: TrainConfig,
    hidden: Optional[int] = None,
    offset: float = 4.0,
) -> ICoKernel:
    """
    Fits the correction kernel to the measured samples inside the ACR.

    Starts from `identity_kernel` and keeps the kernel with the lowest full
    ACR loss, evaluated after every epoch; the identity kernel is a
    candidate too, so calibration never ends worse than plain NIK.
    """
    fingerprint = nik.fingerprint()

    inside = acr.contains(ds.coords[:, 1], ds.coords[:, 2])
    if not np.any(inside):
        raise EmptyACRError(f"no samples within radius {acr.radius} of the k-space center")

    coords = ds.coords[inside].astype(float)
    targets = ds.values[inside].astype(complex) / nik.value_scale
    n_samples = len(coords)

    LOG.info(f"Predicting NIK neighbourhoods for {n_samples} ACR samples")
    patches = predict_patches(nik, coords, ds.meta.n_fe)

    kernel = identity_kernel(nik.n_coils, hidden, offset)
    params = kernel.parameters()
    optimizer = Adam([p.view(np.float64) for p in params], cfg.adam())
    shuffle = np.random.default_rng([cfg.seed, 3])
    batch_size = min(cfg.batch_size, n_samples)

    best_loss = _acr_loss(kernel, patches, targets, coords, cfg)
    best_params = [p.copy() for p in params]
    LOG.info(f"ICo identity ACR loss {best_loss:.4g}")

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n_samples)
        for start in range(0, n_samples, batch_size):
            idx = order[start : start + batch_size]
            current = ICoKernel.from_parameters(params)
            out, trace = _stack(current, patches[idx], keep=True)
            loss = hdr_loss(
                out[:, :, 0, 0], targets[idx], coords[idx], cfg.sigma, cfg.eps, cfg.lam
            )
            if not math.isfinite(loss.value):
                raise DivergenceError(f"ICo loss became {loss.value} at epoch {epoch}")

            grad = np.zeros_like(out)
            grad[:, :, 0, 0] = loss.grad
            grads = _stack_backward(current, trace, grad)
            optimizer.step([np.ascontiguousarray(g).view(np.float64) for g in grads])

        epoch_loss = _acr_loss(ICoKernel.from_parameters(params), patches, targets, coords, cfg)
        if not math.isfinite(epoch_loss):
            raise DivergenceError(f"ICo loss became {epoch_loss} at epoch {epoch}")

        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_params = [p.copy() for p in params]
        LOG.debug(f"ICo epoch {epoch}: ACR loss {epoch_loss:.4g} (best {best_loss:.4g})")

    if nik.fingerprint() != fingerprint:
        raise DataError("NIK parameters changed during ICo calibration")

    LOG.info(f"ICo calibration done: best ACR loss {best_loss:.4g}")
    return ICoKernel.from_parameters(best_params)


def acr_loss(
    nik: NIKModel, kernel: ICoKernel, ds: KSpaceDataset, acr: ACRSpec, cfg: TrainConfig
) -> float:
    """
    HDR loss of the corrected predictions over the ACR samples of `ds`.
    """
    inside = acr.contains(ds.coords[:, 1], ds.coords[:, 2])
    if not np.any(inside):
        raise EmptyACRError(f"no samples within radius {acr.radius} of the k-space center")

    coords = ds.coords[inside].astype(float)
    targets = ds.values[inside].astype(complex) / nik.value_scale
    patches = predict_patches(nik, coords, ds.meta.n_fe)
    return _acr_loss(kernel, patches, targets, coords, cfg)


def iconik_infer(
    nik: NIKModel, kernel: ICoKernel, nav: float, height: int, width: int
) -> np.ndarray:
    """
    Corrected `(n_c, H, W)` grid: NIK on a grid padded by three cells, then
    the convolution stack across it.
    """
    warn_if_extrapolating(nik, nav)
    padded = evaluate_grid(nik, grid_coords(nav, height, width, pad=HALF))
    return nik.value_scale * apply_kernel(kernel, padded / nik.value_scale)
