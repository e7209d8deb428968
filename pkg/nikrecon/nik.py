"""
Neural implicit k-space: a Fourier-feature MLP mapping `(nav, kx, ky)` to
multi-coil complex k-space values, trained on the acquired samples and
queried on a Cartesian grid for any motion state.
"""
import dataclasses
import hashlib
import logging
import math
import time
import warnings
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.special

from nikrecon import nufft
from nikrecon.geometry import cartesian_axis
from nikrecon.optim import Adam, AdamConfig
from nikrecon.simulator import CoilMaps, KSpaceDataset
from nikrecon.utils import ConfigError, DataError, DivergenceError

LOG = logging.getLogger(__name__)

INFERENCE_CHUNK = 16384


class ExtrapolationWarning(UserWarning):
    pass


def _silu(z):
    return z * scipy.special.expit(z)


def _silu_grad(z):
    s = scipy.special.expit(z)
    return s * (1 + z * (1 - s))


def _tanh_grad(z):
    return 1 - np.tanh(z) ** 2


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def _as_float32(a: np.ndarray) -> np.ndarray:
    # parameters live on the float32 lattice so checkpoints are exact
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclasses.dataclass(frozen=True)
class FourierEncoding:
    frequencies: np.ndarray  # (m, 3) over (nav, kx, ky)
    scales: Tuple[float, float, float] = (1.0, 8.0, 8.0)

    def __post_init__(self):
        if self.frequencies.ndim != 2 or self.frequencies.shape[1] != 3:
            raise ConfigError("Fourier frequencies must be an (m, 3) matrix")

        if len(self.frequencies) < 1:
            raise ConfigError("Fourier encoding needs at least one frequency")

    @property
    def n_features(self) -> int:
        return 2 * len(self.frequencies)

    @classmethod
    def random(
        cls, n_frequencies: int, scales: Sequence[float], rng: np.random.Generator
    ) -> "FourierEncoding":
        if n_frequencies < 1:
            raise ConfigError(f"n_frequencies must be at least 1, got {n_frequencies}")

        scales = tuple(float(s) for s in scales)
        b = rng.standard_normal((n_frequencies, 3)) * np.asarray(scales)[None]
        return cls(frequencies=_as_float32(b), scales=scales)


def encode(enc: FourierEncoding, v: np.ndarray) -> np.ndarray:
    """
    Random Fourier features `[sin(2 pi B v), cos(2 pi B v)]`.
    """
    v = np.asarray(v, dtype=float)
    proj = 2 * np.pi * (v @ enc.frequencies.T)
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


@dataclasses.dataclass(frozen=True)
class NIKArchitecture:
    n_layers: int = 6
    width: int = 128
    n_frequencies: Optional[int] = None  # defaults to width / 2
    nav_scale: float = 1.0
    k_scale: float = 8.0
    activation: str = "silu"

    def __post_init__(self):
        if self.n_layers < 1 or self.width < 1:
            raise ConfigError("NIK needs at least one hidden layer of positive width")

        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unknown activation {self.activation!r}, expected one of {sorted(ACTIVATIONS)}"
            )

    @property
    def frequencies(self) -> int:
        return self.n_frequencies or max(1, self.width // 2)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    batch_size: int = 10000
    epochs: int = 3000
    seed: int = 0
    sigma: float = 1.0
    eps: float = 1e-2
    lam: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0  # epochs, 0 disables

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")

        if self.eps <= 0 or self.sigma <= 0 or self.lam < 0:
            raise ConfigError("loss parameters need eps > 0, sigma > 0, lam >= 0")

    def adam(self) -> AdamConfig:
        return AdamConfig(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps
        )


class EpochRecord(NamedTuple):
    epoch: int
    loss: float
    best_loss: float
    seconds: float


@dataclasses.dataclass(frozen=True)
class NIKModel:
    encoding: FourierEncoding
    weights: Tuple[np.ndarray, ...]  # (in, out) per dense layer, output head last
    biases: Tuple[np.ndarray, ...]
    n_coils: int
    activation: str = "silu"
    value_scale: float = 1.0  # outputs are in units of the largest training value
    nav_range: Tuple[float, float] = (-1.0, 1.0)
    step_count: int = 0
    best_loss: float = math.inf
    history: Tuple[EpochRecord, ...] = ()

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ConfigError("NIK needs matching weights and biases for >= 2 layers")

        dims = [self.encoding.n_features] + [w.shape[1] for w in self.weights]
        for w, n_in, n_out in zip(self.weights, dims[:-1], dims[1:]):
            if w.shape != (n_in, n_out):
                raise ConfigError(f"layer of shape {w.shape} does not chain from {n_in}")

        if dims[-1] != 2 * self.n_coils:
            raise ConfigError(f"output width {dims[-1]} is not 2 x {self.n_coils} coils")

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> List[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def with_parameters(self, params: Sequence[np.ndarray], **changes) -> "NIKModel":
        params = [np.asarray(p, dtype=np.float64) for p in params]
        return dataclasses.replace(
            self, weights=tuple(params[0::2]), biases=tuple(params[1::2]), **changes
        )

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.encoding.frequencies).tobytes())
        for p in self.parameters():
            digest.update(np.ascontiguousarray(p).tobytes())
        digest.update(repr((self.n_coils, self.activation, self.value_scale)).encode())
        return digest.hexdigest()


def init_model(
    arch: NIKArchitecture, n_coils: int, seed: int, zero_output: bool = False
) -> NIKModel:
    """
    Builds an untrained model with Glorot-uniform weights and zero biases.
    """
    encoding = FourierEncoding.random(
        arch.frequencies,
        (arch.nav_scale, arch.k_scale, arch.k_scale),
        np.random.default_rng([seed, 0]),
    )

    rng = np.random.default_rng([seed, 1])
    dims = [encoding.n_features] + [arch.width] * arch.n_layers + [2 * n_coils]
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights.append(_as_float32(rng.uniform(-limit, limit, size=(n_in, n_out))))
        biases.append(np.zeros(n_out))

    if zero_output:
        weights[-1] = np.zeros_like(weights[-1])

    return NIKModel(
        encoding=encoding,
        weights=tuple(weights),
        biases=tuple(biases),
        n_coils=n_coils,
        activation=arch.activation,
    )


class _Trace(NamedTuple):
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


def _mlp(model: NIKModel, v: np.ndarray, keep: bool = False):
    act, _ = ACTIVATIONS[model.activation]
    a = encode(model.encoding, v)
    inputs, pre = [], []
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w + b
        if keep:
            inputs.append(a)
            pre.append(z)
        a = act(z)

    if keep:
        inputs.append(a)
    out = a @ model.weights[-1] + model.biases[-1]
    return out, _Trace(inputs, pre)


def _to_complex(out: np.ndarray) -> np.ndarray:
    # output units are interleaved (re, im) per coil
    return out[:, 0::2] + 1j * out[:, 1::2]


def nik_forward(model: NIKModel, v_batch: np.ndarray) -> np.ndarray:
    """
    Predicts `(batch, n_c)` complex k-space values at coordinates
    `(batch, 3)` ordered `(nav, kx, ky)`.
    """
    v_batch = np.asarray(v_batch, dtype=float).reshape(-1, 3)
    out, _ = _mlp(model, v_batch)
    return model.value_scale * _to_complex(out)


def _backward(model: NIKModel, trace: _Trace, dpred: np.ndarray) -> List[np.ndarray]:
    _, act_grad = ACTIVATIONS[model.activation]

    dout = np.empty((len(dpred), 2 * model.n_coils))
    dout[:, 0::2] = dpred.real
    dout[:, 1::2] = dpred.imag

    grads = []
    da = dout
    for i in reversed(range(len(model.weights))):
        if i < len(model.weights) - 1:
            dz = da * act_grad(trace.pre_activations[i])
        else:
            dz = da
        grads.append(dz.sum(axis=0))
        grads.append(trace.inputs[i].T @ dz)
        if i > 0:
            da = dz @ model.weights[i].T

    # collected as (db, dW) from the last layer backwards
    return grads[::-1]


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray  # dL/d(re) + i dL/d(im), same shape as pred


def center_weights(coords: np.ndarray, sigma: float) -> np.ndarray:
    k = np.asarray(coords, dtype=float)[:, -2:]
    return np.exp(-(k**2).sum(axis=1) / (2 * sigma**2))


def hdr_loss(
    pred: np.ndarray,
    target: np.ndarray,
    coords: np.ndarray,
    sigma: float,
    eps: float,
    lam: float,
) -> LossValue:
    """
    Linearized high-dynamic-range loss.

    The residual is divided by `|pred| + eps` with `pred` held constant, so
    the gradient treats the denominator as fixed. A Gaussian-weighted plain
    squared error over the k-space center (width `sigma`, weight `lam`) is
    added.

    Arguments:
        pred (np.ndarray): `(batch, n_c)` complex predictions.
        target (np.ndarray): `(batch, n_c)` complex measurements.
        coords (np.ndarray): `(batch, 3)` or `(batch, 2)` coordinates, the
            last two columns being `(kx, ky)`.

    Returns:
        LossValue: the mean loss and its gradient with respect to `pred`.
    """
    if pred.shape != target.shape:
        raise DataError(f"prediction {pred.shape} and target {target.shape} differ")

    if eps <= 0:
        raise ConfigError("hdr loss eps must be positive")

    residual = pred - target
    n = residual.size
    scale = 1.0 / (np.abs(pred) + eps) ** 2
    center = center_weights(coords, sigma)[:, None] ** 2

    value = np.sum(scale * np.abs(residual) ** 2) / n
    value += lam * np.sum(center * np.abs(residual) ** 2) / n
    grad = 2 * (scale + lam * center) * residual / n
    return LossValue(float(value), grad)


def loss_and_grads(
    model: NIKModel, coords: np.ndarray, targets: np.ndarray, cfg: TrainConfig
) -> Tuple[float, List[np.ndarray]]:
    """
    HDR loss of the raw network output against `targets` (already divided
    by `model.value_scale`) and its gradient for every parameter, in the
    order of `model.parameters()`.
    """
    out, trace = _mlp(model, coords, keep=True)
    loss = hdr_loss(_to_complex(out), targets, coords, cfg.sigma, cfg.eps, cfg.lam)
    return loss.value, _backward(model, trace, loss.grad)


def train_nik(
    ds: KSpaceDataset,
    arch: NIKArchitecture,
    cfg: TrainConfig,
    on_checkpoint: Optional[Callable[[NIKModel], None]] = None,
) -> NIKModel:
    """
    Fits a NIK model to every sample of `ds` with Adam on minibatches.

    Returns the parameters with the lowest epoch-mean loss seen, rounded to
    float32, together with the per-epoch history.
    """
    n_samples = len(ds.coords)
    if n_samples == 0:
        raise DataError("cannot train on an empty dataset")

    nav = ds.coords[:, 0]
    if not np.all(np.isfinite(nav)):
        raise DataError("dataset navigator values are not populated")

    values = ds.values.astype(complex)
    value_scale = float(np.abs(values).max()) or 1.0
    targets = values / value_scale
    coords = ds.coords.astype(float)

    model = init_model(arch, ds.meta.n_coils, cfg.seed)
    model = dataclasses.replace(
        model,
        value_scale=value_scale,
        nav_range=(float(nav.min()), float(nav.max())),
    )
    params = model.parameters()
    optimizer = Adam(params, cfg.adam())
    shuffle = np.random.default_rng([cfg.seed, 2])
    batch_size = min(cfg.batch_size, n_samples)

    best_loss = math.inf
    best_params = [p.copy() for p in params]
    history = []
    started = time.perf_counter()

    LOG.info(
        f"Training NIK ({model.n_parameters} parameters) on {n_samples} samples "
        f"for {cfg.epochs} epochs"
    )
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, batch_size):
            idx = order[start : start + batch_size]
            current = model.with_parameters(params)
            loss, grads = loss_and_grads(current, coords[idx], targets[idx], cfg)

            if not math.isfinite(loss):
                raise DivergenceError(f"NIK loss became {loss} at epoch {epoch}")

            total += loss * len(idx)
            optimizer.step(grads)

        epoch_loss = total / n_samples
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_params = [p.copy() for p in params]

        history.append(
            EpochRecord(epoch, epoch_loss, best_loss, time.perf_counter() - started)
        )
        LOG.debug(f"NIK epoch {epoch}: loss {epoch_loss:.4g} (best {best_loss:.4g})")

        if on_checkpoint and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            on_checkpoint(
                model.with_parameters(
                    [_as_float32(p) for p in best_params], best_loss=best_loss
                )
            )

    LOG.info(f"NIK training done: best epoch loss {best_loss:.4g}")
    return model.with_parameters(
        [_as_float32(p) for p in best_params],
        step_count=optimizer.step_count,
        best_loss=best_loss,
        history=tuple(history),
    )


def warn_if_extrapolating(model: NIKModel, nav: float) -> None:
    """
    Warns when `nav` lies outside the navigator range seen in training.
    Queries there are still answered, the network extrapolates smoothly.
    """
    lo, hi = model.nav_range
    if lo - 1e-9 <= nav <= hi + 1e-9:
        return

    message = f"nav={nav:.4g} outside the observed range [{lo:.4g}, {hi:.4g}]"
    LOG.warning(message)
    warnings.warn(message, ExtrapolationWarning)


def grid_coords(nav: float, height: int, width: int, pad: int = 0) -> np.ndarray:
    """
    `(H + 2 pad, W + 2 pad, 3)` Cartesian query coordinates, rows along ky.
    """
    ky = cartesian_axis(height, pad)
    kx = cartesian_axis(width, pad)
    kyy, kxx = np.meshgrid(ky, kx, indexing="ij")
    return np.stack([np.full_like(kxx, nav), kxx, kyy], axis=-1)


def evaluate_grid(model: NIKModel, coords: np.ndarray) -> np.ndarray:
    rows, cols = coords.shape[:2]
    flat = coords.reshape(-1, 3)
    values = np.concatenate(
        [
            nik_forward(model, flat[i : i + INFERENCE_CHUNK])
            for i in range(0, len(flat), INFERENCE_CHUNK)
        ]
    )
    return values.T.reshape(model.n_coils, rows, cols)


def infer_grid(
    model: NIKModel, nav: float, height: int, width: int, pad: int = 0
) -> np.ndarray:
    """
    Queries the model on the Cartesian grid at motion state `nav`.

    Returns:
        np.ndarray: `(n_c, H + 2 pad, W + 2 pad)` complex grid in the units
            of the acquired samples.
    """
    warn_if_extrapolating(model, nav)
    return evaluate_grid(model, grid_coords(nav, height, width, pad))


def coil_combine_image(kgrids: np.ndarray, coils: CoilMaps) -> np.ndarray:
    """
    Inverse FFT of every coil grid, combined with the conjugate coil maps.
    """
    if kgrids.shape != coils.maps.shape:
        raise DataError(
            f"k-space grids {kgrids.shape} do not match coil maps {coils.maps.shape}"
        )

    return (np.conj(coils.maps) * nufft.ifft2c(kgrids)).sum(axis=0)


def grid_to_image(kgrids: np.ndarray, coils: CoilMaps) -> np.ndarray:
    """
    Combines grids in acquired-sample units into an image.
    """
    return coil_combine_image(nufft.unitary_scale(coils.shape) * kgrids, coils)


def nik_image(model: NIKModel, nav: float, coils: CoilMaps) -> np.ndarray:
    height, width = coils.shape
    return grid_to_image(infer_grid(model, nav, height, width), coils)
