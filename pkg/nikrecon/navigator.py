"""
Respiratory self-navigation from the k-space center and amplitude binning.
"""
import csv
import dataclasses
import enum
import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy.ndimage

from nikrecon.simulator import KSpaceDataset
from nikrecon.utils import DataError

LOG = logging.getLogger(__name__)


class DegenerateSignalError(DataError):
    """
    Raised when the k-space center does not vary, so no motion signal exists.
    """


class NavigatorSource(enum.Enum):
    self = "self"
    oracle = "oracle"


@dataclasses.dataclass(frozen=True)
class NavigatorSignal:
    values: np.ndarray  # (n_spokes,) in [-1, 1]
    source: NavigatorSource = NavigatorSource.self
    sign_flipped: bool = False
    truth: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.values)

    def correlation(self) -> Optional[float]:
        """
        Pearson correlation with the simulated ground truth, if known.
        """
        if self.truth is None:
            return None
        return float(np.corrcoef(self.values, self.truth)[0, 1])


def extract_center_samples(ds: KSpaceDataset) -> np.ndarray:
    """
    Returns the `(n_c, n_spokes)` matrix of multi-coil k=0 samples.
    """
    n_fe = ds.meta.n_fe
    center = ds.coords[n_fe // 2 :: n_fe, 1:]
    if len(center) != ds.meta.n_spokes or np.any(center != 0.0):
        raise DataError("every spoke must sample the k-space center at index n_fe/2")

    return ds.values[n_fe // 2 :: n_fe].T.astype(complex)


def pca_first_component(data: np.ndarray) -> np.ndarray:
    """
    Projects `data` (features x time) onto its first principal direction.

    The loading vector's first nonzero entry is made positive so the output
    sign is deterministic.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] < 2:
        raise DataError(f"need a features x time matrix with time >= 2, got {data.shape}")

    centered = data - data.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / (data.shape[1] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)

    trace = float(np.trace(cov))
    if trace <= 0 or eigvals[-1] < 1e-12 * trace:
        raise DegenerateSignalError("the signal has no variance to extract")

    loading = eigvecs[:, -1]
    first = np.flatnonzero(np.abs(loading) > 1e-12 * np.abs(loading).max())[0]
    if loading[first] < 0:
        loading = -loading

    return loading @ centered


def _rescale(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if not hi > lo:
        raise DegenerateSignalError("the navigator is constant")
    return 2 * (values - lo) / (hi - lo) - 1


def extract_navigator(ds: KSpaceDataset, smooth_window: int = 5) -> NavigatorSignal:
    """
    Self-navigation: PCA of the k-space center, smoothed and rescaled.

    Arguments:
        ds (KSpaceDataset): the acquisition.
        smooth_window (int): moving-average length in spokes.

    Returns:
        NavigatorSignal: values in [-1, 1], sign-aligned with the simulated
            ground truth when the dataset carries one.
    """
    if ds.meta.n_spokes < 2 * smooth_window:
        raise DataError(
            f"need at least {2 * smooth_window} spokes to smooth over {smooth_window}"
        )

    center = extract_center_samples(ds)
    features = np.concatenate([center.real, center.imag])
    component = pca_first_component(features)

    if smooth_window > 1:
        component = scipy.ndimage.uniform_filter1d(
            component, size=smooth_window, mode="nearest"
        )

    values = _rescale(component)

    truth = ds.meta.true_nav
    flipped = False
    if truth is not None and np.std(truth) > 0:
        if np.corrcoef(values, truth)[0, 1] < 0:
            values = -values
            flipped = True

    signal = NavigatorSignal(values=values, sign_flipped=flipped, truth=truth)
    LOG.info(f"Extracted navigator over {len(values)} spokes (flipped={flipped})")
    return signal


def oracle_navigator(ds: KSpaceDataset) -> NavigatorSignal:
    truth = ds.meta.true_nav
    if truth is None:
        raise DataError("dataset has no ground-truth navigator")

    return NavigatorSignal(
        values=np.asarray(truth, dtype=float),
        source=NavigatorSource.oracle,
        truth=truth,
    )


def with_navigator(ds: KSpaceDataset, nav: NavigatorSignal) -> KSpaceDataset:
    """
    Returns a copy of `ds` whose nav coordinate is the given signal.
    """
    if len(nav) != ds.meta.n_spokes:
        raise DataError(f"navigator has {len(nav)} values for {ds.meta.n_spokes} spokes")

    coords = ds.coords.copy()
    coords[:, 0] = np.repeat(nav.values, ds.meta.n_fe)
    return dataclasses.replace(ds, coords=coords)


def bin_sizes(n_spokes: int, n_bins: int) -> List[int]:
    base, remainder = divmod(n_spokes, n_bins)
    return [base + (1 if i < remainder else 0) for i in range(n_bins)]


def bin_spokes(nav: NavigatorSignal, n_bins: int) -> List[np.ndarray]:
    """
    Equal-count amplitude binning, highest navigator (end-exhale) first.
    """
    if n_bins < 1:
        raise DataError(f"n_bins must be at least 1, got {n_bins}")

    if len(nav) < n_bins:
        raise DataError(f"cannot split {len(nav)} spokes into {n_bins} bins")

    order = np.argsort(-nav.values, kind="stable")
    bins = []
    start = 0
    for size in bin_sizes(len(nav), n_bins):
        bins.append(np.sort(order[start : start + size]))
        start += size
    return bins


def bin_by_navigator(
    ds: KSpaceDataset, nav: NavigatorSignal, n_bins: int
) -> List[KSpaceDataset]:
    return [ds.spokes(spokes) for spokes in bin_spokes(nav, n_bins)]


def write_navigator_csv(nav: NavigatorSignal, path: Path, spoke_ids=None) -> None:
    if spoke_ids is None:
        spoke_ids = np.arange(len(nav))

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["spoke", "nav"]
        if nav.truth is not None:
            header.append("true_nav")
        writer.writerow(header)

        for i, spoke in enumerate(spoke_ids):
            row = [int(spoke), repr(float(nav.values[i]))]
            if nav.truth is not None:
                row.append(repr(float(nav.truth[i])))
            writer.writerow(row)
