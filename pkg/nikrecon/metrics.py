"""
Image quality against a reference: PSNR, SSIM and NRMSE on magnitude images.
"""
import collections
import dataclasses
import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.ndimage

from nikrecon.utils import DataError

LOG = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5, an 11x11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclasses.dataclass(frozen=True)
class MetricReport:
    method: str
    state: int
    psnr: float
    ssim: float
    nrmse: float

    def __post_init__(self):
        if self.nrmse < 0 or self.ssim > 1 + 1e-12:
            raise DataError(f"inconsistent metrics for {self.method}: {self}")


def _pair(x, ref):
    x = np.abs(np.asarray(x))
    ref = np.abs(np.asarray(ref))
    if x.shape != ref.shape:
        raise DataError(f"image {x.shape} and reference {ref.shape} differ in shape")
    return x.astype(float), ref.astype(float)


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """
    `20 log10(max(ref) / rmse)`, capped at 99 dB for identical images.
    """
    x, ref = _pair(x, ref)
    peak = ref.max()
    if peak <= 0:
        raise DataError("reference image is all zero")

    rmse = math.sqrt(np.mean((x - ref) ** 2))
    if rmse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 20 * math.log10(peak / rmse))


def nrmse(x: np.ndarray, ref: np.ndarray) -> float:
    x, ref = _pair(x, ref)
    norm = np.linalg.norm(ref)
    if norm == 0:
        raise DataError("reference image is all zero")
    return float(np.linalg.norm(x - ref) / norm)


def ssim(x: np.ndarray, ref: np.ndarray, data_range: Optional[float] = None) -> float:
    """
    Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Both images are divided by `data_range`, the reference maximum by
    default, so the dynamic range is 1.
    """
    x, ref = _pair(x, ref)
    scale = data_range if data_range is not None else ref.max()
    if scale <= 0:
        raise DataError("reference image is all zero")
    x, ref = x / scale, ref / scale

    def _blur(img):
        return scipy.ndimage.gaussian_filter(
            img, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect"
        )

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_x, mu_r = _blur(x), _blur(ref)
    var_x = _blur(x * x) - mu_x**2
    var_r = _blur(ref * ref) - mu_r**2
    cov = _blur(x * ref) - mu_x * mu_r

    ssim_map = ((2 * mu_x * mu_r + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_r**2 + c1) * (var_x + var_r + c2)
    )
    return float(ssim_map.mean())


def evaluate(x: np.ndarray, ref: np.ndarray, method: str, state: int = 0) -> MetricReport:
    report = MetricReport(
        method=method,
        state=state,
        psnr=psnr(x, ref),
        ssim=ssim(x, ref),
        nrmse=nrmse(x, ref),
    )
    LOG.info(
        f"{method} state {state}: PSNR {report.psnr:.2f} dB, "
        f"SSIM {report.ssim:.3f}, NRMSE {report.nrmse:.3f}"
    )
    return report


def aggregate(reports: Sequence[MetricReport]) -> List[Dict[str, object]]:
    """
    Mean and standard deviation of every metric, one row per method in
    order of first appearance.
    """
    grouped = collections.OrderedDict()
    for report in reports:
        grouped.setdefault(report.method, []).append(report)

    rows = []
    for method, group in grouped.items():
        row = {"method": method, "n": len(group)}
        for metric in ("ssim", "psnr", "nrmse"):
            values = np.array([getattr(r, metric) for r in group])
            row[f"{metric}_mean"] = float(values.mean())
            row[f"{metric}_std"] = float(values.std())
        rows.append(row)
    return rows
