"""Fusion quality metrics: ERGAS, per-band PSNR and spectral angle (SAM).

All three operate on raw-scale cubes (band means restored), matching how
reconstruction quality is normally reported for fusion results.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, MetricError

PSNR_CAP_DB = 300.0  # sentinel for a zero-error band


@dataclass
class MetricReport:
    ergas: float
    psnr_mean: float
    psnr_per_band: np.ndarray
    sam_global: float
    sam_per_pixel: np.ndarray  # (height, width) degrees

    def csv_row(self):
        return f"{self.ergas:.9g},{self.psnr_mean:.9g},{self.sam_global:.9g}"


def _check_dims(ref, est):
    if (ref.width, ref.height, ref.bands) != (est.width, est.height, est.bands):
        raise DimensionError(
            f"cube dims differ: {ref.width}x{ref.height}x{ref.bands} vs "
            f"{est.width}x{est.height}x{est.bands}"
        )


def ergas(ref, est, sr):
    """(100/sr) * sqrt(mean over bands of band-MSE / band-mean^2)."""
    _check_dims(ref, est)
    if sr <= 0:
        raise MetricError(f"sr factor must be positive, got {sr}")
    r = ref.data.reshape(ref.bands, -1)
    e = est.data.reshape(est.bands, -1)
    band_means = r.mean(axis=1)
    zero = np.flatnonzero(band_means == 0)
    if zero.size:
        raise MetricError(f"reference band {zero[0]} has zero mean")
    mse = ((r - e) ** 2).mean(axis=1)
    return (100.0 / sr) * np.sqrt(np.mean(mse / band_means**2))


def psnr(ref, est):
    """Per band: 10*log10(max(ref_band)^2 / band-MSE); returns (mean, vector)."""
    _check_dims(ref, est)
    r = ref.data.reshape(ref.bands, -1)
    e = est.data.reshape(est.bands, -1)
    mse = ((r - e) ** 2).mean(axis=1)
    peak = r.max(axis=1)
    per_band = np.empty(ref.bands)
    nonzero = mse > 0
    per_band[nonzero] = 10.0 * np.log10(peak[nonzero] ** 2 / mse[nonzero])
    per_band[~nonzero] = PSNR_CAP_DB
    per_band = np.minimum(per_band, PSNR_CAP_DB)
    return float(per_band.mean()), per_band


def sam(ref, est):
    """Per-pixel spectral angle in degrees; global value is the mean over
    pixels with nonzero norm in both cubes (zero-norm pixels are skipped)."""
    _check_dims(ref, est)
    r = ref.data.reshape(ref.bands, -1).T
    e = est.data.reshape(est.bands, -1).T
    nr = np.linalg.norm(r, axis=1)
    ne = np.linalg.norm(e, axis=1)
    valid = (nr > 0) & (ne > 0)
    if not valid.any():
        raise MetricError("all pixels have zero spectral norm")
    cosines = np.zeros(len(r))
    cosines[valid] = np.einsum("ij,ij->i", r[valid], e[valid]) / (nr[valid] * ne[valid])
    angles = np.degrees(np.arccos(np.clip(cosines, -1.0, 1.0)))
    angles[~valid] = np.nan
    global_sam = float(angles[valid].mean())
    return global_sam, angles.reshape(ref.height, ref.width)


def evaluate(ref, est, sr):
    """Bundle all three metrics into one report."""
    psnr_mean, per_band = psnr(ref, est)
    sam_global, sam_map = sam(ref, est)
    return MetricReport(
        ergas=float(ergas(ref, est, sr)),
        psnr_mean=psnr_mean,
        psnr_per_band=per_band,
        sam_global=sam_global,
        sam_per_pixel=sam_map,
    )
