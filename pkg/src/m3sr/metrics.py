"""Reconstruction metrics on channel-last (H, W, bands) cubes, data range [0, 1].

Every function works in float64 regardless of input dtype.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


class UndefinedMetricError(ValueError):
    pass


def _pair(Z, Zh):
    Z = np.asarray(Z, dtype=np.float64)
    Zh = np.asarray(Zh, dtype=np.float64)
    if Z.shape != Zh.shape:
        raise ValueError(f"shape mismatch: {Z.shape} vs {Zh.shape}")
    return Z, Zh


def mse(Z, Zh) -> float:
    Z, Zh = _pair(Z, Zh)
    return float(np.mean((Z - Zh) ** 2))


def rmse(Z, Zh) -> float:
    return float(np.sqrt(mse(Z, Zh)))


def psnr_from_mse(m: float) -> float:
    if m < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / m))


def psnr(Z, Zh) -> float:
    """10 log10(1 / MSE), capped at 100 dB."""
    return psnr_from_mse(mse(Z, Zh))


def sam_angles(Z, Zh):
    """Per-pixel spectral angles in degrees, and the count of skipped zero pixels."""
    Z, Zh = _pair(Z, Zh)
    z = Z.reshape(-1, Z.shape[-1])
    zh = Zh.reshape(-1, Zh.shape[-1])
    nz, nzh = np.linalg.norm(z, axis=1), np.linalg.norm(zh, axis=1)
    keep = (nz > 0) & (nzh > 0)
    if not keep.any():
        raise UndefinedMetricError("spectral angle undefined: every pixel has a zero spectrum")
    cos = np.einsum("ij,ij->i", z[keep], zh[keep]) / (nz[keep] * nzh[keep])
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))), int((~keep).sum())


def sam(Z, Zh) -> float:
    """Mean spectral angle in degrees; pixels with a zero spectrum are skipped."""
    angles, _ = sam_angles(Z, Zh)
    return float(angles.mean())


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over the first two axes, valid windows only
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(Z, Zh, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """SSIM at every valid window position, shape (H-w+1, W-w+1, bands)."""
    Z, Zh = _pair(Z, Zh)
    if Z.ndim == 2:
        Z, Zh = Z[:, :, None], Zh[:, :, None]
    H, W = Z.shape[:2]
    if min(H, W) < window:
        raise ValueError(
            f"image {H}x{W} is smaller than the {window}x{window} SSIM window; "
            "set a smaller ssim window in the config"
        )
    g = gaussian_window(window, sigma)
    mu_x, mu_y = _filter_valid(Z, g), _filter_valid(Zh, g)
    sxx = _filter_valid(Z * Z, g) - mu_x**2
    syy = _filter_valid(Zh * Zh, g) - mu_y**2
    sxy = _filter_valid(Z * Zh, g) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def mssim(Z, Zh, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM: average over windows per band, then over bands."""
    return float(ssim_map(Z, Zh, window, sigma).mean(axis=(0, 1)).mean())


@dataclass
class ImageMetrics:
    id: str
    rmse: float
    psnr_db: float
    sam_deg: float
    mssim: float


@dataclass
class MetricReport:
    rmse: float
    psnr_db: float
    sam_deg: float
    mssim: float
    per_image: list[ImageMetrics] = field(default_factory=list)
    aggregate: str = "per_image"

    def table(self) -> str:
        lines = [f"{'id':<16}{'rmse':>12}{'psnr_db':>12}{'sam_deg':>12}{'mssim':>12}"]
        for m in self.per_image:
            lines.append(f"{m.id:<16}{m.rmse:12.6f}{m.psnr_db:12.4f}{m.sam_deg:12.4f}{m.mssim:12.6f}")
        lines.append(f"{'mean':<16}{self.rmse:12.6f}{self.psnr_db:12.4f}{self.sam_deg:12.4f}{self.mssim:12.6f}")
        return "\n".join(lines)

    def records(self) -> str:
        return "".join(
            f"{m.id} {m.rmse!r} {m.psnr_db!r} {m.sam_deg!r} {m.mssim!r}\n" for m in self.per_image
        )


def image_metrics(Z, Zh, id: str = "", window: int = SSIM_WINDOW) -> ImageMetrics:
    return ImageMetrics(id, rmse(Z, Zh), psnr(Z, Zh), sam(Z, Zh), mssim(Z, Zh, window))


def evaluate(pairs, ids=None, aggregate: str = "per_image", window: int = SSIM_WINDOW) -> MetricReport:
    """Metrics over (reference, reconstruction) pairs.

    ``aggregate="per_image"`` averages per-image values. ``"global"``
    pools every element (MSE), pixel (SAM) and window (SSIM) across images
    before reducing.
    """
    pairs = [_pair(Z, Zh) for Z, Zh in pairs]
    if not pairs:
        raise ValueError("no image pairs to evaluate")
    ids = list(ids) if ids is not None else [str(k) for k in range(len(pairs))]
    per = [image_metrics(Z, Zh, i, window) for (Z, Zh), i in zip(pairs, ids)]
    if aggregate == "per_image":
        return MetricReport(
            float(np.mean([m.rmse for m in per])),
            float(np.mean([m.psnr_db for m in per])),
            float(np.mean([m.sam_deg for m in per])),
            float(np.mean([m.mssim for m in per])),
            per,
            aggregate,
        )
    if aggregate != "global":
        raise ValueError(f"aggregate must be 'per_image' or 'global', got {aggregate!r}")
    sq = np.concatenate([((Z - Zh) ** 2).ravel() for Z, Zh in pairs])
    angles = np.concatenate([sam_angles(Z, Zh)[0] for Z, Zh in pairs])
    maps = [ssim_map(Z, Zh, window) for Z, Zh in pairs]
    # pool windows per band across images, then average bands
    band_means = np.concatenate([m.reshape(-1, m.shape[-1]) for m in maps]).mean(axis=0)
    m = float(sq.mean())
    return MetricReport(float(np.sqrt(m)), psnr_from_mse(m), float(angles.mean()),
                        float(band_means.mean()), per, aggregate)
