"""
Image quality metrics and report tables.

SSIM uses an 11x11 Gaussian window (sigma 1.5) over the valid region with
C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range, averaged over channels. The same
core supplies the analytic SSIM gradient used by the refinement loss.

Usage:
    from freefix.metrics import psnr, ssim, MetricReport, write_csv

    report = MetricReport(meta={"variant": "full", "seed": 0})
    report.add("view_000", psnr(a, b), ssim(a, b))
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.signal import convolve2d
from scipy.stats import binomtest

from .errors import ShapeMismatchError
from .images import AttributeImage

logger = logging.getLogger(__name__)

PSNR_SENTINEL = 99.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

ImageLike = Union[AttributeImage, np.ndarray]


def _data(image: ImageLike) -> np.ndarray:
    data = image.data if isinstance(image, AttributeImage) else np.asarray(image, dtype=np.float64)
    return data[:, :, None] if data.ndim == 2 else data


def _same_shape(a: ImageLike, b: ImageLike) -> Tuple[np.ndarray, np.ndarray]:
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


# ============================================================================
# PSNR
# ============================================================================

def psnr(a: ImageLike, b: ImageLike) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; 99.0 for (near) identical images."""
    x, y = _same_shape(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_SENTINEL
    return float(-10.0 * np.log10(mse))


# ============================================================================
# SSIM
# ============================================================================

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


_WINDOW = gaussian_window()


def _filter(x: np.ndarray) -> np.ndarray:
    return convolve2d(x, _WINDOW, mode="valid")


def _ssim_channel(x: np.ndarray, y: np.ndarray, with_grad: bool):
    mu_x, mu_y = _filter(x), _filter(y)
    f_xx, f_yy, f_xy = _filter(x * x), _filter(y * y), _filter(x * y)
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * (f_xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = (f_xx - mu_x ** 2) + (f_yy - mu_y ** 2) + SSIM_C2
    denom = b1 * b2
    smap = a1 * a2 / denom
    value = float(smap.mean())
    if not with_grad:
        return value, None

    n = smap.size
    d_mu = (2.0 * mu_y * a2 - 2.0 * mu_y * a1 - smap * (2.0 * mu_x * b2 - 2.0 * mu_x * b1)) / denom / n
    d_fxx = -smap * b1 / denom / n
    d_fxy = 2.0 * a1 / denom / n
    # adjoint of a valid correlation with a symmetric kernel is a full convolution
    grad = (convolve2d(d_mu, _WINDOW, mode="full")
            + 2.0 * x * convolve2d(d_fxx, _WINDOW, mode="full")
            + y * convolve2d(d_fxy, _WINDOW, mode="full"))
    return value, grad


def _check_window(x: np.ndarray) -> None:
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ShapeMismatchError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[0]}x{x.shape[1]}"
        )


def ssim(a: ImageLike, b: ImageLike) -> float:
    """Mean windowed SSIM, channel-averaged."""
    x, y = _same_shape(a, b)
    _check_window(x)
    return float(np.mean([_ssim_channel(x[:, :, c], y[:, :, c], False)[0] for c in range(x.shape[2])]))


def ssim_with_grad(pred: ImageLike, target: ImageLike) -> Tuple[float, np.ndarray]:
    """
    SSIM and its gradient with respect to ``pred``.

    Returns:
        Tuple[float, np.ndarray]: channel-averaged SSIM and an H x W x C gradient
    """
    x, y = _same_shape(pred, target)
    _check_window(x)
    channels = x.shape[2]
    grad = np.empty_like(x)
    total = 0.0
    for c in range(channels):
        value, g = _ssim_channel(x[:, :, c], y[:, :, c], True)
        total += value
        grad[:, :, c] = g / channels
    return total / channels, grad


# ============================================================================
# REPORTS
# ============================================================================

@dataclass
class MetricReport:
    """Per-view PSNR/SSIM with aggregates and free-form metadata (scene, variant, seed)."""

    views: List[Tuple[str, float, float]] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    def add(self, view_id: str, psnr_db: float, ssim_value: float) -> None:
        if not -1.0 - 1e-9 <= ssim_value <= 1.0 + 1e-9:
            raise ValueError(f"SSIM {ssim_value} outside [-1, 1]")
        self.views.append((view_id, float(psnr_db), float(ssim_value)))

    def __len__(self) -> int:
        return len(self.views)

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([v[1] for v in self.views])

    @property
    def ssims(self) -> np.ndarray:
        return np.array([v[2] for v in self.views])

    @property
    def mean_psnr(self) -> float:
        return float(self.psnrs.mean()) if self.views else float("nan")

    @property
    def median_psnr(self) -> float:
        return float(np.median(self.psnrs)) if self.views else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(self.ssims.mean()) if self.views else float("nan")

    @property
    def median_ssim(self) -> float:
        return float(np.median(self.ssims)) if self.views else float("nan")

    def rows(self) -> List[Dict[str, Any]]:
        return [{**self.meta, "view": v, "psnr": p, "ssim": s} for v, p, s in self.views]

    def summary(self) -> Dict[str, Any]:
        return {
            **self.meta,
            "views": len(self.views),
            "mean_psnr": self.mean_psnr,
            "median_psnr": self.median_psnr,
            "mean_ssim": self.mean_ssim,
            "median_ssim": self.median_ssim,
        }


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_csv(rows: Sequence[Dict[str, Any]], path: Union[str, Path],
              columns: Sequence[str] = ()) -> Path:
    """Write rows as CSV; columns default to the keys of the first row."""
    path = Path(path)
    columns = list(columns) or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])
    return path


def markdown_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str] = ()) -> str:
    columns = list(columns) or (list(rows[0].keys()) if rows else [])
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(_fmt(row.get(c, "")) for c in columns) + " |")
    return "\n".join(lines) + "\n"


def write_markdown(rows: Sequence[Dict[str, Any]], path: Union[str, Path],
                   columns: Sequence[str] = (), title: str = "") -> Path:
    path = Path(path)
    text = (f"# {title}\n\n" if title else "") + markdown_table(rows, columns)
    path.write_text(text, encoding="utf-8")
    return path


def sign_test(a: Sequence[float], b: Sequence[float]) -> float:
    """
    One-sided paired sign test that ``a`` tends to exceed ``b``.

    Returns:
        float: p-value (ties dropped; 1.0 when every pair ties)
    """
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins = int(np.sum(diff > 0))
    n = wins + int(np.sum(diff < 0))
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)
