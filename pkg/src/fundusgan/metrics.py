"""Full-reference quality metrics (PSNR, SSIM) and single-image latency."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(255^2 / MSE) over all pixels and channels; ``inf`` when equal."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(DATA_RANGE**2 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-region filtering of a 2-D array."""
    k = g.size
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def _ssim_channel(x: np.ndarray, y: np.ndarray, g: np.ndarray) -> float:
    c1, c2 = (SSIM_K1 * DATA_RANGE) ** 2, (SSIM_K2 * DATA_RANGE) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5, no padding), channel-averaged.

    Accepts H×W or H×W×C arrays of 8-bit values.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise ShapeError(f"image {a.shape[:2]} is smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    g = gaussian_window()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], g) for c in range(a.shape[2])]))


def measure_sitt(enhance_fn: Callable, images: Sequence, warmup: int = 1) -> tuple[float, float]:
    """Mean and sample std (ms) of per-image ``enhance_fn`` wall time.

    ``images`` must already be decoded; the first image is also used for
    ``warmup`` untimed calls.
    """
    if len(images) < 5:
        raise ValueError(f"SITT needs at least 5 images, got {len(images)}")
    for _ in range(warmup):
        enhance_fn(images[0])
    times = []
    for img in images:
        t0 = time.perf_counter()
        enhance_fn(img)
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.fmean(times), statistics.stdev(times)


@dataclass
class QualityReport:
    names: list[str] = field(default_factory=list)
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    sitt_ms: float | None = None
    sitt_std_ms: float | None = None
    skipped: list[str] = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim_value: float) -> None:
        self.names.append(name)
        self.psnr_db.append(psnr_db)
        self.ssim.append(ssim_value)

    @property
    def count(self) -> int:
        return len(self.names)

    @property
    def infinite_psnr(self) -> int:
        return sum(1 for p in self.psnr_db if math.isinf(p))

    @property
    def mean_psnr(self) -> float:
        finite = [p for p in self.psnr_db if math.isfinite(p)]
        if not finite:
            return math.inf if self.psnr_db else math.nan
        return math.fsum(finite) / len(finite)

    @property
    def mean_ssim(self) -> float:
        return math.fsum(self.ssim) / len(self.ssim) if self.ssim else math.nan

    def summary(self) -> dict[str, str]:
        out = {
            "count": str(self.count),
            "mean_psnr_db": _fmt(self.mean_psnr),
            "mean_ssim": _fmt(self.mean_ssim),
            "infinite_psnr_count": str(self.infinite_psnr),
            "skipped_count": str(len(self.skipped)),
        }
        if self.sitt_ms is not None:
            out["sitt_mean_ms"] = _fmt(self.sitt_ms)
            out["sitt_std_ms"] = _fmt(self.sitt_std_ms)
        return out

    def to_text(self) -> str:
        lines = [f"{n}  psnr={_fmt(p)} dB  ssim={_fmt(s)}"
                 for n, p, s in zip(self.names, self.psnr_db, self.ssim)]
        lines += [f"skipped {n}" for n in self.skipped]
        lines += [f"{k}: {v}" for k, v in self.summary().items()]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = [f"psnr_db.{n}={_fmt(p)}" for n, p in zip(self.names, self.psnr_db)]
        lines += [f"ssim.{n}={_fmt(s)}" for n, s in zip(self.names, self.ssim)]
        lines += [f"{k}={v}" for k, v in self.summary().items()]
        return "\n".join(lines) + "\n"


def _fmt(v: float | None) -> str:
    if v is None:
        return "none"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
