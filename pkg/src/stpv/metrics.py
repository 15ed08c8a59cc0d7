"""Prediction quality: MSE, PSNR, windowed SSIM, and frame-wise curves.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic
range 1, and the valid-window convention (no border padding). PSNR is capped
at the 99.0 sentinel, which also stands in for +inf when MSE is zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PSNR_MAX = 99.0


def _check_pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"frame shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _check_pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    m = mse(x, y)
    if m == 0.0:
        return PSNR_MAX
    return min(PSNR_MAX, 10.0 * math.log10(1.0 / m))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    win = np.outer(g1, g1)
    return win / win.sum()


def _to_2d(frame: np.ndarray) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"ssim expects a single-channel frame, got shape {frame.shape}")
    return arr


def _window_means(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    size = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return np.tensordot(view, win, axes=((2, 3), (0, 1)))


def ssim(x, y, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    xi = _to_2d(x)
    yi = _to_2d(y)
    if xi.shape != yi.shape:
        raise ValueError(f"frame shapes differ: {xi.shape} vs {yi.shape}")
    if min(xi.shape) < window:
        raise ValueError(f"frame {xi.shape} smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = _window_means(xi, win)
    mu_y = _window_means(yi, win)
    xx = _window_means(xi * xi, win) - mu_x * mu_x
    yy = _window_means(yi * yi, win) - mu_y * mu_y
    xy = _window_means(xi * yi, win) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


_METRICS = {"mse": mse, "psnr": psnr, "ssim": ssim}


@dataclass
class FrameMetricSeries:
    metric: str
    means: list[float] = field(default_factory=list)   # one per horizon step
    stds: list[float] = field(default_factory=list)
    mean: float = 0.0                                  # aggregate over all frames


def frame_wise(metric: str, predicted: np.ndarray, target: np.ndarray) -> FrameMetricSeries:
    """Apply a metric per horizon step over an evaluation set.

    predicted/target: [num_sequences, m, C, H, W] with equal shapes.
    """
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(_METRICS)}")
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if predicted.shape != target.shape:
        raise ValueError(f"sequence shapes differ: {predicted.shape} vs {target.shape}")
    if predicted.ndim != 5:
        raise ValueError(f"expected [num, m, C, H, W], got {predicted.shape}")
    fn = _METRICS[metric]
    num, m = predicted.shape[:2]
    values = np.array([[fn(predicted[i, t], target[i, t]) for i in range(num)]
                       for t in range(m)], dtype=np.float64)
    series = FrameMetricSeries(metric=metric)
    series.means = [float(v) for v in values.mean(axis=1)]
    series.stds = [float(v) for v in values.std(axis=1)]
    series.mean = float(values.mean())
    return series


def write_series_csv(path, series: FrameMetricSeries) -> None:
    lines = ["step,mean,std"]
    for step, (mean, std) in enumerate(zip(series.means, series.stds), start=1):
        lines.append(f"{step},{mean!r},{std!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
