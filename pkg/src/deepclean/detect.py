"""Reconstruction-error thresholds, sample classification, localisation and imputation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .preprocess import SENTINEL

Reconstructor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Thresholds:
    sample_threshold: float
    window_threshold: float
    sample_percentile: float = 90.0
    window_percentile: float = 99.0
    window_len: int = 125
    window_stride: int = 25

    def __post_init__(self):
        if not (self.sample_threshold > 0 and self.window_threshold > 0):
            raise ValueError("thresholds must be positive")
        if not 1 <= self.window_len <= 1250:
            raise ValueError("window_len must lie in [1, 1250]")
        if self.window_stride < 1:
            raise ValueError("window_stride must be >= 1")

    def to_dict(self) -> dict:
        return {
            "sample_threshold": self.sample_threshold,
            "window_threshold": self.window_threshold,
            "sample_percentile": self.sample_percentile,
            "window_percentile": self.window_percentile,
            "window_len": self.window_len,
            "window_stride": self.window_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class DetectionResult:
    sample_mse: float
    is_artefact: bool
    timepoint_mask: np.ndarray
    window_scores: np.ndarray
    window_starts: np.ndarray
    reconstruction: np.ndarray | None = None
    imputed: np.ndarray | None = None


@dataclass(frozen=True)
class CalibrationConfig:
    sample_percentile: float = 90.0
    window_percentile: float = 99.0
    window_len: int = 125
    window_stride: int = 25


def nearest_rank(values, p: float) -> float:
    """The ceil(p/100 * n)-th smallest value (1-based; p = 0 gives the minimum)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    if not 0 <= p <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    rank = max(1, math.ceil(p / 100.0 * v.size))
    return float(v[rank - 1])


def window_starts(length: int, window_len: int, stride: int) -> list[tuple[int, int]]:
    """``(start, end)`` pairs; a trailing partial window covers any uncovered tail."""
    wl = min(window_len, length)
    spans = [(s, s + wl) for s in range(0, length - wl + 1, stride)]
    last_end = spans[-1][1]
    if last_end < length:
        s = spans[-1][0] + stride
        if s < length:
            spans.append((s, length))
    return spans


def window_mse(x: np.ndarray, recon: np.ndarray, window_len: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-window MSE along the last axis. Returns ``(starts, scores[..., n_windows])``."""
    sq = (np.asarray(x, dtype=np.float64) - recon) ** 2
    spans = window_starts(sq.shape[-1], window_len, stride)
    c = np.concatenate([np.zeros(sq.shape[:-1] + (1,)), np.cumsum(sq, axis=-1)], axis=-1)
    a = np.array([s for s, _ in spans])
    b = np.array([e for _, e in spans])
    scores = (c[..., b] - c[..., a]) / (b - a)
    return a, scores


def _sample_mse(x: np.ndarray, recon: np.ndarray) -> np.ndarray:
    return np.mean((x - recon) ** 2, axis=-1)


def calibrate_thresholds(reconstructor: Reconstructor, train_windows, cfg: CalibrationConfig | None = None) -> Thresholds:
    """Nearest-rank percentiles of training-set sample MSEs and 1-second window MSEs.

    Windows containing the missing-data sentinel are left out.
    """
    cfg = cfg or CalibrationConfig()
    x = np.asarray(train_windows, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[0] == 0:
        raise ValueError("no training windows to calibrate on")
    keep = ~np.any(x == SENTINEL, axis=1)
    if not keep.any():
        raise ValueError("every training window contains the missing-data sentinel")
    x = x[keep]
    recon = reconstructor(x)
    sample = _sample_mse(x, recon)
    _, win = window_mse(x, recon, cfg.window_len, cfg.window_stride)
    return Thresholds(
        nearest_rank(sample, cfg.sample_percentile),
        nearest_rank(win, cfg.window_percentile),
        cfg.sample_percentile,
        cfg.window_percentile,
        cfg.window_len,
        cfg.window_stride,
    )


def _check_input(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single 1-D window")
    return x


def classify_sample(reconstructor: Reconstructor, thresholds: Thresholds, x) -> DetectionResult:
    x = _check_input(x)
    recon = np.asarray(reconstructor(x), dtype=np.float64).reshape(x.shape)
    mse = float(_sample_mse(x, recon))
    return DetectionResult(mse, mse > thresholds.sample_threshold, np.zeros(0, dtype=bool),
                           np.zeros(0), np.zeros(0, dtype=np.int64), recon)


def flag_windows(length: int, spans, flagged) -> np.ndarray:
    mask = np.zeros(length, dtype=bool)
    for (a, b), hit in zip(spans, flagged):
        if hit:
            mask[a:b] = True
    return mask


def localize_artefacts(reconstructor: Reconstructor, thresholds: Thresholds, x,
                       result: DetectionResult | None = None) -> DetectionResult:
    """Whole-window flagging: every window scoring above the threshold is marked in full."""
    x = _check_input(x)
    res = result if result is not None else classify_sample(reconstructor, thresholds, x)
    spans = window_starts(len(x), thresholds.window_len, thresholds.window_stride)
    starts, scores = window_mse(x, res.reconstruction, thresholds.window_len, thresholds.window_stride)
    mask = flag_windows(len(x), spans, scores > thresholds.window_threshold)
    mask |= x == SENTINEL
    return DetectionResult(res.sample_mse, res.is_artefact, mask, scores, starts, res.reconstruction)


def impute(reconstructor: Reconstructor, result: DetectionResult, x) -> np.ndarray:
    """Replace masked (and sentinel) timepoints by the reconstruction held in ``result``."""
    x = _check_input(x)
    recon = result.reconstruction
    if recon is None:
        recon = np.asarray(reconstructor(x), dtype=np.float64).reshape(x.shape)
    mask = np.zeros(len(x), dtype=bool) if result.timepoint_mask.size == 0 else result.timepoint_mask
    mask = mask | (x == SENTINEL)
    out = np.where(mask, recon, x)
    result.imputed = out
    return out


def detect_batch(reconstructor: Reconstructor, thresholds: Thresholds, windows) -> list[DetectionResult]:
    """Classify, localise and impute a stack of windows with one batched reconstruction."""
    x = np.asarray(windows, dtype=np.float64)
    recon = np.asarray(reconstructor(x), dtype=np.float64).reshape(x.shape)
    out = []
    for xi, ri in zip(x, recon):
        mse = float(np.mean((xi - ri) ** 2))
        base = DetectionResult(mse, mse > thresholds.sample_threshold, np.zeros(0, dtype=bool),
                               np.zeros(0), np.zeros(0, dtype=np.int64), ri)
        res = localize_artefacts(reconstructor, thresholds, xi, base)
        impute(reconstructor, res, xi)
        out.append(res)
    return out


def write_detection_csv(rows: Iterable[tuple[int, DetectionResult]], path) -> None:
    """Stream ``window_start,sample_mse,is_artefact`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start", "sample_mse", "is_artefact"])
        for start, res in rows:
            w.writerow([start, repr(res.sample_mse), int(res.is_artefact)])
