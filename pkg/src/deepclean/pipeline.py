"""Train, calibrate and evaluate VAE and PCA reconstructors over a latent-dimension sweep."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import detect, pca, vae
from .evaluate import UndefinedAucError, binary_metrics, roc_auc, within_sample_metrics
from .preprocess import SENTINEL, DatasetBundle
from .report import MethodResult, SweepResults

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepConfig:
    latent_dims: tuple = vae.LATENT_SWEEP
    restarts: int = 5
    train: vae.TrainHyper = field(default_factory=vae.TrainHyper)
    calibration: detect.CalibrationConfig = field(default_factory=detect.CalibrationConfig)
    methods: tuple = ("pca", "vae")


def restart_seeds(seed: int, restarts: int) -> tuple[int, ...]:
    return tuple(int(seed) * 1000 + i for i in range(restarts))


def bundle_digest(bundle: DatasetBundle) -> str:
    h = hashlib.sha256()
    for split in ("train", "validation", "test"):
        h.update(np.ascontiguousarray(bundle.matrix(split)).tobytes())
    return h.hexdigest()[:16]


def _cache_dir() -> Path | None:
    root = os.environ.get("DEEPCLEAN_CACHE")
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def train_vae(bundle: DatasetBundle, latent_dim: int, hyper: vae.TrainHyper, seeds) -> vae.VaeModel:
    """``vae.train`` with an optional on-disk cache under ``$DEEPCLEAN_CACHE``."""
    cache = _cache_dir()
    key = None
    if cache is not None:
        text = repr((bundle_digest(bundle), latent_dim, asdict(hyper), tuple(seeds)))
        key = cache / f"vae-{hashlib.sha256(text.encode()).hexdigest()[:20]}.dc"
        if key.exists():
            log.info("using cached model %s", key)
            return vae.load_model(key)
    model = vae.train(bundle, latent_dim, hyper, seeds)
    if key is not None:
        vae.save_model(model, key)
    return model


def evaluate_reconstructor(reconstructor, bundle: DatasetBundle, method: str, latent_dim: int,
                           thresholds: detect.Thresholds) -> MethodResult:
    x_test = bundle.matrix("test")
    results = detect.detect_batch(reconstructor, thresholds, x_test)
    scores = np.array([r.sample_mse for r in results])
    labels = np.array([bool(w.label) for w in bundle.test])
    metrics = binary_metrics(scores > thresholds.sample_threshold, labels)
    roc = None
    try:
        roc, auc = roc_auc(scores, labels)
        metrics = type(metrics)(*metrics.counts, auc=auc)
    except UndefinedAucError:
        log.warning("%s Ld=%d: test set has a single class; AUC undefined", method, latent_dim)
    truth = np.stack([w.timepoint_label for w in bundle.test])
    within = within_sample_metrics(np.stack([r.timepoint_mask for r in results]), truth)
    examples = []
    for want in (True, False):
        idx = np.flatnonzero(labels == want)
        if idx.size:
            i = int(idx[0])
            examples.append((x_test[i], results[i].reconstruction))
    return MethodResult(method, latent_dim, metrics, within, thresholds.to_dict(), roc, scores, labels, examples)


def detect_recording(model, record) -> tuple[list[int], list[detect.DetectionResult], np.ndarray, np.ndarray]:
    """Run a calibrated model over a whole recording in consecutive windows.

    Returns window starts, per-window results, the timepoint artefact mask and
    the imputed signal in the recording's own units.
    """
    if model.thresholds is None or model.standardizer is None:
        raise ValueError("model carries no thresholds or standardizer")
    th = detect.Thresholds.from_dict(model.thresholds)
    mean, sd = model.standardizer
    w = model.mean_vector.shape[0] if isinstance(model, pca.PcaModel) else model.input_length
    n = len(record)
    if n < w:
        raise ValueError(f"recording shorter than one {w}-sample window")
    starts = list(range(0, n - w + 1, w))
    if starts[-1] + w < n:
        starts.append(n - w)  # final window aligned to the end, overlapping its neighbour
    raw = np.stack([record.values[s:s + w] for s in starts])
    miss = np.stack([record.missing_mask[s:s + w] for s in starts])
    x = np.where(miss, SENTINEL, (np.nan_to_num(raw) - mean) / sd)
    results = detect.detect_batch(model, th, x)
    flags = np.zeros(n, dtype=bool)
    imputed = np.array(record.values, dtype=np.float64)
    for s, res in zip(starts, results):
        flags[s:s + w] |= res.timepoint_mask
        fill = res.timepoint_mask
        imputed[s:s + w][fill] = res.imputed[fill] * sd + mean
    return starts, results, flags, imputed


def run_sweep(bundle: DatasetBundle, cfg: SweepConfig, seed: int = 0, models: dict | None = None) -> SweepResults:
    """Fit every method at every latent dimension; trained VAEs are collected in ``models``."""
    if not bundle.test or bundle.test[0].timepoint_label is None:
        raise ValueError("evaluation needs labelled test windows")
    x_train = bundle.matrix("train")
    out = []
    seeds = restart_seeds(seed, cfg.restarts)
    for ld in cfg.latent_dims:
        for method in cfg.methods:
            if method == "vae":
                model = train_vae(bundle, ld, cfg.train, seeds)
            elif method == "pca":
                model = pca.fit_pca(x_train, ld)
                model.standardizer = bundle.standardizer
            else:
                raise ValueError(f"unknown method {method!r}")
            th = detect.calibrate_thresholds(model, x_train, cfg.calibration)
            model.thresholds = th.to_dict()
            if models is not None:
                models[(method, ld)] = model
            res = evaluate_reconstructor(model, bundle, method, ld, th)
            log.info("%s Ld=%d auc=%.3f sens=%.3f spec=%.3f", method, ld, res.metrics.auc,
                     res.metrics.sensitivity, res.metrics.specificity)
            out.append(res)
    meta = {"seed": seed, "restart_seeds": list(seeds), "bundle": bundle_digest(bundle),
            "train": asdict(cfg.train), "calibration": asdict(cfg.calibration),
            "preprocess": bundle.meta.get("config_hash")}
    return SweepResults(out, meta)
