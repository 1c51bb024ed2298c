"""Principal-component reconstruction baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container


@dataclass
class PcaModel:
    mean_vector: np.ndarray
    components: np.ndarray  # [k, d], orthonormal rows, descending eigenvalue
    eigenvalues: np.ndarray
    standardizer: tuple[float, float] | None = None
    thresholds: dict | None = None

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return pca_reconstruct(self, x)

    __call__ = reconstruct


def fit_pca(train_windows, k: int) -> PcaModel:
    """Top-k principal axes of the per-time-point-centred training windows.

    Thin SVD of the centred data matrix; each component's sign is fixed so that
    its largest-magnitude entry is positive.
    """
    x = np.asarray(train_windows, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("train_windows must be a 2-D array [n, d]")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} outside [1, {min(n, d)}]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:k].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    comps *= signs[:, None]
    denom = max(n - 1, 1)
    eig = (s[:k] ** 2) / denom
    return PcaModel(mean, comps, eig)


def pca_reconstruct(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean_vector.shape[0]:
        raise ValueError(f"expected length {model.mean_vector.shape[0]}, got {x.shape[-1]}")
    centred = x - model.mean_vector
    return model.mean_vector + (centred @ model.components.T) @ model.components


def save_pca(model: PcaModel, path) -> None:
    meta = {
        "k": model.k,
        "standardizer": list(model.standardizer) if model.standardizer is not None else None,
        "thresholds": model.thresholds,
    }
    tensors = {"mean_vector": model.mean_vector, "components": model.components, "eigenvalues": model.eigenvalues}
    container.save(path, "pca", meta, tensors)


def load_pca(path) -> PcaModel:
    kind, meta, t = container.load(path)
    if kind != "pca":
        raise container.LoadError(f"expected a pca container, found {kind!r}")
    comps = t["components"]
    if comps.ndim != 2 or comps.shape[1] != t["mean_vector"].shape[0] or t["eigenvalues"].shape != (comps.shape[0],):
        raise container.ShapeConsistencyError("pca tensors have inconsistent shapes")
    st = meta.get("standardizer")
    return PcaModel(t["mean_vector"], comps, t["eigenvalues"], tuple(st) if st else None, meta.get("thresholds"))
