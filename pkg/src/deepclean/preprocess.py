"""Heuristic abnormality marking, test-set sampling, windowing and standardisation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kvconfig import config_hash
from .signal_io import MarkMask, WaveformRecord, regions_from_flags

SENTINEL = -10.0


class CapacityError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    global_min: float = 20.0
    global_max: float = 250.0
    static_window: float = 0.4
    static_range_max: float = 0.5
    jump_window: float = 0.4
    jump_threshold: float = 80.0
    merge_ratio: float = 4.0
    window_s: float = 10.0
    meta_window_s: float = 100.0
    test_count: int = 200
    split_ratio: float = 0.9
    smoothing_alpha: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if not self.global_min < self.global_max:
            raise ValueError("global_min must be below global_max")
        for name in ("static_window", "jump_window", "window_s", "meta_window_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.smoothing_alpha < 0:
            raise ValueError("smoothing_alpha must be >= 0")
        if self.merge_ratio <= 0:
            raise ValueError("merge_ratio must be positive")


@dataclass
class WindowSample:
    values: np.ndarray
    source_start: int
    label: bool | None = None
    timepoint_label: np.ndarray | None = None

    def __post_init__(self):
        if self.timepoint_label is not None:
            self.timepoint_label = np.asarray(self.timepoint_label, dtype=bool)
            if len(self.timepoint_label) != len(self.values):
                raise ValueError("timepoint_label length must equal values length")
            if self.label is None:
                self.label = bool(self.timepoint_label.any())
            elif self.label != bool(self.timepoint_label.any()):
                raise ValueError("sample label disagrees with timepoint labels")


@dataclass
class DatasetBundle:
    train: list[WindowSample]
    validation: list[WindowSample]
    test: list[WindowSample]
    standardizer: tuple[float, float]
    window_length: int
    meta: dict = field(default_factory=dict)

    def matrix(self, split: str) -> np.ndarray:
        rows = getattr(self, split)
        if not rows:
            return np.empty((0, self.window_length))
        return np.stack([w.values for w in rows])


def _window_len(seconds: float, rate: float) -> int:
    return max(1, int(round(seconds * rate)))


def _cover(starts_ok: np.ndarray, width: int, n: int) -> np.ndarray:
    """Flags covered by windows ``[s, s + width)`` for every s where starts_ok[s]."""
    diff = np.zeros(n + 1, dtype=np.int64)
    idx = np.flatnonzero(starts_ok)
    np.add.at(diff, idx, 1)
    np.add.at(diff, np.minimum(idx + width, n), -1)
    return np.cumsum(diff[:n]) > 0


def mark_abnormal(record: WaveformRecord, cfg: PreprocessConfig, annotations: MarkMask | None = None) -> MarkMask:
    """Union of the global-bounds, static-signal, extreme-jump and annotation rules; missing points always marked."""
    x = record.values
    n = len(x)
    if n == 0:
        raise ValueError("record is empty")
    missing = record.missing_mask | np.isnan(x)
    rate = record.sampling_rate
    flags = missing.copy()
    with np.errstate(invalid="ignore"):
        flags |= (x < cfg.global_min) | (x > cfg.global_max)

    # windows may not straddle a segment boundary or contain missing points
    bad = missing.copy()
    seg_id = np.zeros(n, dtype=np.int64)
    for s in record.segment_starts[1:]:
        seg_id[s:] += 1

    def valid_starts(w: int) -> np.ndarray:
        if w > n:
            return np.zeros(0, dtype=bool)
        c = np.concatenate([[0], np.cumsum(bad)])
        no_missing = (c[w:] - c[:-w]) == 0
        same_seg = seg_id[w - 1:] == seg_id[:n - w + 1]
        return no_missing & same_seg

    filled = np.where(missing, 0.0, x)
    ws = _window_len(cfg.static_window, rate)
    if ws <= n:
        view = sliding_window_view(filled, ws)  # row s is [s, s + ws)
        hi = view.max(axis=1)
        lo = view.min(axis=1)
        static = ((hi - lo) < cfg.static_range_max) & valid_starts(ws)
        ok = np.zeros(n, dtype=bool)
        ok[:n - ws + 1] = static
        flags |= _cover(ok, ws, n)

    wj = _window_len(cfg.jump_window, rate)
    if wj >= 2 and wj <= n:
        d = np.abs(np.diff(filled))
        d[np.diff(seg_id) != 0] = 0.0
        d[missing[1:] | missing[:-1]] = 0.0
        # window [s, s + wj) contains differences s .. s + wj - 2
        dmax = sliding_window_view(d, wj - 1).max(axis=1)
        jump = dmax > cfg.jump_threshold
        ok = np.zeros(n, dtype=bool)
        ok[:n - wj + 1] = jump
        flags |= _cover(ok, wj, n)

    if annotations is not None:
        if len(annotations) != n:
            raise ValueError("annotation mask length differs from record")
        flags |= annotations.flags
    return MarkMask(flags)


def merge_marked_regions(mask: MarkMask, merge_ratio: float) -> MarkMask:
    """Merge neighbours whose combined length over the gap between them is >= merge_ratio.

    Left-to-right passes repeat until nothing changes.
    """
    if merge_ratio <= 0:
        raise ValueError("merge_ratio must be positive")
    regions = [list(r) for r in mask.regions]
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(regions) - 1:
            (a0, a1), (b0, b1) = regions[i], regions[i + 1]
            gap = b0 - a1
            if ((a1 - a0) + (b1 - b0)) / gap >= merge_ratio:
                regions[i] = [a0, b1]
                del regions[i + 1]
                changed = True
            else:
                i += 1
    flags = np.zeros(len(mask), dtype=bool)
    for a, b in regions:
        flags[a:b] = True
    return MarkMask(flags)


def window_mark_proportion(mask: MarkMask, meta_window_s: float, rate: float) -> np.ndarray:
    """Marked fraction of each consecutive meta-window; the tail window uses its own length."""
    m = _window_len(meta_window_s, rate)
    f = mask.flags.astype(np.float64)
    n = len(f)
    if n == 0:
        return np.zeros(0)
    edges = np.arange(0, n, m)
    sums = np.add.reduceat(f, edges)
    lengths = np.diff(np.append(edges, n))
    return sums / lengths


def sampling_distribution(mask: MarkMask, cfg: PreprocessConfig, rate: float) -> np.ndarray:
    """Probability of each meta-window: (marked proportion + alpha), normalised.

    Meta-windows shorter than one sample window get zero mass.
    """
    props = window_mark_proportion(mask, cfg.meta_window_s, rate)
    m = _window_len(cfg.meta_window_s, rate)
    w = _window_len(cfg.window_s, rate)
    n = len(mask)
    lengths = np.minimum(m, n - np.arange(len(props)) * m)
    weights = np.where(lengths >= w, props + cfg.smoothing_alpha, 0.0)
    total = weights.sum()
    if total <= 0:
        raise CapacityError("no meta-window can host a test window (all weights zero)")
    return weights / total


def sample_test_windows(record: WaveformRecord, mask: MarkMask, cfg: PreprocessConfig,
                        max_attempts_per_window: int = 2000) -> list[int]:
    """Draw non-overlapping test window starts, biased towards marked meta-windows."""
    rate = record.sampling_rate
    n = len(record)
    w = _window_len(cfg.window_s, rate)
    m = _window_len(cfg.meta_window_s, rate)
    if n // w < cfg.test_count:
        raise CapacityError(f"record holds at most {n // w} windows, {cfg.test_count} requested")
    probs = sampling_distribution(mask, cfg, rate)
    rng = np.random.default_rng([cfg.seed, 2])
    taken = np.zeros(n, dtype=bool)
    starts: list[int] = []
    attempts = 0
    limit = max_attempts_per_window * max(cfg.test_count, 1)
    while len(starts) < cfg.test_count:
        attempts += 1
        if attempts > limit:
            raise CapacityError(f"placed only {len(starts)} of {cfg.test_count} non-overlapping test windows")
        j = int(rng.choice(len(probs), p=probs))
        lo = j * m
        hi = min(lo + m, n) - w
        s = int(rng.integers(lo, hi + 1))
        if taken[s:s + w].any():
            continue
        taken[s:s + w] = True
        starts.append(s)
    return sorted(starts)


def eligible_windows(record: WaveformRecord, mask: MarkMask, test_starts, window_len: int) -> list[int]:
    """Starts of non-overlapping windows tiled from the start of every free run.

    A run is a maximal stretch with no marks, no test window, no missing
    point and no segment boundary inside it.
    """
    n = len(record)
    blocked = mask.flags | record.missing_mask
    for s in test_starts:
        blocked[s:s + window_len] = True
    free = ~blocked
    starts = []
    bounds = sorted(set(record.segment_starts[1:]))
    for a, b in regions_from_flags(free):
        cuts = [a] + [c for c in bounds if a < c < b] + [b]
        for lo, hi in zip(cuts, cuts[1:]):
            starts.extend(range(lo, hi - window_len + 1, window_len))
    return starts


def build_datasets(record: WaveformRecord, mask: MarkMask, test_starts, cfg: PreprocessConfig,
                   labels: MarkMask | None = None) -> DatasetBundle:
    """Tile clean windows, shuffle, split, standardise; extract labelled test windows.

    ``labels`` (when given) fills the per-timepoint annotation slot of each test window.
    """
    rate = record.sampling_rate
    w = _window_len(cfg.window_s, rate)
    test_starts = sorted(int(s) for s in test_starts)
    for a, b in zip(test_starts, test_starts[1:]):
        if b < a + w:
            raise ValueError("test windows overlap")
    starts = eligible_windows(record, mask, test_starts, w)
    rng = np.random.default_rng([cfg.seed, 3])
    order = rng.permutation(len(starts))
    starts = [starts[i] for i in order]
    n_train = int(round(cfg.split_ratio * len(starts)))
    train_starts, val_starts = starts[:n_train], starts[n_train:]
    x = record.values
    train_raw = np.stack([x[s:s + w] for s in train_starts]) if train_starts else np.empty((0, w))
    if train_raw.size == 0:
        raise DegenerateDataError("no eligible training windows")
    mean = float(train_raw.mean())
    sd = float(train_raw.std())
    if not sd > 0:
        raise DegenerateDataError("training data has zero standard deviation")

    def std(v):
        return (v - mean) / sd

    train = [WindowSample(std(x[s:s + w]), s) for s in train_starts]
    validation = [WindowSample(std(x[s:s + w]), s) for s in val_starts]
    test = []
    for s in test_starts:
        raw = x[s:s + w]
        vals = np.where(record.missing_mask[s:s + w] | np.isnan(raw), SENTINEL, std(np.nan_to_num(raw)))
        tl = labels.flags[s:s + w].copy() if labels is not None else None
        test.append(WindowSample(vals, s, timepoint_label=tl))
    meta = {"seed": cfg.seed, "config_hash": config_hash(cfg), "config": asdict(cfg),
            "sampling_rate": rate}
    return DatasetBundle(train, validation, test, (mean, sd), w, meta)


def preprocess(record: WaveformRecord, cfg: PreprocessConfig, annotations: MarkMask | None = None,
               labels: MarkMask | None = None) -> tuple[MarkMask, list[int], DatasetBundle]:
    """Mark, merge, sample the test set and build the datasets in one go."""
    marked = merge_marked_regions(mark_abnormal(record, cfg, annotations), cfg.merge_ratio)
    test_starts = sample_test_windows(record, marked, cfg)
    bundle = build_datasets(record, marked, test_starts, cfg, labels)
    return marked, test_starts, bundle


# ---------------------------------------------------------------------------
# persistence


def save_bundle(bundle: DatasetBundle, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, arr):
        p = d / name
        np.save(p, arr, allow_pickle=False)
        written.append(p)

    for split in ("train", "validation", "test"):
        put(f"{split}.npy", bundle.matrix(split).astype("<f8"))
        put(f"{split}_starts.npy", np.array([w.source_start for w in getattr(bundle, split)], dtype="<i8"))
    if bundle.test and bundle.test[0].timepoint_label is not None:
        put("test_labels.npy", np.stack([w.timepoint_label for w in bundle.test]))
    manifest = {
        "counts": {s: len(getattr(bundle, s)) for s in ("train", "validation", "test")},
        "standardizer": {"mean": bundle.standardizer[0], "sd": bundle.standardizer[1]},
        "window_length": bundle.window_length,
        **bundle.meta,
    }
    p = d / "bundle.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    written.append(p)
    return written


def load_bundle(directory) -> DatasetBundle:
    d = Path(directory)
    manifest = json.loads((d / "bundle.json").read_text())
    splits = {}
    labels = np.load(d / "test_labels.npy") if (d / "test_labels.npy").exists() else None
    for split in ("train", "validation", "test"):
        arr = np.load(d / f"{split}.npy")
        starts = np.load(d / f"{split}_starts.npy")
        rows = []
        for i, (v, s) in enumerate(zip(arr, starts)):
            tl = labels[i] if split == "test" and labels is not None else None
            rows.append(WindowSample(v, int(s), timepoint_label=tl))
        splits[split] = rows
    st = manifest.pop("standardizer")
    manifest.pop("counts", None)
    wl = manifest.pop("window_length")
    return DatasetBundle(splits["train"], splits["validation"], splits["test"], (st["mean"], st["sd"]), wl, manifest)
