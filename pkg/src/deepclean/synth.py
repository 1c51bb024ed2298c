"""Deterministic synthetic ABP-like waveforms with labelled injected artefacts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .kvconfig import ConfigError
from .signal_io import MarkMask, WaveformRecord

ARTEFACT_KINDS = ("flush", "attenuation", "overdamping", "noise_burst", "static_line", "spike_train")


class ArtefactOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class PulseTemplateParams:
    period: float = 0.8
    systolic_amp: float = 40.0
    diastolic_base: float = 72.0
    notch_depth: float = 5.0
    notch_phase: float = 0.36
    respiratory_mod_amp: float = 3.0
    respiratory_period: float = 4.0
    noise_sd: float = 0.5
    drift_sd: float = 0.3
    jitter: float = 0.02
    drift_reversion: float = 0.995

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.systolic_amp <= 0:
            raise ValueError("systolic_amp must be positive")
        if not 0 < self.notch_phase < 1:
            raise ValueError("notch_phase must lie in (0, 1)")
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must lie in [0, 0.5)")


@dataclass(frozen=True)
class ArtefactSpec:
    kind: str
    start: int
    duration: int
    severity: float = 1.0

    def __post_init__(self):
        if self.kind not in ARTEFACT_KINDS:
            raise ValueError(f"unknown artefact kind {self.kind!r}")
        if self.duration < 1:
            raise ValueError("duration must be >= 1")
        if not 0 < self.severity <= 1:
            raise ValueError("severity must lie in (0, 1]")

    @property
    def end(self) -> int:
        return self.start + self.duration


def _lognormal_bump(phase: np.ndarray, peak: float, width: float) -> np.ndarray:
    out = np.zeros_like(phase)
    pos = phase > 0
    out[pos] = np.exp(-np.log(phase[pos] / peak) ** 2 / (2 * width * width))
    return out


def beat_shape(phase: np.ndarray, params: PulseTemplateParams) -> np.ndarray:
    """Pressure above diastolic base (mmHg) at beat phase in [0, 1); zero at both ends."""
    phase = np.asarray(phase, dtype=np.float64)
    grid = np.concatenate([phase, [1.0]])

    def raw(p):
        return (_lognormal_bump(p, 0.12, 0.42)
                + 0.42 * _lognormal_bump(p, params.notch_phase + 0.09, 0.14)
                + 0.22 * _lognormal_bump(p, 0.55, 0.45))

    r = raw(grid)
    r = r - grid * r[-1]
    ref = np.linspace(0, 1, 2001)
    rr = raw(ref)
    scale = np.max(rr - ref * rr[-1])
    notch = np.exp(-0.5 * ((phase - params.notch_phase) / 0.028) ** 2)
    return params.systolic_amp * r[:-1] / scale - params.notch_depth * notch


def generate_clean(params: PulseTemplateParams, duration_s: float, rate: float = 125.0, seed=None) -> WaveformRecord:
    """Beat template + respiratory sinusoid + mean-reverting per-beat drift + white noise."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    n_beats = int(math.ceil(duration_s / (params.period * (1 - params.jitter)))) + 2
    periods = params.period * (1 + params.jitter * rng.uniform(-1, 1, n_beats))
    onsets = np.concatenate([[0.0], np.cumsum(periods)])
    offset = rng.uniform(0, params.period)
    onsets = onsets - offset
    k = np.searchsorted(onsets, t, side="right") - 1
    phase = (t - onsets[k]) / periods[k]
    drift = np.zeros(n_beats + 1)
    if params.drift_sd > 0:
        steps = params.drift_sd * rng.standard_normal(n_beats + 1)
        for i in range(1, n_beats + 1):
            drift[i] = params.drift_reversion * drift[i - 1] + steps[i]
    level = np.interp(t, onsets, drift)
    resp_phase = rng.uniform(0, 2 * np.pi)
    resp = params.respiratory_mod_amp * np.sin(2 * np.pi * t / params.respiratory_period + resp_phase)
    noise = params.noise_sd * rng.standard_normal(n) if params.noise_sd > 0 else 0.0
    values = params.diastolic_base + beat_shape(phase, params) + level + resp + noise
    return WaveformRecord(values, rate, [0])


def _lowpass(x: np.ndarray, cutoff: float, rate: float, order: int = 2) -> np.ndarray:
    sos = butter(order, cutoff, fs=rate, output="sos")
    if len(x) <= 3 * (2 * len(sos) + 1):
        return np.full_like(x, x.mean())
    return sosfiltfilt(sos, x)


def _local_mean(values: np.ndarray, start: int, end: int, rate: float) -> np.ndarray:
    """Beat-averaged level over [start, end) from a zero-phase 0.5 Hz low-pass with context."""
    pad = int(2.5 * rate)
    a, b = max(0, start - pad), min(len(values), end + pad)
    seg = values[a:b]
    seg = np.where(np.isnan(seg), np.nanmean(seg), seg)
    return _lowpass(seg, 0.5, rate)[start - a:end - a]


def inject_artefact(record: WaveformRecord, spec: ArtefactSpec, seed=None,
                    existing: MarkMask | None = None) -> tuple[WaveformRecord, MarkMask]:
    """Apply one artefact to a copy of ``record``; the mask is true exactly on [start, start + duration)."""
    n = len(record)
    if spec.start < 0 or spec.end > n:
        raise ValueError(f"artefact [{spec.start}, {spec.end}) outside record of length {n}")
    if existing is not None and existing.flags[spec.start:spec.end].any():
        raise ArtefactOverlapError(f"artefact [{spec.start}, {spec.end}) overlaps a marked region")
    rng = np.random.default_rng(seed)
    out = record.copy()
    x = out.values
    a, b, sev, rate = spec.start, spec.end, spec.severity, record.sampling_rate
    seg = x[a:b].copy()
    if spec.kind == "flush":
        plateau = 300.0 * sev
        u = (np.arange(spec.duration) + 0.5) / spec.duration
        w = np.ones(spec.duration)
        w[u < 0.1] = u[u < 0.1] / 0.1
        tail = u > 0.6
        w[tail] = np.exp(-(u[tail] - 0.6) / 0.4 * 5.0)
        x[a:b] = w * plateau + (1 - w) * seg
    elif spec.kind == "attenuation":
        mean = _local_mean(x, a, b, rate)
        x[a:b] = mean - 15.0 * sev + (1 - sev) * (seg - mean)
    elif spec.kind == "overdamping":
        mean = _local_mean(x, a, b, rate)
        x[a:b] = mean + (1 - sev) * _lowpass(seg - mean, 3.0, rate)
    elif spec.kind == "noise_burst":
        x[a:b] = seg + 20.0 * sev * rng.standard_normal(spec.duration)
    elif spec.kind == "static_line":
        x[a:b] = x[a]
    elif spec.kind == "spike_train":
        step = max(1, int(round(0.25 * rate)))
        pos = int(rng.integers(0, step))
        while pos < spec.duration:
            x[a + pos] += rng.choice((-1.0, 1.0)) * 100.0 * sev
            pos += step + int(rng.integers(-step // 8, step // 8 + 1))
    flags = np.zeros(n, dtype=bool)
    flags[a:b] = True
    out.values = x
    return out, MarkMask(flags)


@dataclass(frozen=True)
class CorpusConfig:
    duration_s: float = 7200.0
    rate: float = 125.0
    artefacts_per_hour: float = 12.0
    min_duration_s: float = 3.0
    max_duration_s: float = 11.0
    severity_min: float = 0.6
    severity_max: float = 1.0
    min_separation_s: float = 2.0
    episode_max: int = 1
    episode_gap_max_s: float = 8.0
    mix: dict = field(default_factory=lambda: {
        "flush": 0.25, "static_line": 0.2, "overdamping": 0.2,
        "attenuation": 0.15, "noise_burst": 0.1, "spike_train": 0.1,
    })
    template: PulseTemplateParams = field(default_factory=PulseTemplateParams)
    max_retries: int = 1000


@dataclass
class Corpus:
    record: WaveformRecord
    truth: MarkMask
    clean: WaveformRecord
    artefacts: list[ArtefactSpec]


def synthesize(config: CorpusConfig, seed=0) -> Corpus:
    """Clean record plus non-overlapping artefacts at uniform random positions.

    Artefacts come in episodes of 1..episode_max consecutive members separated
    by min_separation_s..episode_gap_max_s; the total count is fixed by the rate.
    """
    if config.artefacts_per_hour < 0:
        raise ConfigError("artefacts_per_hour must be >= 0")
    if not 0 < config.min_duration_s <= config.max_duration_s:
        raise ConfigError("need 0 < min_duration_s <= max_duration_s")
    kinds = [k for k in ARTEFACT_KINDS if config.mix.get(k, 0) > 0]
    unknown = set(config.mix) - set(ARTEFACT_KINDS)
    if unknown:
        raise ConfigError(f"unknown artefact kinds in mix: {sorted(unknown)}")
    root = np.random.SeedSequence(seed)
    clean_seq, place_seq, inject_seq = root.spawn(3)
    clean = generate_clean(config.template, config.duration_s, config.rate, np.random.default_rng(clean_seq))
    n = len(clean)
    count = int(round(config.artefacts_per_hour * config.duration_s / 3600.0))
    if count and not kinds:
        raise ConfigError("artefact mix has no positive weights")
    if config.episode_max < 1:
        raise ConfigError("episode_max must be >= 1")
    rng = np.random.default_rng(place_seq)
    sep = int(round(config.min_separation_s * config.rate))
    gap_max = max(sep, int(round(config.episode_gap_max_s * config.rate)))
    occupied = np.zeros(n, dtype=bool)
    specs: list[ArtefactSpec] = []
    weights = np.array([config.mix[k] for k in kinds], dtype=float) if kinds else None
    remaining = count
    while remaining:
        size = min(remaining, int(rng.integers(1, config.episode_max + 1)))
        members = []
        for _ in range(size):
            kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
            dur = int(round(rng.uniform(config.min_duration_s, config.max_duration_s) * config.rate))
            sev = float(rng.uniform(config.severity_min, config.severity_max))
            members.append((kind, dur, sev))
        gaps = rng.integers(sep, gap_max + 1, size=size - 1) if size > 1 else np.zeros(0, dtype=int)
        span = sum(d for _, d, _ in members) + int(gaps.sum())
        if span > n:
            raise ConfigError("artefact episode longer than the record")
        for _attempt in range(config.max_retries):
            start = int(rng.integers(0, n - span + 1))
            if not occupied[max(0, start - sep):start + span + sep].any():
                break
        else:
            raise ConfigError("cannot place artefacts without overlap; lower the rate or durations")
        pos = start
        for i, (kind, dur, sev) in enumerate(members):
            occupied[pos:pos + dur] = True
            specs.append(ArtefactSpec(kind, pos, dur, sev))
            pos += dur + (int(gaps[i]) if i < len(gaps) else 0)
        remaining -= size
    specs.sort(key=lambda s: s.start)
    record = clean.copy()
    truth = MarkMask(np.zeros(n, dtype=bool))
    inject_rngs = np.random.default_rng(inject_seq).integers(0, 2**63, size=len(specs))
    for spec, s in zip(specs, inject_rngs):
        record, mask = inject_artefact(record, spec, int(s), existing=truth)
        truth = truth | mask
    return Corpus(record, truth, clean, specs)


def build_corpus(config: CorpusConfig, seed=0) -> tuple[WaveformRecord, MarkMask]:
    corpus = synthesize(config, seed)
    return corpus.record, corpus.truth
