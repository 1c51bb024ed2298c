"""Waveform records, mark masks and their on-disk formats.

Text waveform format: a ``t,v`` header then one ``seconds,value`` row per grid
point; missing points carry an empty value field.  The run of missing points
directly before a segment start is not written, so the time gap between rows
is what encodes the segment boundary on re-parse.

Binary waveform format (little-endian)::

    4s  magic b"DCWF"
    H   version (1)
    H   reserved (0)
    f   sampling rate, Hz
    I   length N
    N x f4 values (NaN = missing)
    I   segment count S, then S x I segment start indices

Mask format: a ``length=<N>`` line then one ``start_index,end_index`` row per region.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

BINARY_MAGIC = b"DCWF"
BINARY_VERSION = 1
_BIN_HEADER = struct.Struct("<4sHHfI")


class WaveformParseError(ValueError):
    """Malformed row in a waveform text stream."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TimestampOrderError(WaveformParseError):
    pass


class RegionBoundsError(ValueError):
    pass


@dataclass
class WaveformRecord:
    values: np.ndarray
    sampling_rate: float = 125.0
    segment_starts: list[int] = field(default_factory=lambda: [0])
    missing_mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.missing_mask is None:
            self.missing_mask = np.isnan(self.values)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.values.shape == self.missing_mask.shape and self.missing_mask.any():
            self.values = np.where(self.missing_mask, np.nan, self.values)
        self.segment_starts = [int(s) for s in self.segment_starts]
        if self.values.shape != self.missing_mask.shape:
            raise ValueError("values and missing_mask must have equal length")
        if not self.sampling_rate > 0:
            raise ValueError("sampling_rate must be positive")
        if len(self.values) and (not self.segment_starts or self.segment_starts[0] != 0):
            raise ValueError("segment_starts must begin at 0")
        if any(b <= a for a, b in zip(self.segment_starts, self.segment_starts[1:])):
            raise ValueError("segment_starts must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def duration(self) -> float:
        return len(self.values) / self.sampling_rate

    def copy(self) -> "WaveformRecord":
        return WaveformRecord(self.values.copy(), self.sampling_rate, list(self.segment_starts), self.missing_mask.copy())


@dataclass
class MarkMask:
    flags: np.ndarray

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)

    @property
    def regions(self) -> list[tuple[int, int]]:
        return regions_from_flags(self.flags)

    def __len__(self) -> int:
        return len(self.flags)

    def __or__(self, other: "MarkMask") -> "MarkMask":
        return MarkMask(self.flags | other.flags)


def regions_from_flags(flags: np.ndarray) -> list[tuple[int, int]]:
    """Sorted, disjoint ``(start, end_exclusive)`` runs of true values."""
    f = np.asarray(flags, dtype=np.int8)
    if f.size == 0:
        return []
    d = np.diff(np.concatenate(([0], f, [0])))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def mask_from_regions(regions: Iterable[tuple[int, int]], length: int) -> MarkMask:
    flags = np.zeros(length, dtype=bool)
    for start, end in regions:
        if start < 0 or end > length or start > end:
            raise RegionBoundsError(f"region ({start}, {end}) outside [0, {length})")
        flags[start:end] = True
    return MarkMask(flags)


# ---------------------------------------------------------------------------
# text waveform


def parse_waveform(stream: TextIO | str, expected_rate: float = 125.0, gap_factor: float = 1.5) -> WaveformRecord:
    """Read ``timestamp,value`` rows onto the uniform grid of ``expected_rate``.

    Each row goes to its nearest grid point (grid anchored at the first
    timestamp).  A time step between consecutive rows larger than
    ``gap_factor / expected_rate`` starts a new segment.  Grid points that
    receive no row, or a row with an empty value, are missing.
    """
    if gap_factor <= 1:
        raise ValueError("gap_factor must exceed 1")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    times: list[float] = []
    vals: list[float] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if lineno == 1 and parts[0].strip().lower() in ("t", "time", "timestamp"):
            continue
        if len(parts) != 2:
            raise WaveformParseError(lineno, f"expected 2 fields, got {len(parts)}")
        try:
            t = float(parts[0])
            v = float(parts[1]) if parts[1].strip() else math.nan
        except ValueError:
            raise WaveformParseError(lineno, f"non-numeric field in {line!r}") from None
        if not math.isfinite(t):
            raise WaveformParseError(lineno, "non-finite timestamp")
        if times and t <= times[-1]:
            raise TimestampOrderError(lineno, f"timestamp {t} does not increase (previous {times[-1]})")
        times.append(t)
        vals.append(v)
    if not times:
        return WaveformRecord(np.empty(0), expected_rate, [], np.empty(0, dtype=bool))
    t = np.asarray(times)
    v = np.asarray(vals)
    idx = np.rint((t - t[0]) * expected_rate).astype(np.int64)
    length = int(idx[-1]) + 1
    values = np.full(length, np.nan)
    # nearest row wins when two rows round to one grid point
    err = np.abs((t - t[0]) * expected_rate - idx)
    order = np.lexsort((-err, idx))
    values[idx[order]] = v[order]
    missing = np.isnan(values)
    gaps = np.flatnonzero(np.diff(t) > gap_factor / expected_rate)
    starts = [0] + [int(idx[g + 1]) for g in gaps]
    return WaveformRecord(values, expected_rate, sorted(set(starts)), missing)


def format_waveform(record: WaveformRecord) -> str:
    out = ["t,v"]
    seg_starts = set(record.segment_starts[1:])
    skip = np.zeros(len(record), dtype=bool)
    for s in seg_starts:
        j = s - 1
        while j >= 0 and record.missing_mask[j]:
            skip[j] = True
            j -= 1
        if j == s - 1:
            raise ValueError(f"segment start {s} has no preceding gap and cannot be written as text")
    rate = record.sampling_rate
    for i, (value, missing) in enumerate(zip(record.values.tolist(), record.missing_mask.tolist())):
        if skip[i]:
            continue
        t = repr(round(i / rate, 9))
        out.append(f"{t}," if missing else f"{t},{value!r}")
    return "\n".join(out) + "\n"


def write_waveform(record: WaveformRecord, path) -> None:
    Path(path).write_text(format_waveform(record))


def read_waveform(path, expected_rate: float = 125.0, gap_factor: float = 1.5) -> WaveformRecord:
    path = Path(path)
    if path.suffix == ".bin":
        return read_waveform_binary(path)
    with path.open() as fh:
        return parse_waveform(fh, expected_rate, gap_factor)


# ---------------------------------------------------------------------------
# binary waveform


def write_waveform_binary(record: WaveformRecord, path) -> None:
    vals = np.where(record.missing_mask, np.nan, record.values).astype("<f4")
    starts = np.asarray(record.segment_starts, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(_BIN_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, 0, record.sampling_rate, len(vals)))
        fh.write(vals.tobytes())
        fh.write(struct.pack("<I", len(starts)))
        fh.write(starts.tobytes())


def read_waveform_binary(path) -> WaveformRecord:
    data = Path(path).read_bytes()
    if len(data) < _BIN_HEADER.size:
        raise ValueError("binary waveform truncated")
    magic, version, _, rate, n = _BIN_HEADER.unpack_from(data)
    if magic != BINARY_MAGIC:
        raise ValueError("not a binary waveform file")
    if version != BINARY_VERSION:
        raise ValueError(f"unsupported binary waveform version {version}")
    off = _BIN_HEADER.size
    vals = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64)
    off += 4 * n
    (s,) = struct.unpack_from("<I", data, off)
    starts = np.frombuffer(data, dtype="<u4", count=s, offset=off + 4).tolist()
    return WaveformRecord(vals, float(rate), starts, np.isnan(vals))


# ---------------------------------------------------------------------------
# masks


def write_mask(mask: MarkMask, path) -> None:
    lines = [f"length={len(mask)}"] + [f"{a},{b}" for a, b in mask.regions]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask(path) -> MarkMask:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("length="):
        raise ValueError("mask file must start with 'length=<N>'")
    length = int(lines[0].split("=", 1)[1])
    regions = []
    for ln in lines[1:]:
        a, b = ln.split(",")
        regions.append((int(a), int(b)))
    return mask_from_regions(regions, length)
