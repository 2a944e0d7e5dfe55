"""GCT record ingest: parsing, de-duplication, spatial/temporal binning,
normalisation and windowing into model-ready samples."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, FormatError, IngestError

log = logging.getLogger(__name__)

RECORDS_HEADER = ["imei_hash", "lat", "lon", "timestamp", "type"]
SEGMENTS_HEADER = ["id", "min_lat", "min_lon", "max_lat", "max_lon"]
FLOWS_HEADER = ["timestamp", "segment_id", "v_gct", "p_gct", "s_gct"]
STD_FLOOR = 1e-6
MAX_REJECT_FRACTION = 0.01
SEGMENT_DIAGONAL_M = 20.0 * math.sqrt(2.0)


class FlowType(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    STATIONARY = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "FlowType":
        return cls[text.strip().upper()]


@dataclass(frozen=True)
class GctRecord:
    imei_hash: str
    lat: float
    lon: float
    timestamp: float
    flow_type: FlowType

    def __post_init__(self):
        if not self.imei_hash:
            raise ValueError("empty imei_hash")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range")


class Reject(NamedTuple):
    line: int
    row: list
    reason: str


@dataclass(frozen=True)
class Segment:
    id: int
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    def __post_init__(self):
        if not (self.min_lat < self.max_lat and self.min_lon < self.max_lon):
            raise ConfigError(f"segment {self.id}: box min must be below max on both axes")

    @property
    def centroid(self) -> tuple[float, float]:
        return (0.5 * (self.min_lat + self.max_lat), 0.5 * (self.min_lon + self.max_lon))

    def diagonal_m(self) -> float:
        from .graphs import haversine_m

        return float(haversine_m(self.min_lat, self.min_lon, self.max_lat, self.max_lon))

    def contains(self, lat, lon):
        return (lat >= self.min_lat) & (lat < self.max_lat) & (lon >= self.min_lon) & (lon < self.max_lon)


def check_segment_size(seg: Segment, factor: float = 3.0) -> bool:
    diag = seg.diagonal_m()
    return SEGMENT_DIAGONAL_M / factor <= diag <= SEGMENT_DIAGONAL_M * factor


# -- timestamps -----------------------------------------------------------------

def parse_timestamp(text: str) -> float:
    """ISO-8601 with an explicit zone (``Z`` or offset) -> UTC epoch seconds."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp {text!r} has no time zone")
    return dt.timestamp()


def format_timestamp(seconds: float) -> str:
    return datetime.fromtimestamp(seconds, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# -- records ------------------------------------------------------------------

def parse_records(csv_path) -> tuple[list[GctRecord], list[Reject]]:
    """Read a records CSV.

    Returns the valid records and a rejects report (line number, raw row,
    reason).  Raises :class:`IngestError` when more than 1% of rows are
    malformed.
    """
    records: list[GctRecord] = []
    rejects: list[Reject] = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RECORDS_HEADER:
            raise FormatError(f"{csv_path}: expected header {','.join(RECORDS_HEADER)!r}, got {header!r}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != 5:
                    raise ValueError(f"expected 5 fields, got {len(row)}")
                records.append(GctRecord(row[0].strip(), float(row[1]), float(row[2]),
                                         parse_timestamp(row[3]), FlowType.parse(row[4])))
            except (ValueError, KeyError) as exc:
                rejects.append(Reject(line, row, str(exc)))
    total = len(records) + len(rejects)
    if total and len(rejects) / total > MAX_REJECT_FRACTION:
        raise IngestError(f"{csv_path}: {len(rejects)} of {total} rows malformed")
    if rejects:
        log.warning("%s: %d malformed rows rejected", csv_path, len(rejects))
    return records, rejects


def write_records(path, records: Iterable[GctRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORDS_HEADER)
        for r in records:
            w.writerow([r.imei_hash, f"{r.lat:.6f}", f"{r.lon:.6f}", format_timestamp(r.timestamp),
                        r.flow_type.label])


def dedup(records: Sequence[GctRecord]) -> list[GctRecord]:
    """Keep the first record per (imei_hash, timestamp); order is preserved."""
    seen = set()
    out = []
    for r in records:
        key = (r.imei_hash, r.timestamp)
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


# -- segments -----------------------------------------------------------------

def read_segments(path, check_size: bool = True) -> list[Segment]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SEGMENTS_HEADER:
            raise FormatError(f"{path}: expected header {','.join(SEGMENTS_HEADER)!r}")
        segs = [Segment(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in reader if r]
    if check_size:
        bad = [s.id for s in segs if not check_segment_size(s)]
        if bad:
            raise ConfigError(f"segments {bad} are not roughly 20 m x 20 m")
    return segs


def write_segments(path, segments: Iterable[Segment]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEGMENTS_HEADER)
        for s in segments:
            w.writerow([s.id, f"{s.min_lat:.7f}", f"{s.min_lon:.7f}", f"{s.max_lat:.7f}", f"{s.max_lon:.7f}"])


# -- flows --------------------------------------------------------------------

@dataclass
class FlowDataset:
    flows: np.ndarray  # [3, N, T] in type order V, P, S
    interval_seconds: int
    start_timestamp: float
    segment_ids: list
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    @property
    def n_segments(self) -> int:
        return self.flows.shape[1]

    @property
    def n_intervals(self) -> int:
        return self.flows.shape[2]

    @property
    def end_timestamp(self) -> float:
        return self.start_timestamp + self.n_intervals * self.interval_seconds

    def interval_starts(self) -> np.ndarray:
        return self.start_timestamp + self.interval_seconds * np.arange(self.n_intervals)


def bin_flows(records: Sequence[GctRecord], segments: Sequence[Segment], interval_seconds: int = 300,
              start: float = 0.0, end: float | None = None) -> FlowDataset:
    """Count records per (type, segment, interval).

    Intervals are half-open ``[start + k*dt, start + (k+1)*dt)``; box membership
    includes the min edges and excludes the max edges.  Records outside every
    box or the time range are ignored; overlapping boxes each count a record.
    """
    if not segments:
        raise ConfigError("bin_flows needs at least one segment")
    if end is None or end <= start:
        raise ConfigError(f"need start < end, got {start}, {end}")
    if interval_seconds <= 0 or (end - start) % interval_seconds:
        raise ConfigError(f"interval {interval_seconds}s does not divide the span {end - start}s")
    n_t = int((end - start) // interval_seconds)
    flows = np.zeros((3, len(segments), n_t))
    if records:
        lat = np.fromiter((r.lat for r in records), float, len(records))
        lon = np.fromiter((r.lon for r in records), float, len(records))
        ts = np.fromiter((r.timestamp for r in records), float, len(records))
        kind = np.fromiter((int(r.flow_type) for r in records), np.int64, len(records))
        in_time = (ts >= start) & (ts < end)
        slot = np.floor((ts - start) / interval_seconds).astype(np.int64)
        for j, seg in enumerate(segments):
            m = in_time & seg.contains(lat, lon)
            if m.any():
                idx = kind[m] * n_t + slot[m]
                flows[:, j, :] += np.bincount(idx, minlength=3 * n_t).reshape(3, n_t)
    return FlowDataset(flows, int(interval_seconds), float(start), [s.id for s in segments])


def write_flows(path, dataset: FlowDataset) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLOWS_HEADER)
        times = dataset.interval_starts()
        for k in range(dataset.n_intervals):
            stamp = format_timestamp(times[k])
            for j, sid in enumerate(dataset.segment_ids):
                v, p, s = dataset.flows[:, j, k]
                w.writerow([stamp, sid, _num(v), _num(p), _num(s)])
    meta = {"interval_seconds": dataset.interval_seconds,
            "start_timestamp": dataset.start_timestamp,
            "segment_ids": [int(i) for i in dataset.segment_ids]}
    meta_path(path).write_text(json.dumps(meta, indent=2))


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def meta_path(flows_path) -> Path:
    p = Path(flows_path)
    return p.with_name(p.stem + ".meta.json")


def read_flows(path) -> FlowDataset:
    path = Path(path)
    meta = json.loads(meta_path(path).read_text())
    ids = [int(i) for i in meta["segment_ids"]]
    col = {sid: j for j, sid in enumerate(ids)}
    dt = int(meta["interval_seconds"])
    t0 = float(meta["start_timestamp"])
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != FLOWS_HEADER:
            raise FormatError(f"{path}: expected header {','.join(FLOWS_HEADER)!r}")
        for r in reader:
            if r:
                rows.append(r)
    ks = np.array([round((parse_timestamp(r[0]) - t0) / dt) for r in rows], dtype=np.int64)
    n_t = int(ks.max()) + 1 if len(ks) else 0
    flows = np.zeros((3, len(ids), n_t))
    for r, k in zip(rows, ks):
        j = col[int(r[1])]
        flows[:, j, k] = (float(r[2]), float(r[3]), float(r[4]))
    return FlowDataset(flows, dt, t0, ids)


# -- normalisation --------------------------------------------------------------

class FlowScaler(TransformerMixin, BaseEstimator):
    """Z-score per (type, segment).

    Works on any array whose axes ``-3, -2`` are (type, segment), e.g. a flow
    tensor ``[3, N, T]`` or sample windows ``[B, 3, N, T]``.  Statistics reduce
    over every other axis; standard deviations are floored at ``std_floor``.
    """

    def __init__(self, std_floor: float = STD_FLOOR):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim < 3:
            raise ConfigError(f"FlowScaler expects [..., types, segments, time], got {X.shape}")
        flat = np.moveaxis(X, (-3, -2), (0, 1)).reshape(X.shape[-3], X.shape[-2], -1)
        self.mean_ = flat.mean(axis=2)
        self.std_ = np.maximum(flat.std(axis=2), self.std_floor)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=float)
        return (X - self.mean_[..., None]) / self.std_[..., None]

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=float)
        return X * self.std_[..., None] + self.mean_[..., None]


def split_lengths(n_total: int, split: tuple[float, float, float] = (0.7, 0.2, 0.1)) -> tuple[int, int, int]:
    """Chronological split sizes: train and validation floored, remainder to test."""
    if abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {split}")
    n_train = int(math.floor(split[0] * n_total + 1e-9))
    n_val = int(math.floor(split[1] * n_total + 1e-9))
    return n_train, n_val, n_total - n_train - n_val


def normalize(dataset: FlowDataset, split=(0.7, 0.2, 0.1)) -> tuple[FlowDataset, FlowScaler]:
    """Z-score the flows with statistics from the training portion only."""
    n_train, _, _ = split_lengths(dataset.n_intervals, split)
    scaler = FlowScaler().fit(dataset.flows[:, :, :n_train])
    out = replace(dataset, flows=scaler.transform(dataset.flows),
                  norm_mean=scaler.mean_.copy(), norm_std=scaler.std_.copy())
    return out, scaler


# -- windowing ----------------------------------------------------------------

@dataclass
class SampleSet:
    inputs: np.ndarray   # [B, 3, N, t_in] raw counts
    targets: np.ndarray  # [B, N, t_out] raw V-GCT counts
    split_tag: str
    start_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    interval_seconds: int = 300
    start_timestamp: float = 0.0

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def t_in(self) -> int:
        return self.inputs.shape[-1]

    def target_slots(self, slots_per_day: int | None = None) -> np.ndarray:
        """Time-of-day slot for each target step, shape [B, t_out]."""
        if slots_per_day is None:
            slots_per_day = 86400 // self.interval_seconds
        t_out = self.targets.shape[-1]
        offset = int(round(self.start_timestamp / self.interval_seconds))
        idx = self.start_index[:, None] + self.t_in + np.arange(t_out)[None, :]
        return (idx + offset) % slots_per_day

    def subset(self, index) -> "SampleSet":
        return replace(self, inputs=self.inputs[index], targets=self.targets[index],
                       start_index=self.start_index[index])


def make_samples(dataset: FlowDataset, t_in: int = 12, t_out: int = 12,
                 split=(0.7, 0.2, 0.1)) -> tuple[SampleSet, SampleSet, SampleSet]:
    """Stride-1 windows inside each chronological split (none straddle a boundary)."""
    total = dataset.n_intervals
    width = t_in + t_out
    if total < width:
        raise ConfigError(f"need at least {width} intervals, got {total}")
    lengths = split_lengths(total, split)
    flows = dataset.flows
    out = []
    begin = 0
    for tag, length in zip(("train", "val", "test"), lengths):
        n = max(length - width + 1, 0)
        n_seg = flows.shape[1]
        if n == 0:
            warnings.warn(f"{tag} split of length {length} is shorter than a {width}-step window; no samples")
            inputs = np.zeros((0, 3, n_seg, t_in))
            targets = np.zeros((0, n_seg, t_out))
        else:
            starts = begin + np.arange(n)
            idx = starts[:, None] + np.arange(width)[None, :]
            win = flows[:, :, idx]                     # [3, N, B, width]
            win = np.transpose(win, (2, 0, 1, 3))      # [B, 3, N, width]
            inputs = np.ascontiguousarray(win[..., :t_in])
            targets = np.ascontiguousarray(win[:, 0, :, t_in:])
        out.append(SampleSet(inputs, targets, tag, begin + np.arange(n, dtype=np.int64),
                             dataset.interval_seconds, dataset.start_timestamp))
        begin += length
    return tuple(out)
