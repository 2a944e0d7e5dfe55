"""Synthetic GCT records with planted structure.

Intensities per (type, segment, interval) are built from:

* a 288-point daily curve per region kind (commute, residential, commercial);
* random vehicle platoons that start at a segment and travel downstream,
  arriving ``lag`` intervals later at the next segment (spatial signal);
  ``interior_platoon_share`` scales the onset rate on segments that have an
  upstream neighbour, so most bursts can be seen coming;
* on commercial segments, a latent activity process that drives pedestrian
  and stationary intensity now and vehicle intensity ``coupling_lag``
  intervals later (multivariate signal).

Records are then emitted per interval, either Poisson distributed or, in
deterministic mode, exactly ``round(intensity)`` of them.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (FlowType, GctRecord, Segment, format_timestamp, parse_timestamp,
                     write_segments)
from .errors import ConfigError

SLOTS_PER_DAY = 288
BASE_LAT = 24.78585
BASE_LON = 120.98825
BOX_DEG_LAT = 20.0 / 111_320.0
DEFAULT_START = parse_timestamp("2022-08-28T00:00:00Z")


class RegionKind(str, enum.Enum):
    COMMUTE = "commute"
    RESIDENTIAL = "residential"
    COMMERCIAL = "commercial"


def _bump(hours: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((hours - center) / width) ** 2)


def daily_curves(kind: RegionKind) -> np.ndarray:
    """``[3, 288]`` non-negative multipliers for V, P, S over one day."""
    h = np.arange(SLOTS_PER_DAY) * 24.0 / SLOTS_PER_DAY
    night = np.clip((h - 5.0) / 2.0, 0, 1) * np.clip((23.5 - h) / 1.5, 0, 1)
    if kind is RegionKind.COMMUTE:
        v = 0.04 + night * 0.16 + _bump(h, 8.0, 0.8) + _bump(h, 18.0, 0.9)
        p = 0.1 + 0.3 * night
        s = 0.1 + 0.3 * night
    elif kind is RegionKind.RESIDENTIAL:
        v = night * (0.25 + 0.5 * _bump(h, 7.5, 1.0) + 0.6 * _bump(h, 19.0, 1.5))
        p = night * (0.3 + 0.4 * _bump(h, 19.5, 1.5))
        s = night * (0.4 + 0.3 * _bump(h, 21.0, 1.5))
    else:
        day = np.clip((h - 9.5) / 1.5, 0, 1) * np.clip((22.5 - h) / 1.5, 0, 1)
        v = 0.05 + 0.5 * day + 0.3 * _bump(h, 12.5, 1.0) + 0.3 * _bump(h, 18.5, 1.2)
        p = 0.05 + 0.9 * day
        s = 0.05 + 0.9 * day
    return np.stack([v, p, s])


@dataclass
class RegionProfile:
    kind: RegionKind
    base_rates: tuple[float, float, float] = (24.0, 6.0, 8.0)
    noise_scale: float = 0.1
    daily_curve: np.ndarray | None = None

    def __post_init__(self):
        self.kind = RegionKind(self.kind)
        if self.daily_curve is None:
            self.daily_curve = daily_curves(self.kind)
        if min(self.base_rates) < 0 or (self.daily_curve < 0).any():
            raise ConfigError("intensities and daily curves must be non-negative")
        if self.daily_curve.shape != (3, SLOTS_PER_DAY):
            raise ConfigError(f"daily_curve must be [3, {SLOTS_PER_DAY}]")


@dataclass
class SynthConfig:
    n_segments: int = 8
    days: int = 14
    interval_seconds: int = 300
    topology: str = "chain"
    lag: int = 3
    spacing_m: float = 60.0
    platoon_rate: float = 0.04
    platoon_size: float = 1.0
    propagation_gain: float = 0.8
    coupling_lag: int = 4
    coupling_strength: float = 1.0
    activity_persistence: float = 0.9
    interior_platoon_share: float = 1.0
    deterministic: bool = False
    seed: int = 0
    start_timestamp: float = DEFAULT_START
    grid_cols: int = 4

    def __post_init__(self):
        if self.days < 1 or self.n_segments < 1:
            raise ConfigError("need at least one day and one segment")
        if self.lag < 0 or self.coupling_lag < 0:
            raise ConfigError("propagation lags must be non-negative")
        if self.topology not in ("chain", "grid"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.interval_seconds * SLOTS_PER_DAY != 86400:
            raise ConfigError("daily curves assume 300 s intervals")

    @property
    def n_intervals(self) -> int:
        return self.days * 86400 // self.interval_seconds


PRESETS = {
    "desk": dict(n_segments=8, days=14),
    "paper-scale": dict(n_segments=21, days=31),
    # strong planted structure, small enough for repeated training runs
    "planted": dict(n_segments=6, days=8, deterministic=True, lag=6, platoon_rate=0.1, platoon_size=2.0,
                    interior_platoon_share=0.2, activity_persistence=0.6, coupling_lag=6,
                    coupling_strength=2.0),
}


def default_profiles(n_segments: int) -> list[RegionProfile]:
    kinds = [RegionKind.COMMUTE, RegionKind.COMMERCIAL, RegionKind.RESIDENTIAL]
    return [RegionProfile(kinds[i % 3]) for i in range(n_segments)]


def upstream_of(config: SynthConfig) -> list[int | None]:
    n = config.n_segments
    if config.topology == "chain":
        return [None] + list(range(n - 1))
    cols = config.grid_cols
    return [None if j % cols == 0 else j - 1 for j in range(n)]


def layout_segments(config: SynthConfig) -> list[Segment]:
    """Axis-aligned ~20 m boxes on a line (chain) or a row-major grid."""
    dlat = BOX_DEG_LAT
    dlon = BOX_DEG_LAT / math.cos(math.radians(BASE_LAT))
    step_lat = config.spacing_m / 111_320.0
    step_lon = step_lat / math.cos(math.radians(BASE_LAT))
    segs = []
    for j in range(config.n_segments):
        if config.topology == "chain":
            r, c = 0, j
        else:
            r, c = divmod(j, config.grid_cols)
        lat0 = round(BASE_LAT + r * step_lat, 7)
        lon0 = round(BASE_LON + c * step_lon, 7)
        segs.append(Segment(j, lat0, lon0, round(lat0 + dlat, 7), round(lon0 + dlon, 7)))
    return segs


@dataclass
class RecordTable:
    """Columnar records: cheaper than one object per event at desk scale."""

    imei_hash: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    timestamp: np.ndarray
    flow_type: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamp)

    def to_records(self) -> list[GctRecord]:
        return [GctRecord(str(h), float(a), float(o), float(t), FlowType(int(k)))
                for h, a, o, t, k in zip(self.imei_hash, self.lat, self.lon, self.timestamp, self.flow_type)]

    def write_csv(self, path) -> None:
        labels = np.array([t.label for t in FlowType])
        stamps = _format_stamps(self.timestamp)
        with open(path, "w", newline="") as fh:
            fh.write("imei_hash,lat,lon,timestamp,type\n")
            lines = [f"{h},{a:.6f},{o:.6f},{s},{labels[k]}\n"
                     for h, a, o, s, k in zip(self.imei_hash, self.lat, self.lon, stamps, self.flow_type)]
            fh.writelines(lines)


def _format_stamps(ts: np.ndarray) -> list[str]:
    arr = np.asarray(ts).astype(np.int64).astype("datetime64[s]")
    return [s + "Z" for s in np.datetime_as_string(arr, unit="s")]


@dataclass
class SynthResult:
    config: SynthConfig
    segments: list[Segment]
    profiles: list[RegionProfile]
    intensity: np.ndarray      # [3, N, T] ground truth (after jitter, before sampling)
    counts: np.ndarray         # [3, N, T] emitted records per cell
    records: RecordTable
    upstream: list = field(default_factory=list)

    @property
    def start(self) -> float:
        return self.config.start_timestamp

    @property
    def end(self) -> float:
        return self.config.start_timestamp + self.config.n_intervals * self.config.interval_seconds

    def flow_graph(self):
        """Directed graph of the planted propagation (upstream -> downstream, with self loops)."""
        from .graphs import SegmentGraph

        n = len(self.segments)
        a = np.eye(n)
        for j, u in enumerate(self.upstream):
            if u is not None:
                a[u, j] = 1.0
        return SegmentGraph.from_adjacency(a, centroids=[s.centroid for s in self.segments],
                                           segment_ids=[s.id for s in self.segments])

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"records": out / "records.csv", "segments": out / "segments.csv",
                 "intensity": out / "intensity.csv"}
        self.records.write_csv(paths["records"])
        write_segments(paths["segments"], self.segments)
        write_intensity(paths["intensity"], self)
        return paths


def write_intensity(path, result: SynthResult) -> None:
    cfg = result.config
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "segment_id", "v_intensity", "p_intensity", "s_intensity"])
        for k in range(cfg.n_intervals):
            stamp = format_timestamp(cfg.start_timestamp + k * cfg.interval_seconds)
            for j, seg in enumerate(result.segments):
                w.writerow([stamp, seg.id, *(f"{x:.6g}" for x in result.intensity[:, j, k])])


def _platoons(rng, n_t: int, rate: float, size: float) -> np.ndarray:
    """Random bursts: onsets ~ Bernoulli(rate), 3-interval triangular shape."""
    onsets = (rng.random(n_t) < rate) * rng.uniform(0.5, 1.5, n_t) * size
    shape = np.array([0.6, 1.0, 0.6])
    return np.convolve(onsets, shape)[:n_t]


def _activity(rng, n_t: int, phi: float) -> np.ndarray:
    """Non-negative latent process (exponentiated AR(1) with persistence ``phi``)."""
    e = rng.normal(0.0, math.sqrt(1 - phi ** 2), n_t)
    z = np.empty(n_t)
    acc = 0.0
    for t in range(n_t):
        acc = phi * acc + e[t]
        z[t] = acc
    return np.exp(0.8 * z - 0.32)


def _shift(x: np.ndarray, lag: int) -> np.ndarray:
    if lag == 0:
        return x.copy()
    out = np.zeros_like(x)
    out[lag:] = x[:-lag]
    return out


def intensities(config: SynthConfig, profiles: list[RegionProfile],
                rng: np.random.Generator) -> np.ndarray:
    n, n_t = config.n_segments, config.n_intervals
    slot = np.arange(n_t) % SLOTS_PER_DAY
    lam = np.zeros((3, n, n_t))
    up = upstream_of(config)
    own_v = np.zeros((n, n_t))
    for j, prof in enumerate(profiles):
        base = np.asarray(prof.base_rates, dtype=float)[:, None] * prof.daily_curve[:, slot]
        lam[:, j] = base
        rate = config.platoon_rate * (1.0 if up[j] is None else config.interior_platoon_share)
        burst = _platoons(rng, n_t, rate, config.platoon_size)
        own_v[j] = burst * prof.base_rates[0] * (0.3 + prof.daily_curve[0, slot])
        if prof.kind is RegionKind.COMMERCIAL:
            z = _activity(rng, n_t, config.activity_persistence) * (0.2 + prof.daily_curve[1, slot])
            k = config.coupling_strength
            lam[1, j] += k * prof.base_rates[1] * z
            lam[2, j] += k * prof.base_rates[2] * z
            lam[0, j] += k * 0.5 * prof.base_rates[0] * _shift(z, config.coupling_lag)
    # platoons travel downstream, attenuated by the gain at every hop
    travelling = np.zeros((n, n_t))
    for j in range(n):
        travelling[j] = own_v[j]
        if up[j] is not None:
            travelling[j] += config.propagation_gain * _shift(travelling[up[j]], config.lag)
    lam[0] += travelling
    for j, prof in enumerate(profiles):
        if prof.noise_scale > 0:
            lam[:, j] *= rng.lognormal(-0.5 * prof.noise_scale ** 2, prof.noise_scale, (3, n_t))
    return lam


def generate(config: SynthConfig, profiles: list[RegionProfile] | None = None) -> SynthResult:
    """Draw records for every (type, segment, interval) cell."""
    if profiles is None:
        profiles = default_profiles(config.n_segments)
    if len(profiles) != config.n_segments:
        raise ConfigError(f"{len(profiles)} profiles for {config.n_segments} segments")
    rng = np.random.default_rng(config.seed)
    segments = layout_segments(config)
    lam = intensities(config, profiles, rng)
    if config.deterministic:
        lam = np.rint(lam)
        counts = lam.astype(np.int64)
    else:
        counts = rng.poisson(lam)
    records = _emit(config, segments, counts, rng)
    return SynthResult(config, segments, profiles, lam, counts, records, upstream_of(config))


def _emit(config: SynthConfig, segments: list[Segment], counts: np.ndarray,
          rng: np.random.Generator) -> RecordTable:
    dt = config.interval_seconds
    flat = counts.reshape(-1)
    total = int(flat.sum())
    cell = np.repeat(np.arange(flat.size), flat)
    kind, rem = np.divmod(cell, counts.shape[1] * counts.shape[2])
    seg, slot = np.divmod(rem, counts.shape[2])
    ts = config.start_timestamp + slot * dt + rng.integers(0, dt, total)
    box = np.array([[s.min_lat, s.min_lon, s.max_lat, s.max_lon] for s in segments])
    margin = 2e-6  # keeps 6-decimal rounding strictly inside the box
    lo_lat, lo_lon = box[seg, 0] + margin, box[seg, 1] + margin
    hi_lat, hi_lon = box[seg, 2] - margin, box[seg, 3] - margin
    lat = np.round(lo_lat + rng.random(total) * (hi_lat - lo_lat), 6)
    lon = np.round(lo_lon + rng.random(total) * (hi_lon - lo_lon), 6)
    ids = rng.integers(0, 2 ** 63, total, dtype=np.int64)
    imei = np.array([f"{i:016x}" for i in ids.tolist()], dtype=object)
    order = np.lexsort((kind, ts))
    return RecordTable(imei[order], lat[order], lon[order], ts[order].astype(float), kind[order])


# -- planted-structure report ----------------------------------------------------

def lag_correlation(x: np.ndarray, y: np.ndarray, max_lag: int) -> np.ndarray:
    """corr(x[t], y[t + lag]) for lag = 0..max_lag."""
    from .analysis import pearson

    out = np.zeros(max_lag + 1)
    for lag in range(max_lag + 1):
        a = x[: len(x) - lag] if lag else x
        out[lag] = pearson(a, y[lag:]).r
    return out


def planted_eval(result: SynthResult, flows: np.ndarray | None = None, max_lag: int = 8) -> dict:
    """Check that the planted signals are visible in binned flows ``[3, N, T]``."""
    from .analysis import subtracted_corr_report

    flows = result.counts.astype(float) if flows is None else np.asarray(flows, dtype=float)
    cfg = result.config
    n_days = cfg.days
    slot = np.arange(flows.shape[2]) % SLOTS_PER_DAY
    hours = slot * 24.0 / SLOTS_PER_DAY
    rush = ((hours >= 7.5) & (hours < 8.5)) | ((hours >= 17.5) & (hours < 18.5))
    midday = (hours >= 12.0) & (hours < 14.0)
    overnight = (hours >= 2.5) & (hours < 3.5)
    report = {"lags": {}, "rush_ratio": {}, "overnight_mean": {}, "corr": {}}
    for j, (prof, up) in enumerate(zip(result.profiles, result.upstream)):
        sid = result.segments[j].id
        if up is not None:
            # burst component only: remove the per-slot daily mean first
            a = _deseason(flows[0, up], slot)
            b = _deseason(flows[0, j], slot)
            report["lags"][sid] = int(np.argmax(lag_correlation(a, b, max_lag)))
        if prof.kind is RegionKind.COMMUTE:
            report["rush_ratio"][sid] = float(flows[0, j, rush].mean() / max(flows[0, j, midday].mean(), 1e-9))
        if prof.kind is RegionKind.RESIDENTIAL:
            report["overnight_mean"][sid] = float(flows[:, j, overnight].mean())
    corr = subtracted_corr_report(flows)
    for j, prof in enumerate(result.profiles):
        row = corr[j]
        report["corr"][result.segments[j].id] = {"kind": prof.kind.value, **row}
    report["days"] = n_days
    return report


def _deseason(x: np.ndarray, slot: np.ndarray) -> np.ndarray:
    means = np.bincount(slot, weights=x, minlength=SLOTS_PER_DAY) / np.maximum(
        np.bincount(slot, minlength=SLOTS_PER_DAY), 1)
    return x - means[slot]
