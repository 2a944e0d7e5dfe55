"""Exploratory statistics over flow tensors ``[3, N, T]``.

Correlations that are undefined (a constant series inside the window) are
returned with an explicit flag instead of NaN.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError

TYPE_NAMES = ("V-GCT", "P-GCT", "S-GCT")


class Correlation(NamedTuple):
    r: float
    defined: bool


def pearson(x, y) -> Correlation:
    """Sample Pearson correlation; ``defined`` is False if either series is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError(f"pearson needs two equal-length series of length >= 2, got {x.shape}, {y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return Correlation(0.0, False)
    r = float(np.dot(dx, dy)) / np.sqrt(sxx * syy)
    return Correlation(float(min(1.0, max(-1.0, r))), True)


@dataclass(frozen=True)
class CorrWindowSpec:
    window_intervals: int = 12
    stride: int = 1

    def __post_init__(self):
        if self.window_intervals < 2 or self.stride < 1:
            raise ConfigError("window must be >= 2 and stride >= 1")


@dataclass
class EvolvingCorr:
    slots: np.ndarray     # index of the last interval in each window
    r: np.ndarray         # [n_slots, N, N]
    defined: np.ndarray   # [n_slots, N, N] bool


def _corr_matrix(win: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = win - win.mean(axis=1, keepdims=True)
    ss = (d * d).sum(axis=1)
    live = ss > 0
    cov = d @ d.T
    denom = np.sqrt(np.outer(ss, ss))
    defined = np.outer(live, live)
    r = np.divide(cov, denom, out=np.zeros_like(cov), where=defined)
    r = np.clip(r, -1.0, 1.0)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, np.where(live, 1.0, 0.0))
    return r, defined


def evolving_corr(flows, spec: CorrWindowSpec = CorrWindowSpec()) -> EvolvingCorr:
    """Segment-by-segment V-GCT correlation over trailing windows.

    ``flows`` is ``[3, N, T]`` (the V-GCT row is used) or ``[N, T]``.  The
    matrix for slot ``t`` uses intervals ``t - window + 1 .. t`` only.
    """
    flows = np.asarray(flows, dtype=float)
    v = flows[0] if flows.ndim == 3 else flows
    w = spec.window_intervals
    if v.shape[1] < w:
        raise ConfigError(f"need at least {w} intervals, got {v.shape[1]}")
    slots = np.arange(w - 1, v.shape[1], spec.stride)
    r = np.zeros((len(slots), v.shape[0], v.shape[0]))
    defined = np.zeros_like(r, dtype=bool)
    for i, t in enumerate(slots):
        r[i], defined[i] = _corr_matrix(v[:, t - w + 1:t + 1])
    return EvolvingCorr(slots, r, defined)


def describe(flows, segment_ids: Sequence | None = None) -> list[dict]:
    """Per flow type: overall mean and std, and the segments with the highest
    and lowest average flow."""
    flows = np.asarray(flows, dtype=float)
    ids = list(segment_ids) if segment_ids is not None else list(range(flows.shape[1]))
    rows = []
    for k, name in enumerate(TYPE_NAMES[: flows.shape[0]]):
        seg_avg = flows[k].mean(axis=1)
        hi, lo = int(np.argmax(seg_avg)), int(np.argmin(seg_avg))
        rows.append({"type": name, "num": flows.shape[1], "avg": float(flows[k].mean()),
                     "std": float(flows[k].std()), "max_avg": float(seg_avg[hi]), "max_id": ids[hi],
                     "min_avg": float(seg_avg[lo]), "min_id": ids[lo]})
    return rows


def subtracted_corr_report(flows, start: int = 0, length: int | None = None) -> list[dict]:
    """Per segment: corr(V,P), corr(V,S), corr(V,V-P), corr(V,V-S) over a window."""
    flows = np.asarray(flows, dtype=float)
    stop = flows.shape[2] if length is None else start + length
    f = flows[:, :, start:stop]
    out = []
    for j in range(f.shape[1]):
        v, p, s = f[0, j], f[1, j], f[2, j]
        row = {}
        for key, other in (("v_p", p), ("v_s", s), ("v_vmp", v - p), ("v_vms", v - s)):
            c = pearson(v, other)
            row[key] = c.r
            row[key + "_defined"] = c.defined
        out.append(row)
    return out


def write_stats_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_corr_csv(path, result: EvolvingCorr, segment_ids: Sequence, times: Sequence | None = None) -> None:
    """Long-form matrices: one row per (slot, i, j)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "segment_i", "segment_j", "r", "defined"])
        for s, t in enumerate(result.slots):
            label = times[s] if times is not None else int(t)
            for i, a in enumerate(segment_ids):
                for j, b in enumerate(segment_ids):
                    w.writerow([label, a, b, f"{result.r[s, i, j]:.12g}", int(result.defined[s, i, j])])


def write_corr_svg(path, matrix: np.ndarray, defined: np.ndarray, segment_ids: Sequence, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.2))
    shown = np.ma.masked_where(~defined, matrix)
    im = ax.imshow(shown, vmin=-1, vmax=1, cmap="RdBu")
    ax.set_xticks(range(len(segment_ids)), [str(i) for i in segment_ids], fontsize=6)
    ax.set_yticks(range(len(segment_ids)), [str(i) for i in segment_ids], fontsize=6)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
