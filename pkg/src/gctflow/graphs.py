"""Graph structures consumed by the facets.

Segment adjacency comes from a thresholded Gaussian kernel over haversine
distances between segment centroids; the forward and backward transition
matrices are its row-normalisations.  Flow-type and time-node graphs are
complete.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GraphError

EARTH_RADIUS_M = 6_371_008.8


def haversine_m(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def row_normalize(a: np.ndarray) -> np.ndarray:
    """``a / rowsum(a)`` with all-zero rows left at zero."""
    sums = a.sum(axis=1, keepdims=True)
    return np.divide(a, sums, out=np.zeros_like(a, dtype=float), where=sums > 0)


def transition_matrices(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    return row_normalize(a), row_normalize(a.T)


@dataclass
class SegmentGraph:
    A: np.ndarray
    forward: np.ndarray
    backward: np.ndarray
    centroids: np.ndarray
    segment_ids: list
    sigma_meters: float | None = None
    kappa: float | None = None

    @property
    def n_nodes(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_adjacency(cls, a, segment_ids: Sequence[int] | None = None, centroids=None) -> "SegmentGraph":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got {a.shape}")
        if (a < 0).any():
            raise GraphError("adjacency weights must be non-negative")
        if not a.any():
            raise GraphError("adjacency has no edges")
        fwd, bwd = transition_matrices(a)
        n = a.shape[0]
        ids = list(segment_ids) if segment_ids is not None else list(range(n))
        cent = np.zeros((n, 2)) if centroids is None else np.asarray(centroids, dtype=float)
        return cls(a, fwd, bwd, cent, ids)

    def to_json(self, path) -> None:
        doc = {
            "segment_ids": [int(i) for i in self.segment_ids],
            "sigma_meters": self.sigma_meters,
            "kappa": self.kappa,
            "A": self.A.reshape(-1).tolist(),
            "forward": self.forward.reshape(-1).tolist(),
            "backward": self.backward.reshape(-1).tolist(),
            "centroids": self.centroids.reshape(-1).tolist(),
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def from_json(cls, path) -> "SegmentGraph":
        doc = json.loads(Path(path).read_text())
        n = len(doc["segment_ids"])

        def square(key):
            return np.asarray(doc[key], dtype=float).reshape(n, n)

        cent = doc.get("centroids")
        cent = np.zeros((n, 2)) if cent is None else np.asarray(cent, dtype=float).reshape(n, 2)
        return cls(square("A"), square("forward"), square("backward"), cent,
                   list(doc["segment_ids"]), doc.get("sigma_meters"), doc.get("kappa"))


@dataclass(frozen=True)
class CompleteGraph:
    size: int
    mask: np.ndarray


def complete_graph(k: int) -> CompleteGraph:
    if k < 1:
        raise GraphError(f"complete graph needs at least one node, got {k}")
    return CompleteGraph(k, np.ones((k, k), dtype=bool))


def build_adjacency(segments, sigma: float | None = None, kappa: float = 0.1,
                    self_loops: bool = True) -> SegmentGraph:
    """Thresholded Gaussian kernel graph over segment centroids.

    ``W_ij = exp(-d_ij**2 / sigma**2)`` when that value is at least ``kappa``,
    else 0.  ``sigma`` defaults to the standard deviation of the pairwise
    distances (off-diagonal pairs).
    """
    n = len(segments)
    if n < 2:
        raise GraphError(f"need at least 2 segments, got {n}")
    if not 0.0 <= kappa <= 1.0:
        raise GraphError(f"kappa must lie in [0, 1], got {kappa}")
    cent = np.array([s.centroid for s in segments], dtype=float)
    d = haversine_m(cent[:, None, 0], cent[:, None, 1], cent[None, :, 0], cent[None, :, 1])
    np.fill_diagonal(d, 0.0)
    if sigma is None:
        off = d[~np.eye(n, dtype=bool)]
        sigma = float(off.std())
        if sigma == 0.0:
            sigma = float(off.mean()) or 1.0
    if sigma <= 0:
        raise GraphError(f"sigma must be positive, got {sigma}")
    w = np.exp(-(d ** 2) / sigma ** 2)
    w[w < kappa] = 0.0
    if not self_loops:
        np.fill_diagonal(w, 0.0)
    if not w.any():
        raise GraphError("thresholded adjacency is all zero")
    graph = SegmentGraph.from_adjacency(w, [s.id for s in segments], cent)
    graph.sigma_meters = sigma
    graph.kappa = kappa
    return graph
