"""Multivariate, temporal and spatial facet modules.

All modules take representations with arbitrary leading (batch) axes; the
trailing three axes follow the layouts noted on each class.
"""

from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .cgat import CGATL, Conv1x1
from .errors import GraphError, ShapeError
from .gradcore import Module, Tensor
from .graphs import SegmentGraph, complete_graph

SHORT_KERNEL = 2
LONG_KERNEL = 5
SHRINK = LONG_KERNEL - 1


def subtracted_flows(h_v: Tensor, h_p: Tensor, h_s: Tensor) -> tuple[Tensor, Tensor]:
    """Representation-space differences ``V - P`` and ``V - S``."""
    if not (h_v.shape == h_p.shape == h_s.shape):
        raise ShapeError(f"subtracted_flows: shapes {h_v.shape}, {h_p.shape}, {h_s.shape} differ")
    return gc.sub(h_v, h_p), gc.sub(h_v, h_s)


def swap_last_axes(x: Tensor) -> Tensor:
    n = x.ndim
    return gc.transpose(x, tuple(range(n - 2)) + (n - 1, n - 2))


class MultivariateFacet(Module):
    """Attention across flow types, one time step at a time.

    Inputs are ``[..., C, T, N]``; the V-GCT stream and the subtracted streams
    form the nodes of a complete graph with node features of width ``N``.  The
    output keeps only the enhanced V-GCT node: ``[..., C, T, N]``.
    """

    def __init__(self, channels: int, reduced: int, n_segments: int, n_types: int,
                 rng: np.random.Generator):
        self.n_types = n_types
        self.graph = complete_graph(n_types)
        self.cgatl = CGATL(channels, reduced, n_segments, rng)

    def stack(self, h_v: Tensor, deltas) -> Tensor:
        streams = [h_v, *deltas]
        if len(streams) != self.n_types:
            raise ShapeError(f"expected {self.n_types} streams, got {len(streams)}")
        *lead, c, t, n = h_v.shape
        nodes = gc.concat([gc.reshape(h, (*lead, c, t, 1, n)) for h in streams], axis=-2)
        L = len(lead)
        # [..., C, T, K, N] -> [..., T, C, K, N]
        return gc.transpose(nodes, tuple(range(L)) + (L + 1, L, L + 2, L + 3))

    def __call__(self, h_v: Tensor, deltas=()) -> Tensor:
        *lead, c, t, n = h_v.shape
        L = len(lead)
        out = self.cgatl(self.stack(h_v, deltas), self.graph.mask)   # [..., T, C, K, N]
        enhanced = gc.reshape(gc.slice_(out, -2, 0, 1), (*lead, t, c, n))
        return gc.transpose(enhanced, tuple(range(L)) + (L + 1, L, L + 2))


class TemporalStream(Module):
    def __init__(self, channels: int, reduced: int, n_segments: int, rng: np.random.Generator):
        self.short = CGATL(channels, reduced, n_segments, rng)
        self.long = CGATL(channels, reduced, n_segments, rng)
        self.merge = Conv1x1(2 * channels, channels, rng)

    def __call__(self, h2: Tensor, h5: Tensor, mask) -> Tensor:
        both = gc.concat([self.short(h2, mask), self.long(h5, mask)], axis=-3)
        return self.merge(both)


class TemporalFacet(Module):
    """Dual-scale temporal convolutions, attention over time nodes, gating.

    Input ``[..., C, T, S]``; output ``[..., C, T-4, S]`` with every element in
    ``(-1, 1)``.
    """

    def __init__(self, channels: int, reduced: int, t_len: int, n_segments: int,
                 rng: np.random.Generator):
        if t_len < LONG_KERNEL:
            raise ShapeError(f"temporal facet needs at least {LONG_KERNEL} steps, got {t_len}")
        self.t_len = t_len
        self.t_out = t_len - SHRINK
        self.graph = complete_graph(self.t_out)
        self.conv2 = Conv1x1(channels, channels, rng, kernel=SHORT_KERNEL)
        self.conv5 = Conv1x1(channels, channels, rng, kernel=LONG_KERNEL)
        self.filter = TemporalStream(channels, reduced, n_segments, rng)
        self.gate = TemporalStream(channels, reduced, n_segments, rng)

    def branches(self, H: Tensor) -> tuple[Tensor, Tensor]:
        t = H.shape[-2]
        if t != self.t_len:
            raise ShapeError(f"temporal facet built for {self.t_len} steps, got {H.shape}")
        h2 = self.conv2(H)                               # T-1 steps
        h2 = gc.slice_(h2, -2, t - 1 - self.t_out, t - 1)  # drop the first three
        h5 = self.conv5(H)                               # T-4 steps
        return h2, h5

    def __call__(self, H: Tensor) -> Tensor:
        h2, h5 = self.branches(H)
        mask = self.graph.mask
        return gc.hadamard(gc.sigmoid(self.filter(h2, h5, mask)), gc.tanh(self.gate(h2, h5, mask)))


class PlainTemporal(Module):
    """Kernel-5 convolution only; stands in for the temporal facet when ablated."""

    def __init__(self, channels: int, t_len: int, rng: np.random.Generator):
        self.t_len = t_len
        self.t_out = t_len - SHRINK
        self.conv5 = Conv1x1(channels, channels, rng, kernel=LONG_KERNEL)

    def __call__(self, H: Tensor) -> Tensor:
        return self.conv5(H)


class SpatialFacet(Module):
    """Sum of forward- and backward-graph attention layers on ``[..., C, S, T]``.

    In each branch the attention softmax is weighted by the transition matrix
    row and renormalised, so the two directions see different weights even
    where their supports coincide.
    """

    def __init__(self, channels: int, reduced: int, n_segments: int, t_len: int,
                 rng: np.random.Generator):
        self.n_segments = n_segments
        self.fwd = CGATL(channels, reduced, t_len, rng)
        self.bwd = CGATL(channels, reduced, t_len, rng)

    def _check(self, H: Tensor, graph: SegmentGraph) -> None:
        if graph.n_nodes != self.n_segments or H.shape[-2] != self.n_segments:
            raise GraphError(f"graph has {graph.n_nodes} nodes, facet {self.n_segments}, input {H.shape}")

    def __call__(self, H: Tensor, graph: SegmentGraph) -> Tensor:
        self._check(H, graph)
        return gc.add(self.fwd(H, graph.forward), self.bwd(H, graph.backward))


def multivariate_forward(h_v, d_p, d_s, facet: MultivariateFacet) -> Tensor:
    return facet(h_v, [d for d in (d_p, d_s) if d is not None])


def temporal_forward(H: Tensor, facet: TemporalFacet) -> Tensor:
    return facet(H)


def spatial_forward(H: Tensor, graph: SegmentGraph, facet: SpatialFacet) -> Tensor:
    return facet(H, graph)

