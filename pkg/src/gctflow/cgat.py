"""Channel-specific graph attention.

Each of the ``C'`` channels runs its own single-head attention over the ``K``
nodes of a graph, without the usual linear projection of node features.  The
layer form wraps this between a channel-reducing and a channel-restoring 1x1
convolution and adds the input back.
"""

from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, GraphError, ShapeError
from .gradcore import Module, Tensor, he_uniform, param

LEAKY_SLOPE = 0.2


def _check_weights(weights, k: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (k, k):
        raise GraphError(f"graph of shape {w.shape} does not match {k} nodes")
    if (w < 0).any():
        raise GraphError("graph weights must be non-negative")
    if not (w > 0).any(axis=1).all():
        raise GraphError("a node has an empty neighbourhood")
    return w


def attention_coefficients(h_c, att_c, mask, slope: float = LEAKY_SLOPE) -> np.ndarray:
    """Raw scores ``e_ij = LeakyReLU(a . [h_i || h_j])`` for one channel.

    ``h_c`` is ``[K, D]`` and ``att_c`` has length ``2D``.  Masked-out pairs are
    returned as ``-inf``.
    """
    h = np.asarray(h_c, dtype=float)
    a = np.asarray(att_c, dtype=float)
    k, d = h.shape
    if a.shape != (2 * d,):
        raise ShapeError(f"attention vector {a.shape} does not match node width {d}")
    m = _check_weights(mask, k) > 0
    raw = (h @ a[:d])[:, None] + (h @ a[d:])[None, :]
    e = np.where(raw > 0, raw, slope * raw)
    return np.where(m, e, -np.inf)


def attention_scores(H: Tensor, att: Tensor, weights, slope: float = LEAKY_SLOPE) -> Tensor:
    """Normalised attention ``[..., C', K, K]`` for ``H`` of shape ``[..., C', K, D]``.

    ``weights`` is a ``[K, K]`` non-negative matrix: its support is the
    neighbourhood mask, and its values scale the softmax before renormalising
    (a boolean mask gives the plain masked softmax).
    """
    *lead, c, k, d = H.shape
    if att.shape != (c, 2 * d):
        raise ShapeError(f"attention params {att.shape} do not match input {H.shape}")
    w = _check_weights(weights, k)
    a_src = gc.reshape(gc.slice_(att, 1, 0, d), (c, d, 1))
    a_dst = gc.reshape(gc.slice_(att, 1, d, 2 * d), (c, d, 1))
    s_src = gc.matmul(H, a_src)                                    # [..., C, K, 1]
    s_dst = gc.reshape(gc.matmul(H, a_dst), (*lead, c, 1, k))      # [..., C, 1, K]
    e = gc.leaky_relu(gc.add(s_src, s_dst), slope)
    return gc.softmax(e, axis=-1, weights=w)


class CGAT(Module):
    def __init__(self, channels: int, node_dim: int, rng: np.random.Generator,
                 slope: float = LEAKY_SLOPE):
        self.channels = channels
        self.node_dim = node_dim
        self.slope = slope
        self.att = param(rng.uniform(-0.1, 0.1, size=(channels, 2 * node_dim)), "att")

    def scores(self, H: Tensor, weights) -> Tensor:
        return attention_scores(H, self.att, weights, self.slope)

    def __call__(self, H: Tensor, weights) -> Tensor:
        if H.ndim < 3 or H.shape[-3] != self.channels or H.shape[-1] != self.node_dim:
            raise ShapeError(f"CGAT({self.channels} ch, width {self.node_dim}) got input {H.shape}")
        alpha = self.scores(H, weights)
        return gc.elu(gc.matmul(alpha, H))


def cgat_forward(H: Tensor, weights, att: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return gc.elu(gc.matmul(attention_scores(H, att, weights, slope), H))


class Conv1x1(Module):
    """Channel mixing on axis -3, the ``k=1`` case of ``conv_time``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 1):
        self.weight = param(he_uniform(rng, (c_out, c_in, kernel), c_in * kernel), "weight")
        self.bias = param(np.zeros(c_out), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return gc.conv_time(x, self.weight, self.bias)


class CGATL(Module):
    """``Decoder(CGAT(Encoder(H), G)) + H`` on inputs ``[..., C, K, D]``."""

    def __init__(self, channels: int, reduced: int, node_dim: int, rng: np.random.Generator,
                 slope: float = LEAKY_SLOPE):
        if reduced >= channels:
            raise ConfigError(f"reduced channels {reduced} must be below {channels}")
        self.encoder = Conv1x1(channels, reduced, rng)
        self.inner = CGAT(reduced, node_dim, rng, slope)
        self.decoder = Conv1x1(reduced, channels, rng)

    def __call__(self, H: Tensor, weights) -> Tensor:
        return gc.add(self.decoder(self.inner(self.encoder(H), weights)), H)

    def scores(self, H: Tensor, weights) -> Tensor:
        return self.inner.scores(self.encoder(H), weights)
