"""The full multifaceted graph model: encoders, multivariate facet, a stack of
temporal/spatial layers with skip taps, and the output head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .cgat import Conv1x1
from .errors import ConfigError, InputError, ShapeError
from .facets import SHRINK, MultivariateFacet, PlainTemporal, SpatialFacet, TemporalFacet, swap_last_axes
from .gradcore import Module, Tensor
from .graphs import SegmentGraph

FACETS = ("M", "S", "T")
INPUT_SETS = {"v": (), "vp": ("p",), "vs": ("s",), "all": ("p", "s")}
TYPE_INDEX = {"v": 0, "p": 1, "s": 2}


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    reduced_channels: int = 8
    layers: int = 3
    t_in: int = 12
    t_out: int = 12
    skip_channels: int = 64
    n_segments: int = 21
    ablation: frozenset = field(default_factory=frozenset)
    inputs: str = "all"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        if not self.ablation <= set(FACETS):
            raise ConfigError(f"unknown ablation tags {sorted(self.ablation - set(FACETS))}")
        if self.inputs not in INPUT_SETS:
            raise ConfigError(f"inputs must be one of {sorted(INPUT_SETS)}, got {self.inputs!r}")
        if self.reduced_channels >= self.channels:
            raise ConfigError("reduced_channels must be below channels")
        if min(self.layers, self.t_in, self.t_out, self.n_segments, self.skip_channels) < 1:
            raise ConfigError("sizes must be positive")

    @property
    def left_pad(self) -> int:
        return max(SHRINK * self.layers - (self.t_in - 1), 0)

    @property
    def time_lengths(self) -> list[int]:
        """Time length entering each layer, then the final length."""
        t0 = self.t_in + self.left_pad
        return [t0 - SHRINK * i for i in range(self.layers + 1)]

    @property
    def streams(self) -> tuple[str, ...]:
        """Flow types that get an encoder."""
        if "M" in self.ablation:
            return ("v",)
        return ("v",) + INPUT_SETS[self.inputs]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = sorted(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["ablation"] = frozenset(d.get("ablation", ()))
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def ablate(config: ModelConfig, drop: str) -> ModelConfig:
    if drop not in FACETS:
        raise ConfigError(f"unknown facet {drop!r}; expected one of {FACETS}")
    return replace(config, ablation=config.ablation | {drop})


class MFGM(Module):
    def __init__(self, config: ModelConfig, graph: SegmentGraph):
        if graph.n_nodes != config.n_segments:
            raise ConfigError(f"graph has {graph.n_nodes} nodes, config expects {config.n_segments}")
        self.config = config
        self.graph = graph
        rng = np.random.default_rng(config.seed)
        c, cr, n = config.channels, config.reduced_channels, config.n_segments
        self.encoders = {s: Conv1x1(1, c, rng) for s in config.streams}
        self.multivariate = None
        if "M" not in config.ablation:
            self.multivariate = MultivariateFacet(c, cr, n, len(config.streams), rng)
        self.temporal = []
        self.spatial = []
        self.skips = []
        lengths = config.time_lengths
        for i in range(config.layers):
            if lengths[i] - SHRINK < 1:
                raise ConfigError(f"time length {lengths[i]} too short for layer {i + 1}")
            if "T" in config.ablation:
                self.temporal.append(PlainTemporal(c, lengths[i], rng))
            else:
                self.temporal.append(TemporalFacet(c, cr, lengths[i], n, rng))
            self.skips.append(Conv1x1(c, config.skip_channels, rng, kernel=lengths[i + 1]))
            # the last layer's spatial output would feed nothing: skips tap the temporal output
            if "S" not in config.ablation and i < config.layers - 1:
                self.spatial.append(SpatialFacet(c, cr, n, lengths[i + 1], rng))
        self.head_hidden = Conv1x1(config.skip_channels, config.skip_channels, rng)
        self.head_out = Conv1x1(config.skip_channels, config.t_out, rng)

    def named_parameters(self, prefix: str = ""):
        for s, enc in self.encoders.items():
            yield from enc.named_parameters(f"{prefix}encoder_{s}.")
        yield from super().named_parameters(prefix)

    def encode(self, x: Tensor) -> dict[str, Tensor]:
        """Pad time on the left and lift each flow type to ``[B, C, T, N]``."""
        cfg = self.config
        x = gc.pad_left(x, -1, cfg.left_pad) if cfg.left_pad else x
        out = {}
        b = x.shape[0]
        t = x.shape[-1]
        for s, enc in self.encoders.items():
            k = TYPE_INDEX[s]
            xs = gc.reshape(gc.slice_(x, 1, k, k + 1), (b, 1, cfg.n_segments, t))
            out[s] = enc(swap_last_axes(xs))
        return out

    def __call__(self, x) -> Tensor:
        """Normalised inputs ``[B, 3, N, t_in]`` -> normalised predictions ``[B, N, t_out]``."""
        x = gc.as_tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (3, cfg.n_segments, cfg.t_in):
            raise ShapeError(f"expected input [B, 3, {cfg.n_segments}, {cfg.t_in}], got {x.shape}")
        if not np.isfinite(x.data).all():
            raise InputError("input contains non-finite values")
        enc = self.encode(x)
        h = enc["v"]
        if self.multivariate is not None:
            deltas = [gc.sub(h, enc[s]) for s in cfg.streams[1:]]
            h = self.multivariate(h, deltas)
        skip = None
        for i, temporal in enumerate(self.temporal):
            h = temporal(h)
            tap = self.skips[i](h)
            skip = tap if skip is None else gc.add(skip, tap)
            if i < len(self.spatial):
                h = swap_last_axes(self.spatial[i](swap_last_axes(h), self.graph))
        y = self.head_out(gc.relu(self.head_hidden(gc.relu(skip))))   # [B, t_out, 1, N]
        b = y.shape[0]
        return swap_last_axes(gc.reshape(y, (b, cfg.t_out, cfg.n_segments)))

    forward = __call__

    def trace_lengths(self, x) -> list[int]:
        """Time length of the representation entering each layer and the final one."""
        with gc.no_grad():
            x = gc.as_tensor(x)
            h = self.encode(x)["v"]
            lengths = [h.shape[-2]]
            for temporal in self.temporal:
                h = temporal(h)
                lengths.append(h.shape[-2])
        return lengths


def mae_loss(y_hat: Tensor, y) -> Tensor:
    y = gc.as_tensor(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"loss: prediction {y_hat.shape} vs target {y.shape}")
    return gc.mean(gc.abs_(gc.sub(y_hat, y)))


def count_parameters(config: ModelConfig) -> int:
    """Parameter count implied by ``config`` alone."""
    c, cr, sk, n = config.channels, config.reduced_channels, config.skip_channels, config.n_segments

    def conv(ci, co, k=1):
        return co * ci * k + co

    def cgatl(width):
        return conv(c, cr) + cr * 2 * width + conv(cr, c)

    total = len(config.streams) * conv(1, c)
    if "M" not in config.ablation:
        total += cgatl(n)
    lengths = config.time_lengths
    for i in range(config.layers):
        if "T" in config.ablation:
            total += conv(c, c, 5)
        else:
            total += conv(c, c, 2) + conv(c, c, 5) + 2 * (2 * cgatl(n) + conv(2 * c, c))
        total += conv(c, sk, lengths[i + 1])
        if "S" not in config.ablation and i < config.layers - 1:
            total += 2 * cgatl(lengths[i + 1])
    total += conv(sk, sk) + conv(sk, config.t_out)
    return total
