"""Real-valued block channel: power normalization, Rayleigh fading, AWGN.

Random draws come from :class:`ChannelRng`, a Philox4x64 counter-based stream
(numpy's ``Philox`` bit generator) with Gaussian variates produced by the
Box-Muller transform, so the draw sequence depends only on the seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Graph, Tensor

KINDS = ("identity", "awgn", "rayleigh_awgn")
GRANULARITIES = ("per_sample", "per_symbol")


@dataclass
class ChannelConfig:
    kind: str = "rayleigh_awgn"
    snr_db: float = 10.0
    seed: int = 0
    fading_granularity: str = "per_sample"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}; expected one of {KINDS}")
        if self.fading_granularity not in GRANULARITIES:
            raise ValueError(f"unknown fading granularity {self.fading_granularity!r}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be finite or +inf, got {self.snr_db}")


class ChannelRng:
    """Seeded Philox stream with Box-Muller normals."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = int(np.prod(shape))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1]: log never sees 0
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)


def rayleigh_draw(rng: ChannelRng, n) -> np.ndarray:
    """Rayleigh gains with scale 1/sqrt(2), i.e. E[h^2] = 1."""
    shape = (n,) if isinstance(n, (int, np.integer)) else tuple(n)
    if int(np.prod(shape)) < 1:
        raise ValueError("rayleigh_draw needs at least one value")
    g = rng.normal((2,) + shape)
    return np.sqrt(g[0] ** 2 + g[1] ** 2) / math.sqrt(2.0)


def noise_sigma(snr_db: float) -> float:
    """Noise std for unit per-symbol signal power at the given SNR."""
    return math.sqrt(10.0 ** (-snr_db / 10.0))


def power_normalize(graph: Graph, s: Tensor) -> Tensor:
    """Scale each row to mean per-symbol power 1; zero rows pass through."""
    x = s.data
    k = x.shape[1]
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    live = norms > 0
    safe = np.where(live, norms, 1.0)
    factor = np.where(live, math.sqrt(k) / safe, 1.0)
    out = x * factor

    def back(g):
        # y = sqrt(k) x / |x|  =>  dx = f * (g - u (u.g)),  u = x / |x|
        u = x / safe
        proj = (g * u).sum(axis=1, keepdims=True)
        dx = np.where(live, factor * (g - u * proj), g)
        return (dx,)

    return graph.record("power_normalize", (s,), out, back)


def sample_channel(cfg: ChannelConfig, shape: tuple[int, int], rng: ChannelRng,
                   snr_db: Optional[float] = None):
    """Draw (h, n) for one transmission of an N x K block."""
    snr = cfg.snr_db if snr_db is None else snr_db
    # +inf dB is the noiseless, fading-free sentinel
    if cfg.kind == "identity" or snr == math.inf:
        return np.ones(shape), np.zeros(shape)
    if cfg.kind == "awgn":
        h = np.ones(shape)
    else:
        h = _fading(cfg, shape, rng)
    n = noise_sigma(snr) * rng.normal(shape)
    return h, n


def _fading(cfg: ChannelConfig, shape, rng: ChannelRng) -> np.ndarray:
    if cfg.fading_granularity == "per_symbol":
        return rayleigh_draw(rng, shape)
    return np.repeat(rayleigh_draw(rng, (shape[0], 1)), shape[1], axis=1)


def apply_channel(graph: Graph, s: Tensor, h: np.ndarray, n: np.ndarray) -> Tensor:
    """Realized channel y = h * s + n, with h and n held constant for backward."""
    out = h * s.data + n
    return graph.record("channel", (s,), out, lambda g: (g * h,))


def transmit(graph: Graph, s: Tensor, cfg: ChannelConfig, rng: ChannelRng,
             snr_db: Optional[float] = None) -> Tensor:
    """Send already power-normalized symbols through the configured channel.

    ``snr_db`` overrides ``cfg.snr_db`` (used for per-batch training SNR).
    The identity kind returns ``s`` itself.
    """
    if cfg.kind == "identity" or (snr_db if snr_db is not None else cfg.snr_db) == math.inf:
        return s
    h, n = sample_channel(cfg, s.shape, rng, snr_db)
    return apply_channel(graph, s, h, n)
