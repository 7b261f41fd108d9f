"""Transmission-success models.

Two analytic per-packet curves (capacity-limited and pure ALOHA) and a
packet-level LoRa uplink simulator with log-distance path loss, timing
overlap and power capture.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import binom

from .core import SensorSite, TransmissionRound, site_positions

BANDWIDTH_LIMITED = "bandwidth_limited"
ALOHA = "aloha"
LORA = "lora"


def p_success_bw(n: int, capacity: float, epsilon: float) -> float:
    if n < 1:
        raise ValueError("success probability is undefined for fewer than one transmitter")
    p = 1.0 - epsilon if n <= capacity else capacity / n - epsilon
    return min(1.0, max(0.0, p))


def p_success_aloha(n: int, A: float) -> float:
    if n < 1:
        raise ValueError("success probability is undefined for fewer than one transmitter")
    if A <= 0:
        raise ValueError("A must be positive")
    return math.exp(-2.0 * n / A)


@dataclass(frozen=True)
class AnalyticChannel:
    kind: str = BANDWIDTH_LIMITED
    capacity: float = 2
    epsilon: float = 0.001
    A: float = 20.0
    num_channels: int = 4

    def __post_init__(self) -> None:
        if self.kind not in (BANDWIDTH_LIMITED, ALOHA):
            raise ValueError(f"unknown analytic channel kind {self.kind!r}")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.A <= 0:
            raise ValueError("A must be positive")
        if self.num_channels < 1:
            raise ValueError("num_channels must be >= 1")

    def per_channel(self, n: int) -> float:
        """Success probability of each of ``n`` packets sharing one channel."""
        if self.kind == BANDWIDTH_LIMITED:
            return p_success_bw(n, self.capacity, self.epsilon)
        return p_success_aloha(n, self.A)

    def curve(self) -> "SuccessCurve":
        return SuccessCurve(self)


@dataclass(frozen=True)
class SuccessCurve:
    """Per-packet success P(n) with ``n`` total transmitters spread uniformly over the channels.

    A tagged packet shares its channel with ``Binomial(n - 1, 1/M)`` others, so
    ``P(n) = E[P_channel(1 + K)]``. With one channel this is the plain curve.
    """

    channel: AnalyticChannel

    def __call__(self, n: int) -> float:
        return _effective(self.channel, int(n))

    def table(self, n_max: int) -> np.ndarray:
        """``P(0..n_max)`` with ``P(0) = 0`` as a placeholder (no packets)."""
        return _effective_table(self.channel, int(n_max))


@lru_cache(maxsize=4096)
def _effective(channel: AnalyticChannel, n: int) -> float:
    if n < 1:
        raise ValueError("success probability is undefined for fewer than one transmitter")
    m = channel.num_channels
    if m == 1:
        return channel.per_channel(n)
    k = np.arange(n)
    weights = binom.pmf(k, n - 1, 1.0 / m)
    per = np.array([channel.per_channel(int(j) + 1) for j in k])
    return float(min(1.0, max(0.0, weights @ per)))


@lru_cache(maxsize=256)
def _effective_table(channel: AnalyticChannel, n_max: int) -> np.ndarray:
    out = np.zeros(n_max + 1)
    for n in range(1, n_max + 1):
        out[n] = _effective(channel, n)
    out.flags.writeable = False
    return out


def _as_sorted_ids(attempted: Iterable[int], n: int | None = None) -> list[int]:
    ids = sorted(int(i) for i in set(attempted))
    if n is not None and any(i < 0 or i >= n for i in ids):
        raise IndexError(f"attempted ids outside [0, {n})")
    return ids


def resolve_round_analytic(attempted: Iterable[int], channel: AnalyticChannel, rng: np.random.Generator) -> TransmissionRound:
    ids = _as_sorted_ids(attempted)
    if not ids:
        return TransmissionRound(frozenset(), frozenset())
    ok = _resolve_analytic_ids(len(ids), channel, rng)
    return TransmissionRound(frozenset(ids), frozenset(i for i, s in zip(ids, ok) if s))


def _resolve_analytic_ids(count: int, channel: AnalyticChannel, rng: np.random.Generator) -> np.ndarray:
    assign = rng.integers(channel.num_channels, size=count)
    load = np.bincount(assign, minlength=channel.num_channels)
    probs = np.array([channel.per_channel(int(load[c])) for c in assign])
    return rng.random(count) < probs


def resolve_mask_analytic(attempted: np.ndarray, channel: AnalyticChannel, rng: np.random.Generator) -> np.ndarray:
    """Mask form of ``resolve_round_analytic`` (ascending-id order, same rng draws)."""
    succeeded = np.zeros(len(attempted), dtype=bool)
    idx = np.flatnonzero(attempted)
    if len(idx):
        succeeded[idx] = _resolve_analytic_ids(len(idx), channel, rng)
    return succeeded


@dataclass(frozen=True)
class LoraChannel:
    gateway_position: tuple[float, float] = (1000.0, 1000.0)
    num_channels: int = 4
    path_loss_exponent: float = 2.7
    reference_loss_db: float = 40.0
    tx_power_dbm: float = 14.0
    sensitivity_dbm: float = -123.0
    capture_margin_db: float = 6.0
    noise_std_db: float = 2.0
    airtime: float = 0.05
    window: float = 1.0

    def __post_init__(self) -> None:
        if self.path_loss_exponent <= 0:
            raise ValueError("path_loss_exponent must be positive")
        if self.capture_margin_db < 0:
            raise ValueError("capture_margin_db must be >= 0")
        if self.num_channels < 1:
            raise ValueError("num_channels must be >= 1")
        if not 0 < self.airtime <= self.window:
            raise ValueError("need 0 < airtime <= window")

    def mean_rx_power(self, distance: np.ndarray) -> np.ndarray:
        d = np.maximum(np.asarray(distance, dtype=float), 1.0)
        return self.tx_power_dbm - (self.reference_loss_db + 10.0 * self.path_loss_exponent * np.log10(d))


def _lora_resolve(distances: np.ndarray, channel: LoraChannel, rng: np.random.Generator) -> np.ndarray:
    count = len(distances)
    chan = rng.integers(channel.num_channels, size=count)
    start = rng.uniform(0.0, channel.window - channel.airtime, size=count)
    power = channel.mean_rx_power(distances)
    if channel.noise_std_db > 0:
        power = power + rng.normal(0.0, channel.noise_std_db, size=count)
    heard = power >= channel.sensitivity_dbm
    ok = heard.copy()
    for a in np.flatnonzero(heard):
        # packets below sensitivity are never demodulated and do not interfere
        rivals = heard & (chan == chan[a]) & (np.abs(start - start[a]) < channel.airtime)
        rivals[a] = False
        if rivals.any() and power[a] - power[rivals].max() < channel.capture_margin_db:
            ok[a] = False
    return ok


def resolve_round_lora(
    attempted: Iterable[int],
    sites: Sequence[SensorSite] | np.ndarray,
    channel: LoraChannel,
    rng: np.random.Generator,
) -> TransmissionRound:
    positions = site_positions(sites) if len(sites) and isinstance(sites[0], SensorSite) else np.asarray(sites, float)
    ids = _as_sorted_ids(attempted, len(positions))
    if not ids:
        return TransmissionRound(frozenset(), frozenset())
    dist = np.linalg.norm(positions[ids] - np.asarray(channel.gateway_position), axis=1)
    ok = _lora_resolve(dist, channel, rng)
    return TransmissionRound(frozenset(ids), frozenset(i for i, s in zip(ids, ok) if s))


def resolve_mask_lora(attempted: np.ndarray, distances: np.ndarray, channel: LoraChannel, rng: np.random.Generator) -> np.ndarray:
    succeeded = np.zeros(len(attempted), dtype=bool)
    idx = np.flatnonzero(attempted)
    if len(idx):
        succeeded[idx] = _lora_resolve(distances[idx], channel, rng)
    return succeeded
