"""Seeded synthetic humidity trajectories and per-gateway uplink channels.

Humidity follows a dry-down recurrence toward the lower clamp with random
rain events; each gateway observes an affine function of humidity plus
Gaussian short-term noise and an optional daily working-hours offset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import rng as _rng
from .errors import ArgumentError, ValidationError
from .telemetry import RecordSet, UplinkRecord

DEFAULT_START_TS = 1735689600  # 2025-01-01T00:00:00Z


@dataclass(frozen=True)
class HumidityModelConfig:
    base: float = 34.0
    event_rate: float = 1.0
    event_gain: float = 8.0
    decay: float = 0.005
    # upper clamp acts as field capacity: heavy rain saturates rather than overshoots
    clamp: tuple[float, float] = (29.0, 39.0)

    def __post_init__(self):
        low, high = self.clamp
        if not low < high:
            raise ValidationError(f"clamp: low {low} must be < high {high}")
        if not low <= self.base <= high:
            raise ValidationError(f"base {self.base} outside clamp [{low}, {high}]")
        if self.event_rate < 0:
            raise ValidationError("event_rate must be >= 0")
        if self.event_gain <= 0:
            raise ValidationError("event_gain must be > 0")
        if not 0 <= self.decay < 1:
            raise ValidationError("decay must lie in [0, 1)")


@dataclass(frozen=True)
class GatewayChannelConfig:
    rssi0: float = -95.0
    slope: float = -0.5
    noise_sigma: float = 2.0
    snr0: float = 6.0
    snr_slope: float = -0.4
    snr_sigma: float = 1.5
    bimodal_offset: float = 0.0
    bimodal_window: tuple[float, float] = (8.0, 16.0)

    def __post_init__(self):
        if self.noise_sigma < 0 or self.snr_sigma < 0:
            raise ValidationError("noise sigmas must be >= 0")
        start, end = self.bimodal_window
        if self.bimodal_offset != 0 and not (0 <= start < end <= 24):
            raise ValidationError(f"bimodal_window {self.bimodal_window} must satisfy 0 <= start < end <= 24")


def far_gateway() -> GatewayChannelConfig:
    """Preset for a distant gateway whose channel shifts during working hours."""
    return GatewayChannelConfig(bimodal_offset=-6.0, bimodal_window=(8.0, 16.0))


def near_gateway() -> GatewayChannelConfig:
    return GatewayChannelConfig()


@dataclass(frozen=True)
class SimConfig:
    humidity: HumidityModelConfig = field(default_factory=HumidityModelConfig)
    gateways: tuple[tuple[str, GatewayChannelConfig], ...] = (
        ("gw1", far_gateway()),
        ("gw2", near_gateway()),
    )
    sample_period: int = 300
    seed: int = 42
    n_samples: int = 2880
    start_ts: int = DEFAULT_START_TS
    utc_offset_hours: float = 0.0

    def __post_init__(self):
        if self.sample_period <= 0:
            raise ValidationError("sample_period must be > 0")
        if not self.gateways:
            raise ValidationError("at least one gateway is required")
        ids = [g for g, _ in self.gateways]
        if len(set(ids)) != len(ids):
            raise ValidationError("gateway ids must be distinct")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if self.start_ts <= 0:
            raise ValidationError("start_ts must be > 0")


def simulate_humidity(cfg: HumidityModelConfig, n: int, period: float, seed: int) -> np.ndarray:
    """Humidity series of length ``n`` in percent.

    A rain event at sample ``t`` (probability ``event_rate * period / 86400``)
    adds ``event_gain``; between events the excess over the lower clamp
    decays geometrically. ``h[0]`` is ``base``.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    low, high = cfg.clamp
    p_event = min(1.0, cfg.event_rate * period / 86400.0)
    u = _rng.stream(seed, _rng.HUMIDITY).random(n)
    h = np.empty(n)
    h[0] = cfg.base
    keep = 1.0 - cfg.decay
    for t in range(n - 1):
        nxt = low + (h[t] - low) * keep
        if u[t + 1] < p_event:
            nxt += cfg.event_gain
        h[t + 1] = min(high, max(low, nxt))
    return h


def _hours(ts: np.ndarray, utc_offset_hours: float) -> np.ndarray:
    local = ts + utc_offset_hours * 3600.0
    return np.mod(local, 86400.0) / 3600.0


def channel_means(hum: np.ndarray, ts: np.ndarray, base: float, ch: GatewayChannelConfig,
                  utc_offset_hours: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free RSSI and SNR for one gateway."""
    dh = hum - base
    rssi = ch.rssi0 + ch.slope * dh
    snr = ch.snr0 + ch.snr_slope * dh
    if ch.bimodal_offset != 0:
        start, end = ch.bimodal_window
        hours = _hours(ts, utc_offset_hours)
        rssi = rssi + ch.bimodal_offset * ((hours >= start) & (hours < end))
    return rssi, snr


def simulate_uplinks(hum, cfg: SimConfig) -> RecordSet:
    """One record per (sample, gateway), carrying the ground-truth humidity."""
    hum = np.asarray(hum, dtype=float)
    if hum.ndim != 1 or hum.size == 0:
        raise ArgumentError("humidity series must be a nonempty 1-D sequence")
    n = hum.size
    ts = cfg.start_ts + cfg.sample_period * np.arange(n, dtype=np.int64)
    records = []
    for gi, (gw_id, ch) in enumerate(cfg.gateways):
        rssi, snr = channel_means(hum, ts.astype(float), cfg.humidity.base, ch, cfg.utc_offset_hours)
        rssi = rssi + ch.noise_sigma * _rng.stream(cfg.seed, _rng.gateway_stream(gi, 0)).standard_normal(n)
        snr = snr + ch.snr_sigma * _rng.stream(cfg.seed, _rng.gateway_stream(gi, 1)).standard_normal(n)
        rssi = np.clip(rssi, -200.0, 0.0)
        snr = np.clip(snr, -30.0, 30.0)
        for t in range(n):
            records.append(UplinkRecord(int(ts[t]), gw_id, float(rssi[t]), float(snr[t]),
                                        float(hum[t]), None))
    return RecordSet.from_records(records)


def simulate(cfg: SimConfig, seed: Optional[int] = None) -> RecordSet:
    """Humidity trajectory plus uplinks, all drawn from ``seed`` (default ``cfg.seed``)."""
    if seed is not None:
        cfg = SimConfig(**{**_shallow(cfg), "seed": int(seed)})
    hum = simulate_humidity(cfg.humidity, cfg.n_samples, cfg.sample_period, cfg.seed)
    return simulate_uplinks(hum, cfg)


def _shallow(cfg: SimConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


# -- JSON config -----------------------------------------------------------


def sim_config_to_dict(cfg: SimConfig) -> dict:
    return {
        "sample_period": cfg.sample_period,
        "seed": cfg.seed,
        "n_samples": cfg.n_samples,
        "start_ts": cfg.start_ts,
        "utc_offset_hours": cfg.utc_offset_hours,
        "humidity": {**asdict(cfg.humidity), "clamp": list(cfg.humidity.clamp)},
        "gateways": [
            {"id": gid, **{**asdict(ch), "bimodal_window": list(ch.bimodal_window)}}
            for gid, ch in cfg.gateways
        ],
    }


def sim_config_from_dict(doc: dict) -> SimConfig:
    """Build a SimConfig; keys left out fall back to the defaults."""
    known = {"sample_period", "seed", "n_samples", "start_ts", "utc_offset_hours",
             "humidity", "gateways", "days"}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown SimConfig keys: {sorted(unknown)}")
    kwargs = {}
    for key in ("sample_period", "seed", "n_samples", "start_ts"):
        if key in doc:
            kwargs[key] = int(doc[key])
    if "utc_offset_hours" in doc:
        kwargs["utc_offset_hours"] = float(doc["utc_offset_hours"])
    if "days" in doc:
        if "n_samples" in doc:
            raise ValidationError("give either 'days' or 'n_samples', not both")
        period = kwargs.get("sample_period", 300)
        kwargs["n_samples"] = int(round(float(doc["days"]) * 86400 / period))
    if "humidity" in doc:
        h = dict(doc["humidity"])
        if "clamp" in h:
            h["clamp"] = tuple(float(v) for v in h["clamp"])
        kwargs["humidity"] = HumidityModelConfig(**h)
    if "gateways" in doc:
        gws = []
        for g in doc["gateways"]:
            g = dict(g)
            gid = g.pop("id")
            preset = g.pop("preset", None)
            base = {"far": far_gateway(), "near": near_gateway(), None: GatewayChannelConfig()}[preset]
            merged = {**asdict(base), **g}
            merged["bimodal_window"] = tuple(float(v) for v in merged["bimodal_window"])
            gws.append((str(gid), GatewayChannelConfig(**merged)))
        kwargs["gateways"] = tuple(gws)
    try:
        return SimConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


def load_sim_config(path) -> SimConfig:
    with open(path, encoding="utf-8") as fh:
        return sim_config_from_dict(json.load(fh))
