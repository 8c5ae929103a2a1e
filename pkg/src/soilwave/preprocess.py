"""Fading decomposition, humidity-class aggregation, correlation and dataset construction."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import AlignmentError, ArgumentError, DegenerateInputError
from .telemetry import RecordSet

DEFAULT_WINDOW = 24
DEFAULT_STEPS = 18


@dataclass(frozen=True)
class FadingDecomposition:
    raw: np.ndarray
    long_term: np.ndarray
    short_term: np.ndarray
    window_len: int = DEFAULT_WINDOW


def decompose_fading(raw, window_len: int = DEFAULT_WINDOW) -> FadingDecomposition:
    """Split ``raw`` into a trailing-mean long-term part and the residual.

    The first ``window_len - 1`` samples average over the available prefix.
    ``short_term`` is ``raw - long_term`` and ``long_term`` is then nudged so
    that ``long_term + short_term`` reproduces ``raw`` exactly in floating
    point. That holds for quantized readings and for any series whose values
    share a sign and stay within a factor of two; elsewhere (a series crossing
    zero) the sum can miss ``raw`` by half an ulp of ``long_term``.
    """
    if window_len < 1:
        raise ArgumentError("window_len must be >= 1")
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1 or raw.size == 0:
        raise ArgumentError("raw must be a nonempty 1-D series")
    n = raw.size
    # sliding sums by direct per-window summation avoid cumulative-sum drift on long series
    if n >= window_len:
        windows = np.lib.stride_tricks.sliding_window_view(raw, window_len)
        tail = windows.sum(axis=1) / window_len
    else:
        tail = np.empty(0)
    head_len = min(window_len - 1, n)
    head = np.cumsum(raw[:head_len]) / np.arange(1, head_len + 1)
    long_term = np.concatenate([head, tail])
    short_term = raw - long_term
    long_term = _exact_complement(raw, short_term)
    return FadingDecomposition(raw, long_term, short_term, window_len)


def _exact_complement(raw: np.ndarray, short: np.ndarray) -> np.ndarray:
    """``long`` with ``long + short == raw`` in floating point, element-wise.

    Exact whenever raw and its window mean have comparable magnitude (any
    RSSI series). Near a zero crossing of raw the pair can be off by one ulp
    of ``long``; no float pair can do better there.
    """
    long = raw - short
    bad = long + short != raw
    for _ in range(8):
        if not bad.any():
            break
        step = np.where(long[bad] + short[bad] > raw[bad], -np.inf, np.inf)
        long[bad] = np.nextafter(long[bad], step)
        bad = long + short != raw
    if bad.any():
        long[bad] = raw[bad] - short[bad]
    return long


@dataclass(frozen=True)
class HumidityClassRow:
    class_low: float
    class_high: float
    mean_rssi: float
    mean_snr: float
    count: int


def aggregate_classes(humidity, signal, low: float, high: float, width: float = 0.5,
                      snr=None) -> list[HumidityClassRow]:
    """Average ``signal`` (and optionally ``snr``) within half-open humidity classes.

    Class ``k`` covers ``[low + k*width, low + (k+1)*width)``; samples outside
    ``[low, high)`` are ignored and empty classes are omitted. When ``snr`` is
    not given, ``mean_snr`` is NaN.
    """
    h = np.asarray(humidity, dtype=float)
    s = np.asarray(signal, dtype=float)
    if h.shape != s.shape or h.ndim != 1:
        raise ArgumentError("humidity and signal must be 1-D series of equal length")
    if snr is not None:
        q = np.asarray(snr, dtype=float)
        if q.shape != h.shape:
            raise ArgumentError("snr must match humidity length")
    if width <= 0:
        raise ArgumentError("width must be > 0")
    if not low < high:
        raise ArgumentError("low must be < high")
    inside = (h >= low) & (h < high)
    k = np.floor((h[inside] - low) / width).astype(np.int64)
    sig = s[inside]
    sn = q[inside] if snr is not None else None
    rows = []
    for cls in np.unique(k):
        sel = k == cls
        rows.append(HumidityClassRow(
            class_low=float(low + cls * width),
            class_high=float(low + (cls + 1) * width),
            mean_rssi=float(sig[sel].mean()),
            mean_snr=float(sn[sel].mean()) if sn is not None else math.nan,
            count=int(sel.sum()),
        ))
    return rows


def class_rows_csv(rows: Sequence[HumidityClassRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["class_low", "class_high", "mean_rssi", "mean_snr", "count"])
    for r in rows:
        w.writerow([repr(r.class_low), repr(r.class_high), repr(r.mean_rssi),
                    "" if math.isnan(r.mean_snr) else repr(r.mean_snr), r.count])
    return out.getvalue()


def pearson(x, y) -> float:
    """Sample Pearson correlation; raises on zero variance instead of returning NaN."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError("pearson needs two 1-D series of equal length")
    if x.size < 2:
        raise ArgumentError("pearson needs at least 2 samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("zero variance in pearson input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def correlation_matrix(columns: dict[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    names = list(columns)
    m = np.eye(len(names))
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            m[i, j] = m[j, i] = pearson(columns[a], columns[names[j]])
    return names, m


def matrix_csv(names: Sequence[str], m: np.ndarray) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([""] + list(names))
    for name, row in zip(names, m):
        w.writerow([name] + [repr(float(v)) for v in row])
    return out.getvalue()


# -- datasets --------------------------------------------------------------


@dataclass(frozen=True)
class NormParams:
    feature_min: np.ndarray
    feature_max: np.ndarray
    target_min: float
    target_max: float

    def to_dict(self) -> dict:
        return {
            "feature_min": [float(v) for v in self.feature_min],
            "feature_max": [float(v) for v in self.feature_max],
            "target_min": float(self.target_min),
            "target_max": float(self.target_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormParams":
        return cls(np.asarray(d["feature_min"], dtype=float), np.asarray(d["feature_max"], dtype=float),
                   float(d["target_min"]), float(d["target_max"]))


@dataclass(frozen=True)
class Dataset:
    """Chronologically ordered feature rows with humidity targets.

    ``norm_params`` is ``None`` while the values are on their original scale.
    """

    feature_names: tuple[str, ...]
    features: np.ndarray
    targets: np.ndarray
    norm_params: Optional[NormParams] = None
    ts: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        t = np.asarray(self.targets, dtype=float)
        if f.ndim != 2 or t.ndim != 1 or f.shape[0] != t.shape[0]:
            raise ArgumentError(f"features {f.shape} and targets {t.shape} do not line up")
        if f.shape[1] != len(self.feature_names):
            raise ArgumentError("one feature name per column required")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self):
        return self.targets.shape[0]

    def rows(self, start: int, stop: int) -> "Dataset":
        ts = None if self.ts is None else self.ts[start:stop]
        return replace(self, features=self.features[start:stop], targets=self.targets[start:stop], ts=ts)


@dataclass(frozen=True)
class WindowedDataset:
    windows: np.ndarray  # (m, steps, d)
    targets: np.ndarray  # (m,)
    steps: int

    def __len__(self):
        return self.targets.shape[0]


def fit_minmax(ds: Dataset) -> NormParams:
    fmin = ds.features.min(axis=0)
    fmax = ds.features.max(axis=0)
    for name, lo, hi in zip(ds.feature_names, fmin, fmax):
        if not hi > lo:
            raise DegenerateInputError(f"column {name!r} is constant; cannot min-max normalize")
    tmin, tmax = float(ds.targets.min()), float(ds.targets.max())
    if not tmax > tmin:
        raise DegenerateInputError("target column is constant; cannot min-max normalize")
    return NormParams(fmin, fmax, tmin, tmax)


def apply_minmax(ds: Dataset, params: NormParams) -> Dataset:
    f = (ds.features - params.feature_min) / (params.feature_max - params.feature_min)
    t = (ds.targets - params.target_min) / (params.target_max - params.target_min)
    return replace(ds, features=f, targets=t, norm_params=params)


def normalize_minmax(ds: Dataset) -> Dataset:
    """Scale every column and the target to [0, 1] with parameters fit on ``ds``."""
    return apply_minmax(ds, fit_minmax(ds))


def denormalize(value, lo: float, hi: float):
    """Inverse of ``(v - lo) / (hi - lo)``."""
    if np.ndim(value):
        return np.asarray(value, dtype=float) * (hi - lo) + lo
    return float(value) * (hi - lo) + lo


def denormalize_target(value, params: NormParams):
    return denormalize(value, params.target_min, params.target_max)


def chronological_split(ds: Dataset, train_fraction: float = 0.8,
                        normalize: bool = True) -> tuple[Dataset, Dataset]:
    """First ``floor(n * train_fraction)`` rows train, the rest test; no shuffling.

    With ``normalize`` the min-max parameters are fit on the train part and
    applied to both parts.
    """
    if not 0 < train_fraction < 1:
        raise ArgumentError("train_fraction must lie in (0, 1)")
    n = len(ds)
    if n < 2:
        raise ArgumentError("need at least 2 rows to split")
    n_train = math.floor(n * train_fraction)
    train, test = ds.rows(0, n_train), ds.rows(n_train, n)
    if normalize:
        params = fit_minmax(train)
        train, test = apply_minmax(train, params), apply_minmax(test, params)
    return train, test


def split_sizes(n: int, train_fraction: float = 0.8) -> tuple[int, int]:
    if n < 2:
        raise ArgumentError("need at least 2 rows to split")
    if not 0 < train_fraction < 1:
        raise ArgumentError("train_fraction must lie in (0, 1)")
    k = math.floor(n * train_fraction)
    return k, n - k


def make_lag_features(ds: Dataset) -> Dataset:
    """Row t becomes ``features[t] ++ features[t-1]``; the first row is consumed."""
    if len(ds) < 2:
        raise ArgumentError("lag features need at least 2 rows")
    f = np.hstack([ds.features[1:], ds.features[:-1]])
    names = tuple(ds.feature_names) + tuple(f"{n}_lag1" for n in ds.feature_names)
    ts = None if ds.ts is None else ds.ts[1:]
    return Dataset(names, f, ds.targets[1:], ds.norm_params, ts)


def make_windows(ds: Dataset, steps: int = DEFAULT_STEPS) -> WindowedDataset:
    """Stride-1 windows of ``steps`` rows; each labelled with its last row's target."""
    if steps < 1:
        raise ArgumentError("steps must be >= 1")
    n = len(ds)
    if n < steps:
        raise ArgumentError(f"need at least {steps} rows for windows, got {n}")
    view = np.lib.stride_tricks.sliding_window_view(ds.features, steps, axis=0)
    windows = np.ascontiguousarray(np.moveaxis(view, -1, 1))
    return WindowedDataset(windows, ds.targets[steps - 1:].copy(), steps)


def align_gateways(rs: RecordSet, primary: Optional[str] = None,
                   gateways: Optional[Sequence[str]] = None,
                   components: str = "raw", window_len: int = DEFAULT_WINDOW) -> Dataset:
    """One feature row per primary-gateway timestamp, columns ``rssi_<gw>, snr_<gw>``.

    Other gateways are carried forward from their last observation at or
    before that timestamp; rows preceding the first observation of any
    gateway are dropped. Targets are the primary gateway's humidity.
    ``components`` selects ``raw`` values or the ``long``/``short`` fading
    components (computed per gateway on its own series).
    """
    if len(rs) == 0:
        raise ArgumentError("record set is empty")
    if components not in ("raw", "long", "short"):
        raise ArgumentError(f"components must be raw, long or short, got {components!r}")
    gws = list(gateways) if gateways is not None else list(rs.gateways)
    primary = primary or gws[0]
    if primary not in gws:
        gws.insert(0, primary)
    per = {}
    for g in gws:
        recs = rs.for_gateway(g)
        if not recs:
            raise AlignmentError(f"gateway {g!r} has no records")
        ts = np.array([r.ts for r in recs], dtype=np.int64)
        rssi = np.array([r.rssi for r in recs])
        snr = np.array([r.snr for r in recs])
        if components != "raw":
            pick = {"long": "long_term", "short": "short_term"}[components]
            rssi = getattr(decompose_fading(rssi, window_len), pick)
            snr = getattr(decompose_fading(snr, window_len), pick)
        per[g] = (ts, rssi, snr, recs)

    p_ts, _, _, p_recs = per[primary]
    hum = np.array([np.nan if r.soil_humidity is None else r.soil_humidity for r in p_recs])
    keep = ~np.isnan(hum)
    cols, names = [], []
    for g in gws:
        ts, rssi, snr, _ = per[g]
        idx = np.searchsorted(ts, p_ts, side="right") - 1
        keep &= idx >= 0
        idx = np.maximum(idx, 0)
        cols += [rssi[idx], snr[idx]]
        names += [f"rssi_{g}", f"snr_{g}"]
    if not keep.any():
        raise AlignmentError("no timestamp is covered by every gateway")
    features = np.column_stack(cols)[keep]
    return Dataset(tuple(names), features, hum[keep], None, p_ts[keep])
