"""Event datasets: container format, normalization, windowing, synthetic
waveform generation, and intensity-measure labels.

A dataset holds, per event, an input tensor X (stations x time x 3
channels, normalized by the single largest amplitude observed anywhere in
the event's input window) and a 5 x N target matrix Y of log10 intensity
measures computed on the *full* waveform, most of which lies beyond the
input window.  The synthetic generator stands in for restricted real
recordings: each event radiates a fast small arrival and a slower larger
arrival from a random epicenter, with amplitude decaying in distance, so
far-station targets genuinely depend on the hidden continuation.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConsistencyError,
    DatasetFormatError,
    DatasetVersionError,
    DegenerateInputError,
    InputError,
    TruncatedFileError,
)
from .geo import StationSet, load_stations_csv, save_stations_csv
from .model import IM_NAMES

SA_PERIODS_S = (0.3, 1.0, 3.0)
SA_DAMPING = 0.05
LOG_EPS = 1e-12

# synthetic source model
V_P_KM_S = 6.0
V_S_KM_S = 3.5
DIST_FLOOR_KM = 10.0
DEFAULT_NOISE_AMP = 5e-5
P_REL_AMP = 0.06

DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
STATIONS_NAME = "stations.csv"


# ---------------------------------------------------------------------------
# container

@dataclass
class EventDataset:
    """Waveform windows X (E, N, T, C) and log10-IM targets Y (E, 5, N)."""

    stations: StationSet
    X: np.ndarray
    Y: np.ndarray
    sample_rate_hz: int

    @property
    def n_events(self) -> int:
        return self.X.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.X.shape[1]

    @property
    def n_samples(self) -> int:
        return self.X.shape[2]

    @property
    def n_channels(self) -> int:
        return self.X.shape[3]

    @property
    def input_seconds(self) -> int:
        return self.n_samples // self.sample_rate_hz

    def validate(self) -> None:
        if self.X.ndim != 4 or self.Y.ndim != 3:
            raise ConsistencyError(f"bad tensor ranks: X{self.X.shape}, Y{self.Y.shape}")
        if self.Y.shape != (self.n_events, len(IM_NAMES), self.n_nodes):
            raise ConsistencyError(
                f"Y shape {self.Y.shape} does not match (E, 5, N) for X {self.X.shape}")
        if self.n_nodes != len(self.stations):
            raise ConsistencyError(
                f"X has {self.n_nodes} nodes but station set has {len(self.stations)}")
        if not np.isfinite(self.X).all() or not np.isfinite(self.Y).all():
            raise ConsistencyError("non-finite values in X or Y")


# ---------------------------------------------------------------------------
# normalization and windowing

def normalize_by_input_max(x_event: np.ndarray) -> tuple[np.ndarray, float]:
    """Divide an event's window by its largest absolute amplitude anywhere.

    The maximum runs over all stations, channels and samples of the
    window.  Returns (normalized, scale); an all-zero event is degenerate.
    """
    x_event = np.asarray(x_event)
    scale = float(np.abs(x_event).max())
    if scale == 0.0:
        raise DegenerateInputError("all-zero event window cannot be normalized")
    return x_event / scale, scale


def truncate_window(x: np.ndarray, seconds: int, sample_rate_hz: int = 100) -> np.ndarray:
    """Keep the first ``seconds`` of an event window and re-normalize.

    x: (N, T, C).  seconds must lie in [4, 10] and fit inside x.
    """
    if not (4 <= seconds <= 10):
        raise InputError(f"window seconds must be in [4, 10], got {seconds}")
    t2 = seconds * sample_rate_hz
    if t2 > x.shape[1]:
        raise InputError(f"cannot truncate to {t2} samples, window has {x.shape[1]}")
    out, _ = normalize_by_input_max(x[:, :t2, :])
    return out


def truncate_dataset(ds: EventDataset, seconds: int) -> EventDataset:
    """Per-event truncation of the whole dataset; targets are unchanged."""
    xs = np.stack([
        truncate_window(np.asarray(ds.X[e], dtype=np.float64), seconds, ds.sample_rate_hz)
        for e in range(ds.n_events)
    ]).astype(ds.X.dtype)
    return EventDataset(stations=ds.stations, X=xs, Y=ds.Y.copy(),
                        sample_rate_hz=ds.sample_rate_hz)


# ---------------------------------------------------------------------------
# intensity measures

def _newmark_peak_abs_accel(accel: np.ndarray, dt: float, period: float,
                            damping: float = SA_DAMPING) -> np.ndarray:
    """Peak |absolute acceleration| of a damped SDOF oscillator, per row.

    accel: (..., T) ground acceleration.  Fixed-step average-acceleration
    recursion (gamma = 1/2, beta = 1/4), vectorized over leading axes.
    """
    accel = np.asarray(accel, dtype=np.float64)
    lead = accel.shape[:-1]
    p = -accel.reshape(-1, accel.shape[-1])
    rows, t_len = p.shape

    gamma, beta = 0.5, 0.25
    omega = 2.0 * math.pi / period
    c = 2.0 * damping * omega
    k = omega * omega
    k_eff = k + gamma / (beta * dt) * c + 1.0 / (beta * dt * dt)
    ca = 1.0 / (beta * dt) + (gamma / beta) * c
    cb = 1.0 / (2.0 * beta) + dt * (gamma / (2.0 * beta) - 1.0) * c

    u = np.zeros(rows)
    v = np.zeros(rows)
    acc = p[:, 0].copy()
    peak = np.abs(c * v + k * u)
    for i in range(t_len - 1):
        dp = p[:, i + 1] - p[:, i]
        du = (dp + ca * v + cb * acc) / k_eff
        dv = (gamma / (beta * dt)) * du - (gamma / beta) * v \
            + dt * (1.0 - gamma / (2.0 * beta)) * acc
        dacc = du / (beta * dt * dt) - v / (beta * dt) - acc / (2.0 * beta)
        u += du
        v += dv
        acc += dacc
        np.maximum(peak, np.abs(c * v + k * u), out=peak)
    return peak.reshape(lead)


def _cumtrapz(a: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative trapezoidal integral along the second-to-last axis, v[0] = 0."""
    inc = 0.5 * dt * (a[..., 1:, :] + a[..., :-1, :])
    v = np.zeros_like(a)
    np.cumsum(inc, axis=-2, out=v[..., 1:, :])
    return v


def compute_ims_batch(w: np.ndarray, dt: float) -> np.ndarray:
    """Intensity measures for waveforms (..., T, C) -> (..., 5).

    Channels are accelerations; PGA and SA take the max over channels,
    PGV integrates each channel first.  Column order matches IM_NAMES.
    """
    if dt <= 0:
        raise InputError(f"dt must be positive, got {dt}")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim < 2 or w.shape[-2] < 2:
        raise InputError(f"waveform needs at least 2 samples, got shape {w.shape}")
    pga = np.abs(w).max(axis=(-2, -1))
    pgv = np.abs(_cumtrapz(w, dt)).max(axis=(-2, -1))
    per_channel = np.moveaxis(w, -1, -2)  # (..., C, T)
    sas = [
        _newmark_peak_abs_accel(per_channel, dt, period).max(axis=-1)
        for period in SA_PERIODS_S
    ]
    return np.stack([pga, pgv, *sas], axis=-1)


def compute_ims(w: np.ndarray, dt: float) -> tuple[float, float, float, float, float]:
    """(pga, pgv, sa03, sa1, sa3) for one waveform (T, C)."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise InputError(f"expected (T, C), got {w.shape}")
    return tuple(float(x) for x in compute_ims_batch(w, dt))


# ---------------------------------------------------------------------------
# synthetic events

@dataclass(frozen=True)
class SynthEvent:
    epicenter: tuple[float, float]
    depth_km: float
    magnitude: float
    origin_time_s: float
    seed: int


def _station_distances_km(stations: StationSet, epicenter) -> np.ndarray:
    # equirectangular approximation; exact enough for the synthetic source
    # model and ~100x faster than per-pair haversine in the event loop
    coords = stations.coords()
    lat0, lon0 = epicenter
    km_per_deg = math.pi / 180.0 * 6371.0
    dlat = (coords[:, 0] - lat0) * km_per_deg
    dlon = (coords[:, 1] - lon0) * km_per_deg * math.cos(math.radians(lat0))
    return np.hypot(dlat, dlon)


def site_amplification(stations: StationSet, site_amp: float) -> np.ndarray:
    """Per-station ground-motion amplification factors (N,).

    A smooth position-linear field in log10 units: stations get a factor
    10^(site_amp * f) where f combines the min-max normalized coordinates.
    This mimics systematic site effects (basins amplify, rock attenuates)
    that vary gradually across a network.  site_amp = 0 disables it.
    """
    if site_amp == 0.0:
        return np.ones(len(stations))
    coords = stations.coords()

    def pm1(col: np.ndarray) -> np.ndarray:
        span = col.max() - col.min()
        if span == 0.0:
            return np.zeros_like(col)
        return 2.0 * (col - col.min()) / span - 1.0

    f = 0.8 * pm1(coords[:, 0]) + 0.6 * pm1(coords[:, 1])
    return 10.0 ** (site_amp * f)


def synth_event_waveforms(stations: StationSet, event: SynthEvent,
                          total_seconds: float, sample_rate_hz: int = 100,
                          noise_amp: float = DEFAULT_NOISE_AMP,
                          site_amp: float = 0.0) -> np.ndarray:
    """Full-length 3-channel acceleration traces (N, T_full, C) for one event.

    Two wavelets per station: a fast low-amplitude arrival at
    distance / v_p and a slower larger one at distance / v_s, both scaled
    by 10^(magnitude - 3) / (hypocentral distance + floor) and the
    station's site amplification.  White noise of absolute amplitude
    ``noise_amp`` is added on top, so quiet traces carry an absolute
    reference level.
    """
    rng = np.random.default_rng(event.seed)
    n = len(stations)
    t_len = int(round(total_seconds * sample_rate_hz))
    dt = 1.0 / sample_rate_hz
    t = np.arange(t_len) * dt

    d_epi = _station_distances_km(stations, event.epicenter)
    d_hyp = np.hypot(d_epi, event.depth_km)
    amp = (10.0 ** (event.magnitude - 3.0) / (d_hyp + DIST_FLOOR_KM)
           * site_amplification(stations, site_amp))

    # per-event channel mixes, shared by all stations so that stations at
    # equal distance record identical signals
    mix_p = np.array([1.0, 0.5, 0.5]) * (0.9 + 0.2 * rng.random(3))
    mix_s = np.array([0.5, 1.0, 0.8]) * (0.9 + 0.2 * rng.random(3))
    # corner-frequency scaling: larger events ring slower and longer, so
    # magnitude is visible in waveform shape, not just absolute amplitude
    corner = 10.0 ** (-0.2 * (event.magnitude - 4.0))
    f_p = 2.0 * corner * (0.95 + 0.1 * rng.random())
    f_s = 0.7 * corner * (0.95 + 0.1 * rng.random())
    tau_s = 8.0 * 10.0 ** (0.15 * (event.magnitude - 4.0))

    def wavelet(onset_s: np.ndarray, freq: float, decay_s: float) -> np.ndarray:
        rel = t[None, :] - onset_s[:, None]
        env = np.where(rel > 0.0,
                       np.minimum(rel / 0.2, 1.0) * np.exp(-np.maximum(rel, 0.0) / decay_s),
                       0.0)
        return env * np.sin(2.0 * math.pi * freq * rel)

    wp = wavelet(event.origin_time_s + d_epi / V_P_KM_S, f_p, 2.0)
    ws = wavelet(event.origin_time_s + d_epi / V_S_KM_S, f_s, tau_s)

    w = amp[:, None, None] * (P_REL_AMP * wp[:, :, None] * mix_p[None, None, :]
                              + ws[:, :, None] * mix_s[None, None, :])
    if noise_amp > 0.0:
        w = w + noise_amp * rng.standard_normal((n, t_len, 3))
    return w


def synth_dataset(stations: StationSet, n_events: int, seed: int,
                  input_seconds: int = 10, total_seconds: float = 60.0,
                  sample_rate_hz: int = 100,
                  noise_amp: float = DEFAULT_NOISE_AMP,
                  mag_range: tuple[float, float] = (3.0, 5.5),
                  site_amp: float = 0.0) -> EventDataset:
    """Generate a reproducible synthetic dataset.

    X holds the normalized first ``input_seconds`` of each event; Y holds
    log10 intensity measures computed on the entire ``total_seconds``
    waveform, so targets depend on signal the model never sees.  A narrow
    ``mag_range`` pins source strength, leaving source-receiver distance
    as the dominant driver of the targets; a nonzero ``site_amp`` adds a
    position-linear per-station amplification on top.
    """
    if n_events < 1:
        raise InputError(f"n_events must be >= 1, got {n_events}")
    if total_seconds <= input_seconds:
        raise InputError("total_seconds must exceed input_seconds so labels stay partly hidden")
    if not mag_range[0] <= mag_range[1]:
        raise InputError(f"mag_range must be ordered, got {mag_range}")

    rng = np.random.default_rng(seed)
    coords = stations.coords()
    lat_lo, lat_hi = coords[:, 0].min(), coords[:, 0].max()
    lon_lo, lon_hi = coords[:, 1].min(), coords[:, 1].max()
    # epicenters stay close to the station hull so the nearest station
    # always catches the fast arrival inside the input window; far
    # stations still see nothing but their noise floor
    margin_lat = 0.05 * (lat_hi - lat_lo) + 0.02
    margin_lon = 0.05 * (lon_hi - lon_lo) + 0.02

    events = []
    for _ in range(n_events):
        lat = rng.uniform(lat_lo - margin_lat, lat_hi + margin_lat)
        lon = rng.uniform(lon_lo - margin_lon, lon_hi + margin_lon)
        depth = rng.uniform(2.0, 15.0)
        mag = rng.uniform(*mag_range)
        t0 = rng.uniform(0.0, 1.0)
        events.append(SynthEvent((lat, lon), depth, mag, t0,
                                 int(rng.integers(0, 2**62))))

    n = len(stations)
    window = input_seconds * sample_rate_hz
    dt = 1.0 / sample_rate_hz
    X = np.empty((n_events, n, window, 3), dtype=np.float32)
    Y = np.empty((n_events, len(IM_NAMES), n), dtype=np.float32)

    chunk = max(1, min(n_events, 64))
    for lo in range(0, n_events, chunk):
        hi = min(lo + chunk, n_events)
        wave = np.stack([
            synth_event_waveforms(stations, events[e], total_seconds,
                                  sample_rate_hz, noise_amp, site_amp)
            for e in range(lo, hi)
        ])
        ims = compute_ims_batch(wave, dt)                       # (chunk, N, 5)
        Y[lo:hi] = np.log10(ims + LOG_EPS).transpose(0, 2, 1)
        for e in range(lo, hi):
            X[e], _ = normalize_by_input_max(wave[e - lo, :, :window, :])
    ds = EventDataset(stations=stations, X=X, Y=Y, sample_rate_hz=sample_rate_hz)
    ds.validate()
    return ds


def random_stations(n: int, seed: int,
                    lat_range=(42.0, 43.5), lon_range=(12.0, 14.0)) -> StationSet:
    """Uniformly placed synthetic station set inside a bounding box."""
    if n < 2:
        raise InputError(f"need at least 2 stations, got {n}")
    rng = np.random.default_rng(seed)
    pairs = [
        (f"S{i:03d}", rng.uniform(*lat_range), rng.uniform(*lon_range))
        for i in range(n)
    ]
    return StationSet.from_pairs(pairs)


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + stations.csv + raw little-endian f32 blobs

def save_dataset(path, ds: EventDataset) -> None:
    ds.validate()
    os.makedirs(path, exist_ok=True)
    manifest = {
        "version": DATASET_VERSION,
        "E": ds.n_events,
        "N": ds.n_nodes,
        "T": ds.n_samples,
        "C": ds.n_channels,
        "sample_rate_hz": ds.sample_rate_hz,
        "station_file": STATIONS_NAME,
        "byte_order": "little-endian",
        "dtype": "f32",
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    save_stations_csv(os.path.join(path, STATIONS_NAME), ds.stations)
    np.ascontiguousarray(ds.X, dtype="<f4").tofile(os.path.join(path, "X.bin"))
    np.ascontiguousarray(ds.Y, dtype="<f4").tofile(os.path.join(path, "Y.bin"))


def _read_blob(path, expected_count: int, shape) -> np.ndarray:
    actual = os.path.getsize(path)
    expected = expected_count * 4
    if actual != expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} bytes, file ends at offset {actual}")
    return np.fromfile(path, dtype="<f4").reshape(shape)


def load_dataset(path) -> EventDataset:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DatasetFormatError(f"{manifest_path} not found")
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(
                f"{manifest_path}: corrupt manifest at offset {exc.pos}: {exc.msg}") from None

    version = manifest.get("version")
    if version != DATASET_VERSION:
        raise DatasetVersionError(
            f"unsupported dataset version {version!r}, expected {DATASET_VERSION}")
    for key in ("E", "N", "T", "C", "sample_rate_hz", "station_file", "dtype", "byte_order"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing key {key!r}")
    if manifest["dtype"] != "f32" or manifest["byte_order"] != "little-endian":
        raise DatasetFormatError(
            f"unsupported encoding {manifest['dtype']}/{manifest['byte_order']}")

    e, n, t, c = (int(manifest[k]) for k in ("E", "N", "T", "C"))
    stations = load_stations_csv(os.path.join(path, manifest["station_file"]))
    if len(stations) != n:
        raise ConsistencyError(
            f"manifest N={n} but station file has {len(stations)} stations")
    X = _read_blob(os.path.join(path, "X.bin"), e * n * t * c, (e, n, t, c))
    Y = _read_blob(os.path.join(path, "Y.bin"), e * len(IM_NAMES) * n, (e, len(IM_NAMES), n))
    ds = EventDataset(stations=stations, X=X, Y=Y,
                      sample_rate_hz=int(manifest["sample_rate_hz"]))
    ds.validate()
    return ds
