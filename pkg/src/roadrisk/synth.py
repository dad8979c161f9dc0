"""Synthetic highway world with planted rates and covariate effects.

Writes the four source CSVs that ingestion reads plus ``truth.json`` holding
every planted parameter. Counts per (segment, window) are zero-inflated
Poisson: a structural zero with probability ``zero_inflation``, otherwise
Poisson with ``log(lambda) = log(lambda_c) + sum_k b_k * (x_k - ref_k)``.
``lambda_c`` is chosen so that a cell at reference covariates has incident
probability equal to its cluster's planted rate.
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import date, datetime
from pathlib import Path

import numpy as np
import pandas as pd

from .domain import WINDOW_HOURS, WINDOWS_PER_DAY, haversine_km_array
from .errors import ConfigError
from .ingest import KM_PER_MILE

KM_PER_DEG = math.pi * 6371.0 / 180.0

# covariates with a planted effect, and the value at which the effect is zero
EFFECT_REFERENCE = {"precipitation": 0.0, "visibility": 16.0, "congestion": 0.0,
                    "wind_speed": 0.0, "temperature": 15.0}


@dataclass
class SyntheticWorldSpec:
    n_segments: int = 200
    start: date = date(2019, 1, 1)
    months: int = 14
    bbox: tuple = (35.0, 36.2, -87.6, -85.8)
    n_stations: int = 12
    n_hotspots: int = 3
    hotspot_spread_deg: float = 0.05
    high_fraction: float = 0.2
    high_rate: float = 0.05
    low_rate: float = 0.005
    zero_inflation: float = 0.3
    effects: dict = field(default_factory=lambda: {"precipitation": 0.3, "congestion": 2.5})
    rain_start_prob: float = 0.03
    rain_stop_prob: float = 0.25
    rain_mean_mm: float = 1.5
    temperature_noise: float = 1.5
    congestion_noise: float = 0.03
    traffic_interval_minutes: int = 60
    missing_fraction: float = 0.0
    offroad_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_segments < 2 or self.months < 1 or self.n_stations < 1 or self.n_hotspots < 1:
            raise ConfigError("world needs >= 2 segments, >= 1 month, station and hotspot")
        if not 0 < self.high_fraction < 1:
            raise ConfigError("high_fraction must be in (0, 1)")
        if not 0 <= self.zero_inflation < 1:
            raise ConfigError("zero_inflation must be in [0, 1)")
        for r in (self.high_rate, self.low_rate):
            if not 0 < r < 1 - self.zero_inflation:
                raise ConfigError(f"rate {r} must lie in (0, 1 - zero_inflation)")
        if 240 % self.traffic_interval_minutes or self.traffic_interval_minutes < 1:
            raise ConfigError("traffic_interval_minutes must divide 240")
        if not 0 <= self.missing_fraction < 1 or not 0 <= self.offroad_fraction < 1:
            raise ConfigError("missing_fraction and offroad_fraction must be in [0, 1)")
        bad = set(self.effects) - set(EFFECT_REFERENCE)
        if bad:
            raise ConfigError(f"no planted effect possible for {sorted(bad)}")
        lat0, lat1, lon0, lon1 = self.bbox
        if not (lat1 > lat0 and lon1 > lon0):
            raise ConfigError("bbox is degenerate")

    @property
    def end(self) -> date:
        m = self.start.month - 1 + self.months
        return date(self.start.year + m // 12, m % 12 + 1, self.start.day)

    @property
    def n_high(self) -> int:
        return max(1, int(round(self.high_fraction * self.n_segments)))

    def base_lambda(self, rate: float) -> float:
        """Poisson mean giving P(count >= 1) = rate under the zero inflation."""
        return -math.log1p(-rate / (1.0 - self.zero_inflation))


def load_world_spec(path) -> SyntheticWorldSpec:
    cp = configparser.ConfigParser(interpolation=None)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"spec file {path} not found")
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if cp.sections() != ["world"]:
        raise ConfigError("world spec needs exactly one [world] section")
    sec = cp["world"]
    known = {f.name: f for f in fields(SyntheticWorldSpec)}
    kwargs, effects = {}, {}
    for key, raw in sec.items():
        try:
            if key.startswith("effect_"):
                effects[key[len("effect_"):]] = float(raw)
            elif key == "start":
                kwargs[key] = date.fromisoformat(raw.strip())
            elif key == "bbox":
                kwargs[key] = tuple(float(v) for v in raw.split(","))
                if len(kwargs[key]) != 4:
                    raise ValueError("bbox needs 4 numbers")
            elif key in known and key != "effects":
                kwargs[key] = type(getattr(SyntheticWorldSpec(), key))(raw.strip())
            else:
                raise ConfigError(f"unknown key {key!r} in [world]")
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    if effects:
        kwargs["effects"] = effects
    return SyntheticWorldSpec(**kwargs)


# --------------------------------------------------------------------------- geometry


def _polyline(rng, start, length_km, n_pts, bbox):
    lat0, lat1, lon0, lon1 = bbox
    step = length_km / (n_pts - 1)
    heading = rng.uniform(0, 2 * math.pi)
    pts = [start]
    for _ in range(n_pts - 1):
        heading += rng.normal(0, 0.25)
        lat, lon = pts[-1]
        nlat = lat + step * math.cos(heading) / KM_PER_DEG
        nlon = lon + step * math.sin(heading) / (KM_PER_DEG * math.cos(math.radians(lat)))
        if not (lat0 < nlat < lat1 and lon0 < nlon < lon1):
            heading += math.pi  # bounce back inside the box
            nlat = lat + step * math.cos(heading) / KM_PER_DEG
            nlon = lon + step * math.sin(heading) / (KM_PER_DEG * math.cos(math.radians(lat)))
        pts.append((nlat, nlon))
    return [(round(a, 6), round(b, 6)) for a, b in pts]


def _wkt(poly) -> str:
    return "LINESTRING (" + ", ".join(f"{lon:.6f} {lat:.6f}" for lat, lon in poly) + ")"


def _length_km(poly) -> float:
    p = np.array(poly)
    return float(haversine_km_array(p[:-1, 0], p[:-1, 1], p[1:, 0], p[1:, 1]).sum())


def _point_on(rng, poly):
    p = np.array(poly)
    seg = haversine_km_array(p[:-1, 0], p[:-1, 1], p[1:, 0], p[1:, 1])
    i = rng.choice(len(seg), p=seg / seg.sum())
    t = rng.uniform()
    lat, lon = p[i] + t * (p[i + 1] - p[i])
    jitter = rng.normal(0, 0.003, 2)  # ~3 m off the centerline
    return lat + jitter[0] / KM_PER_DEG, lon + jitter[1] / (KM_PER_DEG * math.cos(math.radians(lat)))


# --------------------------------------------------------------------------- generator


def _fixed(values, decimals: int) -> np.ndarray:
    """Fixed-point strings through a lookup table; much faster than per-value formatting."""
    q = np.rint(np.asarray(values, dtype=float) * 10 ** decimals).astype(np.int64)
    lo = int(q.min()) if q.size else 0
    lut = np.array([f"{v / 10 ** decimals:.{decimals}f}" for v in range(lo, int(q.max()) + 1 if q.size else 1)],
                   dtype=object)
    return lut[q - lo]


def _congestion_profile(hours: np.ndarray) -> np.ndarray:
    """Two rush-hour bumps on a light base level, by hour of day."""
    h = hours.astype(float)
    return 0.05 + 0.45 * np.exp(-((h - 7.5) / 1.2) ** 2) + 0.55 * np.exp(-((h - 17.0) / 1.5) ** 2)


def gen_synthetic(spec: SyntheticWorldSpec, out_dir) -> dict:
    """Write segments/incidents/weather/traffic CSVs and truth.json into ``out_dir``.

    Returns the truth dictionary. Output bytes depend only on ``spec``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    lat0, lat1, lon0, lon1 = spec.bbox
    margin = 0.1
    n_days = (spec.end - spec.start).days
    n_hours = n_days * 24
    n_win = n_days * WINDOWS_PER_DAY

    # stations on a jittered lattice
    n_rows = max(1, int(round(math.sqrt(spec.n_stations * (lat1 - lat0) / (lon1 - lon0)))))
    n_cols = math.ceil(spec.n_stations / n_rows)
    stations = []
    for i in range(spec.n_stations):
        r, c = divmod(i, n_cols)
        lat = lat0 + (r + 0.5) / n_rows * (lat1 - lat0) + rng.normal(0, 0.02)
        lon = lon0 + (c + 0.5) / n_cols * (lon1 - lon0) + rng.normal(0, 0.02)
        stations.append((f"ST{i + 1:02d}", round(lat, 5), round(lon, 5)))
    st_lat = np.array([s[1] for s in stations])
    st_lon = np.array([s[2] for s in stations])

    # segments: high-rate ones clustered near hotspots, low-rate ones anywhere
    hotspots = [(rng.uniform(lat0 + 3 * margin, lat1 - 3 * margin), rng.uniform(lon0 + 3 * margin, lon1 - 3 * margin))
                for _ in range(spec.n_hotspots)]
    is_high = np.zeros(spec.n_segments, dtype=bool)
    is_high[rng.choice(spec.n_segments, spec.n_high, replace=False)] = True
    seg_rows, polys = [], []
    for i in range(spec.n_segments):
        if is_high[i]:
            h = hotspots[i % spec.n_hotspots]
            start = (float(np.clip(h[0] + rng.normal(0, spec.hotspot_spread_deg), lat0 + margin, lat1 - margin)),
                     float(np.clip(h[1] + rng.normal(0, spec.hotspot_spread_deg), lon0 + margin, lon1 - margin)))
        else:
            start = (rng.uniform(lat0 + margin, lat1 - margin), rng.uniform(lon0 + margin, lon1 - margin))
        poly = _polyline(rng, start, rng.uniform(0.8, 4.0), int(rng.integers(3, 7)), spec.bbox)
        polys.append(poly)
        ffs = float(rng.choice([55.0, 60.0, 65.0, 70.0]))
        seg_rows.append({
            "id": f"S{i + 1:04d}",
            "road_name": f"{rng.choice(['I', 'SR', 'US'])}-{int(rng.integers(1, 99))}",
            "wkt_polyline": _wkt(poly),
            "lanes": int(rng.integers(2, 5)),
            "miles": round(_length_km(poly) / KM_PER_MILE, 4),
            "free_flow_speed": ffs,
        })
    seg_ids = [r["id"] for r in seg_rows]
    reps = np.array([np.mean(p, axis=0) for p in polys])
    d_st = haversine_km_array(reps[:, :1], reps[:, 1:], st_lat[None, :], st_lon[None, :])
    seg_station = np.argmin(d_st, axis=1)  # ties to the smaller id, matching ingestion

    # hourly weather per station
    hours = np.arange(n_hours)
    hour_of_day = hours % 24
    day_of_year = np.array([(spec.start.toordinal() + d) for d in hours // 24]) - date(spec.start.year, 1, 1).toordinal()
    rain = np.zeros((spec.n_stations, n_hours), dtype=bool)
    state = rng.uniform(size=spec.n_stations) < 0.1
    u = rng.uniform(size=(n_hours, spec.n_stations))
    for t in range(n_hours):
        state = np.where(state, u[t] >= spec.rain_stop_prob, u[t] < spec.rain_start_prob)
        rain[:, t] = state
    precip = np.round(rain * rng.exponential(spec.rain_mean_mm, rain.shape), 2)
    temp = (15 + 10 * np.sin(2 * np.pi * (day_of_year - 110) / 365.0) + 5 * np.sin(2 * np.pi * (hour_of_day - 9) / 24.0)
            )[None, :] - 4 * rain + rng.normal(0, spec.temperature_noise, rain.shape)
    temp = np.round(temp, 1)
    vis = np.round(np.clip(16 - rain * rng.uniform(4, 12, rain.shape) - np.abs(rng.normal(0, 0.5, rain.shape)), 0.2, 16), 1)
    wind = np.round(rng.gamma(2.0, 2.5, rain.shape) + 3 * rain, 1)

    # traffic readings per segment
    step_min = spec.traffic_interval_minutes
    n_read = n_days * 24 * 60 // step_min
    minute = np.arange(n_read) * step_min
    read_hour = minute // 60
    read_dow = (spec.start.weekday() + read_hour // 24) % 7
    busy = np.where(is_high, rng.uniform(0.7, 1.2, spec.n_segments), rng.uniform(0.3, 1.0, spec.n_segments))
    profile = _congestion_profile(read_hour % 24) * np.where(read_dow >= 5, 0.4, 1.0)
    cong_true = (busy[:, None] * profile[None, :] + 0.15 * rain[seg_station][:, read_hour]
                 + rng.normal(0, spec.congestion_noise, (spec.n_segments, n_read)))
    cong_true = np.clip(cong_true, -0.05, 0.95)
    ff = np.array([r["free_flow_speed"] for r in seg_rows])
    current = np.round(ff[:, None] * (1 - cong_true), 1)
    confidence = rng.choice([10, 20, 30], size=current.shape, p=[0.1, 0.2, 0.7])
    observed_cong = np.maximum(0.0, (ff[:, None] - current) / ff[:, None])
    read_win = minute // (WINDOW_HOURS * 60)
    n_per_win = WINDOW_HOURS * 60 // step_min

    # cells with all traffic readings missing
    missing = rng.uniform(size=(spec.n_segments, n_win)) < spec.missing_fraction
    keep_reading = ~missing[:, read_win]

    # window aggregates seen by ingestion
    def win_reduce(a, how):
        r = a.reshape(a.shape[0], n_win, -1)
        return r.sum(axis=2) if how == "sum" else r.mean(axis=2)

    agg = {
        "precipitation": win_reduce(precip, "sum")[seg_station],
        "visibility": win_reduce(vis, "mean")[seg_station],
        "wind_speed": win_reduce(wind, "mean")[seg_station],
        "temperature": win_reduce(temp, "mean")[seg_station],
        "congestion": observed_cong.reshape(spec.n_segments, n_win, n_per_win).mean(axis=2),
    }
    rates = np.where(is_high, spec.high_rate, spec.low_rate)
    lam_c = np.array([spec.base_lambda(r) for r in rates])
    shift = np.zeros((spec.n_segments, n_win))
    for k, b in spec.effects.items():
        shift += b * (agg[k] - EFFECT_REFERENCE[k])
    eta = np.log(lam_c)[:, None] + shift
    lam = np.exp(np.minimum(eta, 5.0))
    counts = np.where(rng.uniform(size=lam.shape) < spec.zero_inflation, 0, rng.poisson(lam))

    # incident rows
    origin = datetime(spec.start.year, spec.start.month, spec.start.day)
    inc = []
    s_idx, w_idx = np.nonzero(counts)
    for s, w in zip(s_idx, w_idx):
        for _ in range(counts[s, w]):
            sec = int(w) * WINDOW_HOURS * 3600 + int(rng.integers(0, WINDOW_HOURS * 3600))
            lat, lon = _point_on(rng, polys[s])
            inc.append((sec, lat, lon, int(rng.integers(0, 4))))
    n_off = int(round(spec.offroad_fraction * len(inc)))
    for _ in range(n_off):
        sec = int(rng.integers(0, n_win * WINDOW_HOURS * 3600))
        inc.append((sec, rng.uniform(lat0, lat1), rng.uniform(lon0, lon1), int(rng.integers(0, 4))))
    inc.sort(key=lambda r: (r[0], r[1], r[2]))
    stamps = pd.to_datetime(origin) + pd.to_timedelta([r[0] for r in inc], unit="s")
    incidents = pd.DataFrame({
        "id": [f"INC{i + 1:06d}" for i in range(len(inc))],
        "lat": [round(r[1], 6) for r in inc],
        "lon": [round(r[2], 6) for r in inc],
        "timestamp": stamps.strftime("%Y-%m-%dT%H:%M:%S"),
        "severity": [r[3] for r in inc],
    })

    # writers
    fmt = dict(index=False, lineterminator="\n")
    pd.DataFrame(seg_rows).to_csv(out / "segments.csv", **fmt)
    incidents.to_csv(out / "incidents.csv", **fmt)
    hour_stamps = (pd.to_datetime(origin) + pd.to_timedelta(hours, unit="h")).strftime("%Y-%m-%dT%H:%M:%S")
    weather = pd.DataFrame({
        "station_id": np.repeat([s[0] for s in stations], n_hours),
        "lat": np.repeat(_fixed(st_lat, 5), n_hours),
        "lon": np.repeat(_fixed(st_lon, 5), n_hours),
        "timestamp": np.tile(hour_stamps, spec.n_stations),
        "temperature": _fixed(temp.ravel(), 1),
        "precipitation": _fixed(precip.ravel(), 2),
        "visibility": _fixed(vis.ravel(), 1),
        "wind_speed": _fixed(wind.ravel(), 1),
    })
    weather.to_csv(out / "weather.csv", **fmt)
    read_stamps = (pd.to_datetime(origin) + pd.to_timedelta(minute, unit="m")).strftime("%Y-%m-%dT%H:%M:%S")
    sel = keep_reading.ravel()
    traffic = pd.DataFrame({
        "segment_id": np.repeat(seg_ids, n_read)[sel],
        "timestamp": np.tile(np.asarray(read_stamps), spec.n_segments)[sel],
        "current_speed": _fixed(current.ravel()[sel], 1),
        "free_flow_speed": _fixed(np.repeat(ff, n_read)[sel], 1),
        "confidence": confidence.ravel()[sel],
    })
    traffic.to_csv(out / "traffic.csv", **fmt)

    spec_dict = asdict(spec)
    spec_dict["start"] = spec.start.isoformat()
    spec_dict["end"] = spec.end.isoformat()
    truth = {
        "spec": spec_dict,
        "zero_inflation": spec.zero_inflation,
        "effects": dict(spec.effects),
        "effect_reference": {k: EFFECT_REFERENCE[k] for k in spec.effects},
        "hotspots": [list(h) for h in hotspots],
        "stations": [list(s) for s in stations],
        "segments": {
            seg_ids[i]: {"cluster": "high" if is_high[i] else "low", "base_rate": float(rates[i]),
                         "base_lambda": float(lam_c[i]), "station": stations[seg_station[i]][0]}
            for i in range(spec.n_segments)
        },
        "n_incidents": len(incidents),
        "n_offroad": n_off,
        "n_missing_cells": int(missing.sum()),
        "incidents_in_missing_cells": int(counts[missing].sum()),
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return truth
