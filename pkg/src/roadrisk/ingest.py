"""Source-table parsing, spatial joins and cell-level feature construction.

The bulk path (:func:`build_dataset`) is vectorized with numpy/pandas; the
small per-item functions (:func:`map_incident_to_segment`, :func:`lag_features`,
:func:`aggregate_window`, ...) state the same rules one cell at a time and are
what the tests compare the bulk path against.
"""

from __future__ import annotations

import bisect
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .domain import (
    EARTH_RADIUS_KM,
    WINDOW_HOURS,
    WINDOWS_PER_DAY,
    Incident,
    LatLon,
    RoadSegment,
    haversine_km,
    haversine_km_array,
)
from .errors import ConfigError, DataError, InvalidGeometryError

log = logging.getLogger(__name__)

MAX_SNAP_KM = 0.025
KM_PER_MILE = 1.609344

# lag horizons in 4-hour windows: last window, day, week, 30 days
LAG_HORIZONS = {"lag_window": 1, "lag_day": 6, "lag_week": 42, "lag_month": 180}
HISTORY_WINDOWS = max(LAG_HORIZONS.values())

WEATHER_COLUMNS = ("temperature", "precipitation", "visibility", "wind_speed")
TRAFFIC_COLUMNS = ("congestion", "free_flow_speed", "confidence")

# per-variable 4-hour aggregation
AGGREGATION = {
    "temperature": "mean",
    "precipitation": "sum",
    "visibility": "mean",
    "wind_speed": "mean",
    "congestion": "mean",
    "free_flow_speed": "mean",
    "confidence": "mean",
}

FEATURES = (
    "window_index",
    "weekend",
    "lag_window",
    "lag_day",
    "lag_week",
    "lag_month",
    "visibility",
    "wind_speed",
    "precipitation",
    "temperature",
    "congestion",
    "free_flow_speed",
    "confidence",
    "lanes",
    "miles",
    "isf",
)


@dataclass(frozen=True)
class WeatherObservation:
    station_id: str
    lat: float
    lon: float
    timestamp: datetime
    temperature: float
    precipitation: float
    visibility: float
    wind_speed: float

    def __post_init__(self):
        if self.visibility < 0 or self.precipitation < 0:
            raise ValueError(f"station {self.station_id}: negative visibility/precipitation")


@dataclass(frozen=True)
class TrafficObservation:
    segment_id: str
    timestamp: datetime
    current_speed: float
    free_flow_speed: float
    confidence: float = 0.0

    def __post_init__(self):
        if self.current_speed < 0 or self.free_flow_speed < 0:
            raise ValueError(f"segment {self.segment_id}: negative speed")


# --------------------------------------------------------------------------- geometry


def polyline_length(polyline: Sequence[LatLon], distance: Callable = haversine_km) -> float:
    return sum(distance(polyline[i], polyline[i + 1]) for i in range(len(polyline) - 1))


def compute_isf(polyline: Sequence[LatLon], distance: Callable = haversine_km) -> float:
    """Inverse stretch factor: end-to-end chord over path length.

    1.0 for a straight segment, approaching 0 as the path closes on itself.
    """
    if len(polyline) < 2:
        raise InvalidGeometryError("polyline needs at least 2 points")
    total = polyline_length(polyline, distance)
    if total <= 0:
        raise InvalidGeometryError("polyline has zero length")
    ratio = distance(polyline[0], polyline[-1]) / total
    return min(1.0, max(ratio, 1e-9))


def _local_xy(lat0: float, lat, lon, lon0: float):
    """Equirectangular projection (km) around (lat0, lon0)."""
    k = math.radians(1.0) * EARTH_RADIUS_KM
    return (np.asarray(lon) - lon0) * k * np.cos(np.radians(lat0)), (np.asarray(lat) - lat0) * k


def point_polyline_distance_km(point: LatLon, polyline: Sequence[LatLon]) -> float:
    """Distance from a point to the nearest piece of a polyline, km."""
    lat0, lon0 = point
    pts = np.asarray(polyline, dtype=float)
    x, y = _local_xy(lat0, pts[:, 0], pts[:, 1], lon0)
    return float(_origin_to_pieces(x[:-1], y[:-1], x[1:], y[1:]).min())


def _origin_to_pieces(ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    den = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(den > 0, -(ax * dx + ay * dy) / np.where(den > 0, den, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    cx = ax + t * dx
    cy = ay + t * dy
    return np.hypot(cx, cy)


def map_incident_to_segment(incident: Incident | LatLon, segments: Sequence[RoadSegment],
                            max_km: float = MAX_SNAP_KM) -> Optional[str]:
    """Id of the nearest segment, or None when it lies farther than 25 m."""
    if not segments:
        raise ValueError("no segments to map onto")
    point = (incident.lat, incident.lon) if isinstance(incident, Incident) else incident
    best_id, best_d = None, math.inf
    for seg in sorted(segments, key=lambda s: s.id):
        d = point_polyline_distance_km(point, seg.polyline)
        if d < best_d:
            best_id, best_d = seg.id, d
    return best_id if best_d <= max_km else None


class SegmentIndex:
    """Flattened polyline pieces for vectorized nearest-segment lookup."""

    def __init__(self, segments: Sequence[RoadSegment]):
        segs = sorted(segments, key=lambda s: s.id)
        self.ids = [s.id for s in segs]
        alat, alon, blat, blon, starts = [], [], [], [], []
        for s in segs:
            starts.append(len(alat))
            for p, q in zip(s.polyline[:-1], s.polyline[1:]):
                alat.append(p[0]); alon.append(p[1]); blat.append(q[0]); blon.append(q[1])
        self.alat, self.alon = np.array(alat), np.array(alon)
        self.blat, self.blon = np.array(blat), np.array(blon)
        self.starts = np.array(starts)

    def nearest(self, lat: np.ndarray, lon: np.ndarray, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
        """Return (segment position, distance km) per point; ties go to the smaller id."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        pos = np.empty(len(lat), dtype=int)
        dist = np.empty(len(lat))
        k = math.radians(1.0) * EARTH_RADIUS_KM
        for s in range(0, len(lat), chunk):
            la = lat[s:s + chunk, None]
            lo = lon[s:s + chunk, None]
            c = np.cos(np.radians(la)) * k
            d = _origin_to_pieces((self.alon - lo) * c, (self.alat - la) * k,
                                  (self.blon - lo) * c, (self.blat - la) * k)
            per_seg = np.minimum.reduceat(d, self.starts, axis=1)
            pos[s:s + chunk] = per_seg.argmin(axis=1)
            dist[s:s + chunk] = per_seg.min(axis=1)
        return pos, dist


def nearest_station(segment: RoadSegment | LatLon, stations: Sequence[tuple[str, float, float]]) -> str:
    """Closest weather station to the segment's representative point (ties: smallest id)."""
    if not stations:
        raise ValueError("no stations")
    point = segment.centroid if isinstance(segment, RoadSegment) else segment
    best = min(stations, key=lambda s: (haversine_km(point, (s[1], s[2])), s[0]))
    return best[0]


# --------------------------------------------------------------------------- per-cell rules


def congestion(free_flow: float, current: float) -> float:
    """Relative speed loss, clipped at zero; 0 when free-flow speed is 0."""
    if free_flow <= 0:
        return 0.0
    return max(0.0, (free_flow - current) / free_flow)


def congestion_array(free_flow: np.ndarray, current: np.ndarray) -> np.ndarray:
    free_flow = np.asarray(free_flow, dtype=float)
    current = np.asarray(current, dtype=float)
    with np.errstate(all="ignore"):
        c = (free_flow - current) / free_flow
    c = np.where(free_flow > 0, c, 0.0)
    return np.maximum(c, 0.0)


def aggregate_window(observations: Iterable[Mapping[str, float]]) -> Optional[dict]:
    """Aggregate the readings of one segment-window; None flags a missing window."""
    obs = list(observations)
    if not obs:
        return None
    out = {}
    for name, how in AGGREGATION.items():
        vals = [o[name] for o in obs if name in o and o[name] is not None and not math.isnan(o[name])]
        if not vals:
            continue
        out[name] = float(sum(vals)) if how == "sum" else float(sum(vals) / len(vals))
    return out


def lag_features(history: Sequence[datetime], window_start: datetime) -> tuple[int, int, int, int]:
    """Incident counts in the 4 h, 24 h, 7 d and 30 d preceding ``window_start``.

    ``history`` holds the incident times of one segment, sorted ascending.
    Intervals are half-open, [start - horizon, start).
    """
    end = bisect.bisect_left(history, window_start)
    out = []
    for n_windows in LAG_HORIZONS.values():
        lo = bisect.bisect_left(history, window_start - timedelta(hours=WINDOW_HOURS * n_windows))
        out.append(end - lo)
    return tuple(out)


# --------------------------------------------------------------------------- filtering


@dataclass
class FilterReport:
    n_segments_before: int
    n_segments_kept: int
    retained_incident_fraction: float
    sparsity: float
    kept_ids: list = field(default_factory=list, repr=False)


def filter_segments(frame: pd.DataFrame, keep_fraction: float, train_windows: Optional[tuple[int, int]] = None):
    """Keep the ceil(q*n) segments with the most positive cells in the training range.

    ``train_windows`` is a half-open (start, end) range over the ``window``
    column; when omitted the whole frame counts as training.
    """
    if not 0 < keep_fraction <= 1:
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    seg_ids = np.sort(frame["segment_id"].unique())
    n = len(seg_ids)
    train = frame
    if train_windows is not None:
        train = frame[(frame["window"] >= train_windows[0]) & (frame["window"] < train_windows[1])]
    positives = train.groupby("segment_id")["label"].sum().reindex(seg_ids, fill_value=0)
    n_keep = min(n, math.ceil(keep_fraction * n - 1e-9))
    order = sorted(seg_ids, key=lambda s: (-int(positives[s]), s))
    keep = sorted(order[:n_keep])
    out = frame[frame["segment_id"].isin(keep)]
    total = frame["incident_count"].sum()
    kept_total = out["incident_count"].sum()
    report = FilterReport(
        n_segments_before=n,
        n_segments_kept=len(keep),
        retained_incident_fraction=float(kept_total / total) if total else 1.0,
        sparsity=float(1.0 - out["label"].mean()) if len(out) else 1.0,
        kept_ids=list(keep),
    )
    return out.reset_index(drop=True), report


# --------------------------------------------------------------------------- parsing

_WKT_RE = re.compile(r"^\s*LINESTRING\s*\((.*)\)\s*$", re.IGNORECASE)


def parse_polyline(text: str) -> tuple[LatLon, ...]:
    """Parse ``LINESTRING (lon lat, ...)`` or ``lat lon; lat lon; ...``."""
    m = _WKT_RE.match(text)
    pts = []
    if m:
        for pair in m.group(1).split(","):
            lon, lat = pair.split()
            pts.append((float(lat), float(lon)))
    else:
        for pair in text.split(";"):
            lat, lon = pair.replace(",", " ").split()
            pts.append((float(lat), float(lon)))
    return tuple(pts)


_TEXT_COLUMNS = {"id": str, "segment_id": str, "station_id": str, "timestamp": str, "road_name": str,
                 "wkt_polyline": str, "polyline": str}


def _require(df: pd.DataFrame, cols: Sequence[str], name: str):
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise DataError(f"{name}: missing columns {missing}")


def _numeric(df: pd.DataFrame, col: str, name: str, required: bool, bad: list):
    raw = df[col]
    if pd.api.types.is_numeric_dtype(raw):
        val = raw.astype(float)
        if required:
            for i in np.flatnonzero(val.isna().to_numpy())[:20]:
                bad.append(f"{name} row {i + 2}: missing {col!r} value")
        return val
    val = pd.to_numeric(raw, errors="coerce")
    blank = raw.isna() | (raw.astype(str).str.strip() == "")
    broken = val.isna() & ~blank
    if required:
        broken = broken | blank
    for i in np.flatnonzero(broken.to_numpy())[:20]:
        bad.append(f"{name} row {i + 2}: bad {col!r} value {raw.iloc[i]!r}")
    return val.astype(float)


def _timestamps(raw: pd.Series, name: str, utc_offset_hours: float, bad: list) -> pd.Series:
    """Parse ISO-8601 strings into naive local times at a fixed UTC offset."""
    fast = pd.to_datetime(raw, errors="coerce", format="%Y-%m-%dT%H:%M:%S")
    if not fast.isna().any():
        return fast
    s = raw.astype(str).str.strip()
    has_tz = s.str.contains(r"(?:Z|[+-]\d\d:?\d\d)$", regex=True)
    out = pd.Series(pd.NaT, index=raw.index, dtype="datetime64[ns]")
    if (~has_tz).any():
        out[~has_tz] = pd.to_datetime(s[~has_tz], errors="coerce", format="ISO8601")
    if has_tz.any():
        aware = pd.to_datetime(s[has_tz], errors="coerce", utc=True, format="ISO8601")
        out[has_tz] = (aware + pd.Timedelta(hours=utc_offset_hours)).dt.tz_localize(None)
    for i in np.flatnonzero(out.isna().to_numpy())[:20]:
        bad.append(f"{name} row {i + 2}: bad timestamp {raw.iloc[i]!r}")
    return out


def _read_table(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    try:
        return pd.read_csv(path, dtype=_TEXT_COLUMNS, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse CSV ({exc})") from None


def read_segments(path) -> list[RoadSegment]:
    df = _read_table(path)
    _require(df, ["id", "lanes"], "segments.csv")
    geom_col = "wkt_polyline" if "wkt_polyline" in df.columns else "polyline"
    if geom_col not in df.columns:
        raise DataError("segments.csv: need a 'wkt_polyline' or 'polyline' column")
    bad: list[str] = []
    lanes = _numeric(df, "lanes", "segments.csv", True, bad)
    miles = _numeric(df, "miles", "segments.csv", False, bad) if "miles" in df.columns else None
    ffs = _numeric(df, "free_flow_speed", "segments.csv", False, bad) if "free_flow_speed" in df.columns else None
    out = []
    for i, row in enumerate(df.itertuples(index=False)):
        try:
            poly = parse_polyline(getattr(row, geom_col))
            isf = compute_isf(poly)
        except (ValueError, InvalidGeometryError) as exc:
            bad.append(f"segments.csv row {i + 2}: bad geometry ({exc})")
            continue
        m = miles.iloc[i] if miles is not None else float("nan")
        if not m > 0:
            m = polyline_length(poly) / KM_PER_MILE
        f = ffs.iloc[i] if ffs is not None else 0.0
        if lanes.iloc[i] != lanes.iloc[i]:
            continue  # already reported by _numeric
        if lanes.iloc[i] < 1:
            bad.append(f"segments.csv row {i + 2}: lanes must be positive")
            continue
        try:
            out.append(RoadSegment(str(row.id), str(getattr(row, "road_name", "")), poly, int(lanes.iloc[i]),
                                   float(m), isf, float(f) if f == f else 0.0))
        except ValueError as exc:
            bad.append(f"segments.csv row {i + 2}: {exc}")
    if bad:
        raise DataError("unparseable rows:\n" + "\n".join(bad))
    if len({s.id for s in out}) != len(out):
        raise DataError("segments.csv: duplicate segment ids")
    return out


def read_incidents(path, utc_offset_hours: float = 0.0) -> pd.DataFrame:
    df = _read_table(path)
    _require(df, ["id", "lat", "lon", "timestamp"], "incidents.csv")
    bad: list[str] = []
    out = pd.DataFrame({
        "id": df["id"].astype(str),
        "lat": _numeric(df, "lat", "incidents.csv", True, bad),
        "lon": _numeric(df, "lon", "incidents.csv", True, bad),
        "timestamp": _timestamps(df["timestamp"], "incidents.csv", utc_offset_hours, bad),
    })
    if "severity" in df.columns:
        sev = _numeric(df, "severity", "incidents.csv", False, bad).fillna(0)
        if (sev < 0).any():
            bad.append("incidents.csv: negative severity")
        out["severity"] = sev.astype(int)
    else:
        out["severity"] = 0
    if bad:
        raise DataError("unparseable rows:\n" + "\n".join(bad))
    return out


def read_weather(path, utc_offset_hours: float = 0.0) -> pd.DataFrame:
    df = _read_table(path)
    _require(df, ["station_id", "lat", "lon", "timestamp", *WEATHER_COLUMNS], "weather.csv")
    bad: list[str] = []
    out = pd.DataFrame({
        "station_id": df["station_id"].astype(str),
        "lat": _numeric(df, "lat", "weather.csv", True, bad),
        "lon": _numeric(df, "lon", "weather.csv", True, bad),
        "timestamp": _timestamps(df["timestamp"], "weather.csv", utc_offset_hours, bad),
    })
    for c in WEATHER_COLUMNS:
        out[c] = _numeric(df, c, "weather.csv", False, bad)
    if (out["visibility"] < 0).any() or (out["precipitation"] < 0).any():
        bad.append("weather.csv: negative visibility or precipitation")
    if bad:
        raise DataError("unparseable rows:\n" + "\n".join(bad))
    return out


def read_traffic(path, utc_offset_hours: float = 0.0) -> pd.DataFrame:
    df = _read_table(path)
    _require(df, ["segment_id", "timestamp", "current_speed", "free_flow_speed"], "traffic.csv")
    bad: list[str] = []
    out = pd.DataFrame({
        "segment_id": df["segment_id"].astype(str),
        "timestamp": _timestamps(df["timestamp"], "traffic.csv", utc_offset_hours, bad),
        "current_speed": _numeric(df, "current_speed", "traffic.csv", False, bad),
        "free_flow_speed": _numeric(df, "free_flow_speed", "traffic.csv", False, bad),
    })
    out["confidence"] = _numeric(df, "confidence", "traffic.csv", False, bad) if "confidence" in df.columns else np.nan
    if (out["current_speed"] < 0).any() or (out["free_flow_speed"] < 0).any():
        bad.append("traffic.csv: negative speed")
    if bad:
        raise DataError("unparseable rows:\n" + "\n".join(bad))
    return out


# --------------------------------------------------------------------------- dataset assembly


@dataclass
class SourcePaths:
    segments: Path
    incidents: Path
    weather: Path
    traffic: Path


@dataclass
class IngestReport:
    n_segments: int = 0
    n_incidents: int = 0
    n_unmapped: int = 0
    n_out_of_range: int = 0
    n_mapped_in_range: int = 0
    n_cells_total: int = 0
    n_cells_dropped: int = 0
    incidents_in_dropped_cells: int = 0
    n_zero_free_flow_rows: int = 0
    n_segments_kept: int = 0
    n_cells_kept: int = 0
    retained_incident_fraction: float = 1.0
    sparsity: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def window_ids(ts: pd.Series, origin: date) -> np.ndarray:
    """Global 4-hour window number relative to midnight of ``origin``."""
    delta = ts.to_numpy(dtype="datetime64[ns]") - np.datetime64(origin, "ns")
    return (delta // np.timedelta64(WINDOW_HOURS, "h")).astype(np.int64)


def window_start(origin: date, window: int) -> datetime:
    return datetime(origin.year, origin.month, origin.day) + timedelta(hours=WINDOW_HOURS * int(window))


def map_incidents(incidents: pd.DataFrame, segments: Sequence[RoadSegment]) -> pd.DataFrame:
    """Attach ``segment_id`` (None when beyond 25 m) and ``snap_km`` columns."""
    index = SegmentIndex(segments)
    out = incidents.copy()
    if len(out) == 0:
        out["segment_id"] = pd.Series(dtype=object)
        out["snap_km"] = pd.Series(dtype=float)
        return out
    pos, dist = index.nearest(out["lat"].to_numpy(), out["lon"].to_numpy())
    ids = np.array(index.ids, dtype=object)[pos]
    ids[dist > MAX_SNAP_KM] = None
    out["segment_id"] = ids
    out["snap_km"] = dist
    return out


def incident_count_matrix(mapped: pd.DataFrame, seg_ids: Sequence[str], origin: date, n_windows: int,
                          history: int = HISTORY_WINDOWS) -> np.ndarray:
    """Counts per (segment, window), with ``history`` extra windows before the origin."""
    counts = np.zeros((len(seg_ids), n_windows + history), dtype=np.int64)
    m = mapped[mapped["segment_id"].notna()]
    if len(m) == 0:
        return counts
    pos = {s: i for i, s in enumerate(seg_ids)}
    rows = m["segment_id"].map(pos)
    ok = rows.notna().to_numpy()
    w = window_ids(m["timestamp"], origin) + history
    ok &= (w >= 0) & (w < n_windows + history)
    np.add.at(counts, (rows.to_numpy()[ok].astype(int), w[ok]), 1)
    return counts


def lag_matrix(counts: np.ndarray, history: int = HISTORY_WINDOWS) -> dict[str, np.ndarray]:
    """Per-horizon lag counts for every cell; columns align with windows 0..n-1."""
    cs = np.concatenate([np.zeros((counts.shape[0], 1), dtype=np.int64), np.cumsum(counts, axis=1)], axis=1)
    n = counts.shape[1] - history
    e = np.arange(n) + history  # index of each cell's own window in the extended axis
    return {name: cs[:, e] - cs[:, e - h] for name, h in LAG_HORIZONS.items()}


def build_dataset(sources: SourcePaths, start: date, end: date, utc_offset_hours: float = 0.0,
                  keep_fraction: float = 1.0, train_windows: Optional[tuple[int, int]] = None):
    """Assemble the master cell table for windows in [start, end).

    Returns ``(frame, report, segments)``. The frame is sorted by segment id,
    then window, and carries a ``window`` column (global window number from
    ``start``) next to the exported columns.
    """
    if end <= start:
        raise ConfigError("study end must come after start")
    segments = read_segments(sources.segments)
    if not segments:
        raise DataError("segments.csv has no rows")
    incidents = read_incidents(sources.incidents, utc_offset_hours)
    weather = read_weather(sources.weather, utc_offset_hours)
    traffic = read_traffic(sources.traffic, utc_offset_hours)
    return assemble(segments, incidents, weather, traffic, start, end, keep_fraction, train_windows)


def assemble(segments, incidents, weather, traffic, start: date, end: date,
             keep_fraction: float = 1.0, train_windows: Optional[tuple[int, int]] = None):
    report = IngestReport(n_segments=len(segments), n_incidents=len(incidents))
    segments = sorted(segments, key=lambda s: s.id)
    seg_ids = [s.id for s in segments]
    n_seg = len(segments)
    n_win = (end - start).days * WINDOWS_PER_DAY

    mapped = map_incidents(incidents, segments)
    report.n_unmapped = int(mapped["segment_id"].isna().sum())
    w_inc = window_ids(mapped["timestamp"], start) if len(mapped) else np.zeros(0, dtype=np.int64)
    in_range = (w_inc >= 0) & (w_inc < n_win)
    report.n_out_of_range = int((~in_range).sum())
    report.n_mapped_in_range = int((in_range & mapped["segment_id"].notna().to_numpy()).sum())

    counts = incident_count_matrix(mapped, seg_ids, start, n_win)
    lags = lag_matrix(counts)
    own = counts[:, HISTORY_WINDOWS:]

    # weather: nearest station per segment, 4-hour aggregates per station
    stations = (weather[["station_id", "lat", "lon"]].drop_duplicates("station_id")
                .sort_values("station_id").itertuples(index=False, name=None))
    stations = list(stations)
    if not stations:
        raise DataError("weather.csv has no stations")
    st_pos = {s[0]: i for i, s in enumerate(stations)}
    seg_station = np.array([st_pos[nearest_station(s, stations)] for s in segments])
    wx = {c: np.full((len(stations), n_win), np.nan) for c in WEATHER_COLUMNS}
    ww = window_ids(weather["timestamp"], start)
    wsel = (ww >= 0) & (ww < n_win)
    if wsel.any():
        g = weather.loc[wsel, list(WEATHER_COLUMNS)].assign(
            st=weather.loc[wsel, "station_id"].map(st_pos).to_numpy(), w=ww[wsel]
        ).groupby(["st", "w"])
        agg = g.agg({c: AGGREGATION[c] for c in WEATHER_COLUMNS})
        # a sum over all-missing readings must stay missing, not 0
        counts_nonnull = g["precipitation"].count()
        agg.loc[counts_nonnull == 0, "precipitation"] = np.nan
        st_idx = agg.index.get_level_values(0).to_numpy()
        w_idx = agg.index.get_level_values(1).to_numpy()
        for c in WEATHER_COLUMNS:
            wx[c][st_idx, w_idx] = agg[c].to_numpy()

    # traffic: per-reading congestion, 4-hour means per segment
    tf = {c: np.full((n_seg, n_win), np.nan) for c in TRAFFIC_COLUMNS}
    tw = window_ids(traffic["timestamp"], start)
    seg_pos = {s: i for i, s in enumerate(seg_ids)}
    tsel = (tw >= 0) & (tw < n_win) & traffic["segment_id"].isin(seg_pos).to_numpy()
    if tsel.any():
        t = traffic.loc[tsel]
        report.n_zero_free_flow_rows = int((t["free_flow_speed"] == 0).sum())
        cong = congestion_array(t["free_flow_speed"].to_numpy(), t["current_speed"].to_numpy())
        cong[np.isnan(t["current_speed"].to_numpy()) | np.isnan(t["free_flow_speed"].to_numpy())] = np.nan
        frame = pd.DataFrame({
            "s": t["segment_id"].map(seg_pos).to_numpy(),
            "w": tw[tsel],
            "congestion": cong,
            "free_flow_speed": t["free_flow_speed"].to_numpy(),
            "confidence": t["confidence"].to_numpy(),
        })
        agg = frame.groupby(["s", "w"]).agg({c: AGGREGATION[c] for c in TRAFFIC_COLUMNS})
        s_idx = agg.index.get_level_values(0).to_numpy()
        w_idx = agg.index.get_level_values(1).to_numpy()
        for c in TRAFFIC_COLUMNS:
            tf[c][s_idx, w_idx] = agg[c].to_numpy()

    windows = np.arange(n_win)
    days = windows // WINDOWS_PER_DAY
    dates = np.datetime64(start, "D") + days.astype("timedelta64[D]")
    weekday = (days + start.weekday()) % 7
    cols = {
        "segment_id": np.repeat(np.array(seg_ids, dtype=object), n_win),
        "date": np.tile(dates, n_seg),
        "window_index": np.tile(windows % WINDOWS_PER_DAY, n_seg),
        "window": np.tile(windows, n_seg),
        "weekend": np.tile((weekday >= 5).astype(np.int64), n_seg),
    }
    for name in LAG_HORIZONS:
        cols[name] = lags[name].ravel()
    for c in ("visibility", "wind_speed", "precipitation", "temperature"):
        cols[c] = wx[c][seg_station].ravel()
    for c in TRAFFIC_COLUMNS:
        cols[c] = tf[c].ravel()
    cols["lanes"] = np.repeat([s.lanes for s in segments], n_win)
    cols["miles"] = np.repeat([s.miles for s in segments], n_win)
    cols["isf"] = np.repeat([s.isf for s in segments], n_win)
    cols["incident_count"] = own.ravel()
    frame = pd.DataFrame(cols)
    frame["label"] = np.minimum(frame["incident_count"], 1)
    report.n_cells_total = len(frame)

    missing = frame[list(FEATURES)].isna().any(axis=1)
    report.n_cells_dropped = int(missing.sum())
    report.incidents_in_dropped_cells = int(frame.loc[missing, "incident_count"].sum())
    frame = frame.loc[~missing].reset_index(drop=True)
    if report.n_cells_dropped:
        log.info("dropped %d cells with missing covariates", report.n_cells_dropped)

    frame, fr = filter_segments(frame, keep_fraction, train_windows)
    report.n_segments_kept = fr.n_segments_kept
    report.n_cells_kept = len(frame)
    report.retained_incident_fraction = fr.retained_incident_fraction
    report.sparsity = fr.sparsity
    if len(frame) == 0:
        raise DataError("no cells left after joins and filtering")
    kept = set(fr.kept_ids)
    return frame, report, [s for s in segments if s.id in kept]


EXPORT_COLUMNS = ("segment_id", "date", *FEATURES, "incident_count", "label")


def write_cells(frame: pd.DataFrame, path) -> None:
    out = frame[list(EXPORT_COLUMNS)].copy()
    out["date"] = pd.to_datetime(out["date"]).dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def read_cells(path, origin: Optional[date] = None) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"segment_id": str})
    missing = [c for c in EXPORT_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"cells file missing columns {missing}")
    frame["date"] = pd.to_datetime(frame["date"])
    first = frame["date"].min().date() if origin is None else origin
    frame["window"] = ((frame["date"] - pd.Timestamp(first)).dt.days * WINDOWS_PER_DAY
                       + frame["window_index"]).astype(np.int64)
    return frame
