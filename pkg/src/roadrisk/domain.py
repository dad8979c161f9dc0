"""Core records shared across the pipeline: segments, incidents, windows, cells, grid locations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Optional, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0
WINDOWS_PER_DAY = 6
WINDOW_HOURS = 4

LatLon = tuple[float, float]


def haversine_km(a: LatLon, b: LatLon) -> float:
    """Great-circle distance in km between two (lat, lon) degree pairs."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def haversine_km_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Broadcasting haversine over numpy arrays of degrees."""
    lat1 = np.radians(lat1)
    lat2 = np.radians(lat2)
    dlat = lat2 - lat1
    dlon = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


@dataclass(frozen=True)
class TimeWindow:
    date: date
    window_index: int

    def __post_init__(self):
        if not 0 <= self.window_index < WINDOWS_PER_DAY:
            raise ValueError(f"window_index must be in [0, 5], got {self.window_index}")

    @property
    def start(self) -> datetime:
        return datetime(self.date.year, self.date.month, self.date.day) + timedelta(hours=WINDOW_HOURS * self.window_index)

    @property
    def end(self) -> datetime:
        return self.start + timedelta(hours=WINDOW_HOURS)


def window_of(timestamp: datetime) -> TimeWindow:
    """Map a local timestamp to its 4-hour window of the day."""
    return TimeWindow(timestamp.date(), timestamp.hour // WINDOW_HOURS)


def window_number(ts: datetime, origin: date) -> int:
    """Global window counter since midnight of ``origin`` (may be negative)."""
    days = (ts.date() - origin).days
    return days * WINDOWS_PER_DAY + ts.hour // WINDOW_HOURS


@dataclass(frozen=True)
class RoadSegment:
    id: str
    road_name: str
    polyline: tuple[LatLon, ...]
    lanes: int
    miles: float
    isf: float
    free_flow_speed: float = 0.0

    def __post_init__(self):
        if len(self.polyline) < 2:
            raise ValueError(f"segment {self.id}: polyline needs at least 2 points")
        if not 0.0 < self.isf <= 1.0:
            raise ValueError(f"segment {self.id}: isf {self.isf} outside (0, 1]")
        if self.miles <= 0:
            raise ValueError(f"segment {self.id}: miles must be positive")
        if self.lanes < 1:
            raise ValueError(f"segment {self.id}: lanes must be positive")
        if self.free_flow_speed < 0:
            raise ValueError(f"segment {self.id}: negative free-flow speed")

    @property
    def centroid(self) -> LatLon:
        # representative point: plain vertex mean
        lats, lons = zip(*self.polyline)
        return (sum(lats) / len(lats), sum(lons) / len(lons))


@dataclass(frozen=True)
class Incident:
    id: str
    lat: float
    lon: float
    timestamp: datetime
    severity: int = 0
    segment_id: Optional[str] = None

    def __post_init__(self):
        if self.severity < 0:
            raise ValueError(f"incident {self.id}: negative severity")


@dataclass(frozen=True)
class CellRecord:
    segment_id: str
    window: TimeWindow
    features: tuple[tuple[str, float], ...]
    incident_count: int
    cluster_id: Optional[int] = None

    def __post_init__(self):
        if self.incident_count < 0:
            raise ValueError("incident_count must be non-negative")
        if any(v is None or (isinstance(v, float) and math.isnan(v)) for _, v in self.features):
            raise ValueError(f"cell {self.segment_id}/{self.window}: missing feature value")

    @property
    def label(self) -> int:
        return min(self.incident_count, 1)

    def feature(self, name: str) -> float:
        for k, v in self.features:
            if k == name:
                return v
        raise KeyError(name)


@dataclass(frozen=True)
class GridLocation:
    cell_row: int
    cell_col: int
    center: LatLon


@dataclass
class ModelParams:
    """Fitted parameters of one forecaster.

    ``coef`` holds the intercept first, then one weight per standardized
    feature. Naive models carry a bucket table instead and leave ``coef`` empty.
    """

    kind: str
    feature_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    coef: np.ndarray
    threshold: float = 0.5
    l2: float = 0.0
    pi: Optional[float] = None
    buckets: dict = field(default_factory=dict)
    fallback: Optional[float] = None
    loss_trace: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold {self.threshold} must lie strictly inside (0, 1)")
        if self.kind in ("LR", "ZIP") and len(self.coef) != len(self.feature_names) + 1:
            raise ValueError("coefficient vector must have one entry per feature plus intercept")


def records_to_frame(records: Sequence[CellRecord]):
    """Flatten CellRecords into the column layout used by the dataset frame."""
    import pandas as pd

    rows = []
    for r in records:
        row = {"segment_id": r.segment_id, "date": r.window.date, "window_index": r.window.window_index}
        row.update(dict(r.features))
        row["incident_count"] = r.incident_count
        row["label"] = r.label
        if r.cluster_id is not None:
            row["cluster_id"] = r.cluster_id
        rows.append(row)
    return pd.DataFrame(rows)


def frame_to_records(frame, feature_names: Sequence[str]) -> list[CellRecord]:
    out = []
    for row in frame.itertuples(index=False):
        d = row._asdict()
        dt = d["date"]
        if isinstance(dt, str):
            dt = date.fromisoformat(dt)
        elif isinstance(dt, datetime):
            dt = dt.date()
        elif hasattr(dt, "date"):
            dt = dt.date()
        feats = tuple((f, float(d[f])) for f in feature_names)
        cluster = d.get("cluster_id")
        out.append(CellRecord(str(d["segment_id"]), TimeWindow(dt, int(d["window_index"])), feats,
                              int(d["incident_count"]), None if cluster is None else int(cluster)))
    return out
