"""Greedy nearest-available dispatch replay over 4-hour windows."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable, Hashable, Mapping, Optional, Sequence

import numpy as np

from .allocation import AllocationInstance, greedy_add
from .domain import LatLon, haversine_km


@dataclass(frozen=True)
class DispatchIncident:
    id: str
    time: datetime
    location: LatLon


@dataclass
class ResponderState:
    base: LatLon
    busy_until: Optional[datetime] = None

    def available(self, t: datetime) -> bool:
        return self.busy_until is None or self.busy_until <= t


@dataclass(frozen=True)
class TraceEntry:
    incident_id: str
    responder: Optional[int]  # None when unattended
    distance_km: float        # base-to-scene distance; 0 when unattended

    @property
    def unattended(self) -> bool:
        return self.responder is None


@dataclass
class DispatchTrace:
    entries: list = field(default_factory=list)
    penalty_km: float = 0.0

    @property
    def n_incidents(self) -> int:
        return len(self.entries)

    @property
    def unattended(self) -> int:
        return sum(e.unattended for e in self.entries)

    @property
    def dispatched(self) -> int:
        return self.n_incidents - self.unattended

    @property
    def total_distance(self) -> float:
        return math.fsum(e.distance_km for e in self.entries if not e.unattended)

    @property
    def total_with_penalty(self) -> float:
        return self.total_distance + self.penalty_km * self.unattended

    def mean_distance(self) -> float:
        """Mean over dispatched incidents (NaN when none were dispatched)."""
        return self.total_distance / self.dispatched if self.dispatched else float("nan")

    def mean_with_penalty(self) -> float:
        return self.total_with_penalty / self.n_incidents if self.n_incidents else float("nan")


def simulate_window(bases: Sequence[LatLon], incidents: Sequence[DispatchIncident], busy_minutes: float = 60.0,
                    penalty_km: float = 0.0, distance: Callable = haversine_km) -> DispatchTrace:
    """Replay one window: each incident gets the nearest free responder.

    Responders start the window free at their bases, serve from the base and
    are blocked for ``busy_minutes`` from the incident time. With nobody free
    the incident is unattended and ``penalty_km`` enters the with-penalty total.
    """
    if not bases:
        raise ValueError("allocation has no responders")
    if busy_minutes < 0:
        raise ValueError("busy_minutes must be non-negative")
    if any(incidents[i].time > incidents[i + 1].time for i in range(len(incidents) - 1)):
        raise ValueError("incidents must be sorted by time")
    responders = [ResponderState(b) for b in bases]
    busy = timedelta(minutes=busy_minutes)
    trace = DispatchTrace(penalty_km=penalty_km)
    for inc in incidents:
        best, best_d = None, math.inf
        for r, state in enumerate(responders):
            if not state.available(inc.time):
                continue
            d = distance(state.base, inc.location)
            if d < best_d:
                best, best_d = r, d
        if best is None:
            trace.entries.append(TraceEntry(inc.id, None, 0.0))
            continue
        responders[best].busy_until = inc.time + busy
        trace.entries.append(TraceEntry(inc.id, best, best_d))
    return trace


@dataclass
class WindowOutcome:
    window: Hashable
    chosen: list
    shares: dict
    trace: DispatchTrace


@dataclass
class PolicyResult:
    windows: list = field(default_factory=list)

    def per_window_mean_distance(self, with_penalty: bool = False) -> list[float]:
        out = []
        for w in self.windows:
            v = w.trace.mean_with_penalty() if with_penalty else w.trace.mean_distance()
            if not math.isnan(v):
                out.append(v)
        return out

    def summary(self) -> dict:
        dist = self.per_window_mean_distance()
        dist_pen = self.per_window_mean_distance(with_penalty=True)
        unatt = [w.trace.unattended for w in self.windows]
        stats = {
            "n_windows": len(self.windows),
            "n_incidents": sum(w.trace.n_incidents for w in self.windows),
            "dispatched": sum(w.trace.dispatched for w in self.windows),
            "unattended_total": sum(unatt),
            "unattended_mean": statistics.fmean(unatt) if unatt else 0.0,
            "unattended_max": max(unatt) if unatt else 0,
        }
        for tag, vals in (("dist", dist), ("dist_pen", dist_pen)):
            stats[f"{tag}_min"] = min(vals) if vals else float("nan")
            stats[f"{tag}_median"] = statistics.median(vals) if vals else float("nan")
            stats[f"{tag}_mean"] = statistics.fmean(vals) if vals else float("nan")
            stats[f"{tag}_max"] = max(vals) if vals else float("nan")
        return stats


def evaluate_policy(demand_by_window: Mapping[Hashable, np.ndarray], distance: np.ndarray,
                    location_centers: Sequence[LatLon], incidents_by_window: Mapping[Hashable, Sequence[DispatchIncident]],
                    p: int, alpha: float, busy_minutes: float = 60.0, penalty_km: float = 0.0,
                    cache: Optional[dict] = None) -> PolicyResult:
    """Allocate with Greedy-Add and replay dispatch in every window.

    ``demand_by_window`` maps a window key to predicted likelihoods per edge
    (rows of ``distance``). Windows whose demand sums to 0 fall back to
    uniform demand. Identical demand vectors share one allocation via ``cache``.
    """
    cache = {} if cache is None else cache
    result = PolicyResult()
    for key in sorted(demand_by_window):
        a = np.asarray(demand_by_window[key], dtype=float)
        if not a.sum() > 0:
            a = np.ones_like(a)
        ck = (a.tobytes(), p, float(alpha))
        if ck not in cache:
            alloc = greedy_add(AllocationInstance(a, distance, p, alpha))
            cache[ck] = (list(alloc.chosen), dict(alloc.shares))
        chosen, shares = cache[ck]
        bases = [location_centers[j] for j in chosen]
        incs = sorted(incidents_by_window.get(key, ()), key=lambda i: (i.time, i.id))
        trace = simulate_window(bases, incs, busy_minutes, penalty_km)
        result.windows.append(WindowOutcome(key, chosen, shares, trace))
    return result
