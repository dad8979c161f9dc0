"""Balanced p-median allocation of responders over a lat/lon grid.

The objective is the demand-weighted distance from every edge to its nearest
open location, with each location's contribution scaled by
``share ** alpha``, where ``share`` is the fraction of total demand that
location covers. ``alpha = 0`` gives the classical p-median cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain import GridLocation, LatLon, haversine_km_array


@dataclass(frozen=True)
class AllocationInstance:
    demand: np.ndarray        # a_i per edge
    distance: np.ndarray      # d_ij, edges x locations, km
    p: int
    alpha: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.demand, dtype=float)
        d = np.asarray(self.distance, dtype=float)
        object.__setattr__(self, "demand", a)
        object.__setattr__(self, "distance", d)
        if d.ndim != 2 or d.shape[0] != a.shape[0]:
            raise ValueError("distance table must be edges x locations")
        if (a < 0).any() or not a.sum() > 0:
            raise ValueError("demand must be non-negative with a positive total")
        if (d < 0).any():
            raise ValueError("distances must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.p < 1:
            raise ValueError("p must be at least 1")
        if self.p > d.shape[1]:
            raise ValueError(f"p = {self.p} exceeds the {d.shape[1]} candidate locations")

    @property
    def n_locations(self) -> int:
        return self.distance.shape[1]


@dataclass
class Allocation:
    chosen: list                 # location indices in the order they were added
    assignment: np.ndarray       # edge -> location index
    objective: float
    shares: dict = field(default_factory=dict)   # location -> covered demand share
    trajectory: list = field(default_factory=list)  # Z after each addition


def make_grid(bbox: tuple[float, float, float, float], cell_size: float = 0.1) -> list[GridLocation]:
    """Row-major cells covering (lat_min, lat_max, lon_min, lon_max); row 0 is southernmost."""
    lat_min, lat_max, lon_min, lon_max = bbox
    if not (lat_max > lat_min and lon_max > lon_min):
        raise ValueError("degenerate bounding box")
    if cell_size <= 0:
        raise ValueError("cell size must be positive")
    n_rows = max(1, math.ceil((lat_max - lat_min) / cell_size - 1e-9))
    n_cols = max(1, math.ceil((lon_max - lon_min) / cell_size - 1e-9))
    return [GridLocation(r, c, (lat_min + (r + 0.5) * cell_size, lon_min + (c + 0.5) * cell_size))
            for r in range(n_rows) for c in range(n_cols)]


def distance_table(points: Sequence[LatLon], locations: Sequence[GridLocation]) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    centers = np.array([g.center for g in locations], dtype=float)
    return haversine_km_array(pts[:, 0:1], pts[:, 1:2], centers[None, :, 0], centers[None, :, 1])


def nearest_assignment(distance: np.ndarray, chosen: Sequence[int]) -> np.ndarray:
    """Nearest chosen location per edge; equal distances go to the smaller index."""
    cols = np.array(sorted(chosen), dtype=int)
    return cols[np.argmin(distance[:, cols], axis=1)]


def balance_term(assignment: np.ndarray, demand: np.ndarray, location: int, alpha: float) -> float:
    """(share of total demand assigned to ``location``) ** alpha."""
    demand = np.asarray(demand, dtype=float)
    share = math.fsum(demand[np.asarray(assignment) == location]) / math.fsum(demand)
    return share ** alpha


def objective(instance: AllocationInstance, chosen: Sequence[int]) -> Allocation:
    """Balanced p-median cost of opening ``chosen``, summed with fsum."""
    a, d = instance.demand, instance.distance
    assign = nearest_assignment(d, chosen)
    total = math.fsum(a)
    shares = {j: math.fsum(a[assign == j]) / total for j in sorted(set(int(c) for c in chosen))}
    b = np.array([shares[int(j)] ** instance.alpha for j in assign])
    z = math.fsum(a * d[np.arange(len(a)), assign] * b)
    return Allocation(list(chosen), assign, z, shares)


def greedy_add(instance: AllocationInstance) -> Allocation:
    """Greedy-Add: open one location at a time, each minimizing the balanced objective.

    Candidate scores are computed for all locations at once from cached
    per-edge nearest distances: a candidate only moves the edges it strictly
    improves (or ties with a larger current index). Near-minimal candidates are
    re-scored with :func:`objective` so the choice does not hinge on rounding.
    """
    a, D, alpha = instance.demand, instance.distance, instance.alpha
    n_edges, n_loc = D.shape
    total = a.sum()
    cur_d = np.full(n_edges, np.inf)
    cur_f = np.full(n_edges, n_loc, dtype=int)
    chosen: list[int] = []
    trajectory = []
    ad = a[:, None] * D
    cols = np.arange(n_loc)
    for _ in range(instance.p):
        moved = (D < cur_d[:, None]) | ((D == cur_d[:, None]) & (cols[None, :] < cur_f[:, None]))
        new_share = (a @ moved) / total
        new_cost = np.einsum("ij,ij->j", ad, moved)
        z = (new_share ** alpha) * new_cost if alpha else new_cost.copy()
        for f in chosen:
            mine = cur_f == f
            share_f = a[mine].sum() / total
            cost_f = (a * np.where(mine, cur_d, 0.0)).sum()
            lost_share = (a * mine) @ moved / total
            lost_cost = (a * np.where(mine, cur_d, 0.0)) @ moved
            remaining = np.maximum(share_f - lost_share, 0.0)
            z += (remaining ** alpha) * (cost_f - lost_cost) if alpha else cost_f - lost_cost
        z[chosen] = np.inf
        best = z.min()
        near = np.flatnonzero(z <= best + 1e-9 * max(1.0, abs(best)))
        if len(near) > 1:
            exact = [(objective(instance, chosen + [int(j)]).objective, int(j)) for j in near]
            j_star = min(exact)[1]
        else:
            j_star = int(near[0])
        chosen.append(j_star)
        better = moved[:, j_star]
        cur_d = np.where(better, D[:, j_star], cur_d)
        cur_f = np.where(better, j_star, cur_f)
        trajectory.append(objective(instance, chosen).objective)
    result = objective(instance, chosen)
    result.trajectory = trajectory
    return result


def brute_force_optimum(instance: AllocationInstance) -> Allocation:
    """Exhaustive search over all p-subsets; for small instances and tests only."""
    from itertools import combinations

    best = None
    for subset in combinations(range(instance.n_locations), instance.p):
        alloc = objective(instance, list(subset))
        if best is None or alloc.objective < best.objective:
            best = alloc
    return best
