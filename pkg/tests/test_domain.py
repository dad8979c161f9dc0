import math
from datetime import date, datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadrisk.domain import (CellRecord, GridLocation, ModelParams, RoadSegment, TimeWindow, haversine_km,
                             haversine_km_array, window_number, window_of)


def _oracle_haversine(a, b):
    # spherical law of cosines: an independent closed form
    p1, p2 = math.radians(a[0]), math.radians(b[0])
    dl = math.radians(b[1] - a[1])
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return 6371.0 * math.acos(max(-1.0, min(1.0, c)))


@pytest.mark.parametrize("ts, expected", [
    (datetime(2019, 4, 3, 3, 59), (date(2019, 4, 3), 0)),
    (datetime(2019, 4, 3, 4, 0), (date(2019, 4, 3), 1)),
    (datetime(2019, 4, 3, 23, 59), (date(2019, 4, 3), 5)),
])
def test_window_of_boundaries(ts, expected):
    w = window_of(ts)
    assert (w.date, w.window_index) == expected


def test_window_of_surjective_on_a_day():
    day = datetime(2019, 4, 3)
    seen = {window_of(day + timedelta(minutes=m)).window_index for m in range(0, 24 * 60)}
    assert seen == set(range(6))


@given(st.datetimes(min_value=datetime(2000, 1, 1), max_value=datetime(2040, 1, 1)))
def test_window_contains_its_timestamp(ts):
    w = window_of(ts)
    assert w.start <= ts < w.end
    assert window_number(w.start, date(2000, 1, 1)) == window_number(ts, date(2000, 1, 1))


def test_window_index_validated():
    with pytest.raises(ValueError):
        TimeWindow(date(2019, 1, 1), 6)


def test_haversine_examples():
    assert haversine_km((35.0, -90.0), (35.0, -90.0)) == 0.0
    assert haversine_km((35.0, -90.0), (36.0, -90.0)) == pytest.approx(_oracle_haversine((35, -90), (36, -90)), abs=1e-6)
    assert haversine_km((35.0, -90.0), (36.0, -90.0)) == pytest.approx(111.19, abs=0.01)
    # one degree of longitude at 35N: 111.19 * cos(35) = 91.085 km
    assert haversine_km((35.0, -90.0), (35.0, -89.0)) == pytest.approx(91.085, abs=0.001)
    assert haversine_km((35.0, -90.0), (35.0, -89.0)) == pytest.approx(_oracle_haversine((35, -90), (35, -89)), abs=1e-6)


coords = st.tuples(st.floats(-80, 80), st.floats(-179, 179))


@given(coords, coords, coords)
def test_haversine_metric_properties(a, b, c):
    ab, ba = haversine_km(a, b), haversine_km(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, abs=1e-9)
    assert ab <= haversine_km(a, c) + haversine_km(c, b) + 1e-9


@given(coords, coords)
def test_haversine_array_matches_scalar(a, b):
    v = haversine_km_array(np.array([a[0]]), np.array([a[1]]), np.array([b[0]]), np.array([b[1]]))[0]
    assert v == pytest.approx(haversine_km(a, b), abs=1e-9)


def test_segment_invariants():
    seg = RoadSegment("s1", "I-40", ((35.0, -86.0), (35.0, -86.2)), 2, 1.5, 1.0, 65.0)
    assert seg.centroid == pytest.approx((35.0, -86.1))
    with pytest.raises(ValueError):
        RoadSegment("s1", "I-40", ((35.0, -86.0),), 2, 1.5, 1.0)
    with pytest.raises(ValueError):
        RoadSegment("s1", "I-40", ((35.0, -86.0), (35.1, -86.0)), 2, 1.5, 1.2)
    with pytest.raises(ValueError):
        RoadSegment("s1", "I-40", ((35.0, -86.0), (35.1, -86.0)), 2, 0.0, 1.0)


@given(st.integers(0, 50))
def test_label_is_function_of_count(n):
    rec = CellRecord("s", TimeWindow(date(2019, 1, 1), 0), (("x", 1.0),), n)
    assert rec.label == min(n, 1)


def test_cell_rejects_missing_features():
    with pytest.raises(ValueError):
        CellRecord("s", TimeWindow(date(2019, 1, 1), 0), (("x", float("nan")),), 0)


def test_model_params_invariants():
    with pytest.raises(ValueError):
        ModelParams("LR", ("a",), np.zeros(1), np.ones(1), np.zeros(2), threshold=1.0)
    with pytest.raises(ValueError):
        ModelParams("LR", ("a", "b"), np.zeros(2), np.ones(2), np.zeros(2))
    m = ModelParams("LR", ("a",), np.zeros(1), np.ones(1), np.zeros(2), threshold=0.3)
    assert m.threshold == 0.3


def test_grid_location_is_plain_record():
    g = GridLocation(1, 2, (35.15, -89.75))
    assert (g.cell_row, g.cell_col, g.center) == (1, 2, (35.15, -89.75))
