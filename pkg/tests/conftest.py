from datetime import date

import pytest

from roadrisk.ingest import SourcePaths, build_dataset
from roadrisk.synth import SyntheticWorldSpec, gen_synthetic

SMALL_START = date(2019, 1, 1)
SMALL_END = date(2019, 3, 1)


def small_spec(**kw) -> SyntheticWorldSpec:
    base = dict(n_segments=8, months=2, n_stations=3, n_hotspots=2, high_fraction=0.25, high_rate=0.3,
                low_rate=0.05, traffic_interval_minutes=120, missing_fraction=0.05, seed=3)
    base.update(kw)
    return SyntheticWorldSpec(**base)


def sources(d) -> SourcePaths:
    return SourcePaths(d / "segments.csv", d / "incidents.csv", d / "weather.csv", d / "traffic.csv")


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    d = tmp_path_factory.mktemp("small_world")
    truth = gen_synthetic(small_spec(), d)
    return d, truth


@pytest.fixture(scope="session")
def small_dataset(small_world):
    d, _ = small_world
    return build_dataset(sources(d), SMALL_START, SMALL_END)


YEAR_START = date(2019, 1, 1)
YEAR_END = date(2020, 1, 1)


def year_spec(**kw) -> SyntheticWorldSpec:
    base = dict(n_segments=16, months=12, n_stations=3, n_hotspots=2, high_fraction=0.25, high_rate=0.08,
                low_rate=0.01, traffic_interval_minutes=240, bbox=(35.0, 35.6, -87.0, -86.2), seed=4)
    base.update(kw)
    return SyntheticWorldSpec(**base)


def write_run_config(path, data_dir, out_dir, **sections) -> None:
    """Run config for the 12-month world; ``sections`` maps section name to extra lines."""
    text = f"""[paths]
segments = {data_dir}/segments.csv
incidents = {data_dir}/incidents.csv
weather = {data_dir}/weather.csv
traffic = {data_dir}/traffic.csv
output_dir = {out_dir}

[study]
start = {YEAR_START}
end = {YEAR_END}
bbox = 35.0, 35.6, -87.0, -86.2

[forecast]
combos = Naive, LR+RUS+KM2, LR+ROS+NoC1, ZIP+NoR+KM2
{sections.get("forecast", "")}

[allocation]
p = 1, 3
alpha = 0, 1
{sections.get("allocation", "")}
"""
    path.write_text(text)


@pytest.fixture(scope="session")
def year_world(tmp_path_factory):
    d = tmp_path_factory.mktemp("year_world")
    truth = gen_synthetic(year_spec(), d)
    return d, truth
