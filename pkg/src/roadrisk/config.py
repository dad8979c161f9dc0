"""Run configuration: sectioned ``key = value`` files, validated at load time."""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .forecasters import MODEL_KINDS
from .ingest import FEATURES, SourcePaths

ENV_PREFIX = "ROADRISK_"
PATH_KEYS = ("segments", "incidents", "weather", "traffic", "output_dir")

_COMBO_RE = re.compile(r"^(LR|ZIP)\+(NoR|RUS|ROS)\+(NoC1|KM(\d+))$")


@dataclass(frozen=True)
class Combo:
    """One (model, resampling, clustering) row, named like ``LR+RUS+KM2``."""

    model: str
    resampling: str = "NoR"
    k: int = 1

    @property
    def clustering(self) -> str:
        return "NoC1" if self.k == 1 else f"KM{self.k}"

    @property
    def name(self) -> str:
        if self.model == "Naive":
            return "Naive"
        return f"{self.model}+{self.resampling}+{self.clustering}"

    @classmethod
    def parse(cls, text: str) -> "Combo":
        text = text.strip()
        if text.lower() in ("naive", "naïve"):
            return cls("Naive", "NoR", 1)
        m = _COMBO_RE.match(text)
        if not m:
            raise ConfigError(f"cannot parse model combination {text!r} (expected e.g. LR+RUS+KM2)")
        k = 1 if m.group(3) == "NoC1" else int(m.group(4))
        if k < 1:
            raise ConfigError(f"{text}: k must be >= 1")
        return cls(m.group(1), m.group(2), k)


@dataclass
class RunConfig:
    segments: Path
    incidents: Path
    weather: Path
    traffic: Path
    output_dir: Path
    start: date
    end: date
    bbox: tuple
    utc_offset_hours: float = 0.0
    initial_train_months: int = 10
    validation_fraction: float = 0.2
    keep_fraction: float = 1.0
    combos: list = field(default_factory=lambda: [Combo("Naive"), Combo("LR", "RUS", 2)])
    features: tuple = FEATURES
    l2: float = 1e-4
    gd_tol: float = 1e-8
    gd_max_iter: int = 500
    em_tol: float = 1e-8
    em_max_iter: int = 200
    kmeans_restarts: int = 10
    metric_averaging: str = "per_fold"
    seed: int = 0
    workers: int = 1
    p_list: tuple = (10,)
    alpha_list: tuple = (0.0, 0.5, 1.0)
    busy_minutes: float = 60.0
    penalty_km: Optional[float] = None
    cell_size_deg: float = 0.1
    allocation_models: Optional[tuple] = None

    @property
    def sources(self) -> SourcePaths:
        return SourcePaths(self.segments, self.incidents, self.weather, self.traffic)


SCHEMA = {
    "paths": {"segments", "incidents", "weather", "traffic", "output_dir"},
    "study": {"start", "end", "bbox", "utc_offset_hours", "initial_train_months", "validation_fraction"},
    "forecast": {"keep_fraction", "combos", "models", "resampling", "clustering", "features", "l2", "gd_tol",
                 "gd_max_iter", "em_tol", "em_max_iter", "kmeans_restarts", "metric_averaging", "seed", "workers"},
    "allocation": {"p", "alpha", "busy_minutes", "penalty_km", "cell_size_deg", "models"},
}


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _num(section, key, cast, lo=None, hi=None, lo_open=False, hi_open=False):
    raw = section[key]
    try:
        v = cast(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"{key} = {v} out of range")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"{key} = {v} out of range")
    return v


def _date(text: str, key: str) -> date:
    try:
        return date.fromisoformat(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected YYYY-MM-DD, got {text!r}") from None


def parse_bbox(text: str) -> tuple:
    parts = _list(text)
    if len(parts) != 4:
        raise ConfigError("bbox needs lat_min, lat_max, lon_min, lon_max")
    try:
        b = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bbox: cannot parse {text!r}") from None
    if not (b[1] > b[0] and b[3] > b[2]):
        raise ConfigError("bbox is degenerate")
    return b


def _combos(fc) -> list[Combo]:
    if "combos" in fc:
        combos = [Combo.parse(t) for t in _list(fc["combos"])]
    else:
        models = _list(fc.get("models", "Naive, LR"))
        resampling = _list(fc.get("resampling", "NoR"))
        clustering = _list(fc.get("clustering", "NoC1"))
        combos = []
        for m in models:
            if m not in MODEL_KINDS:
                raise ConfigError(f"unknown model {m!r}; choose from {MODEL_KINDS}")
            if m == "Naive":
                combos.append(Combo("Naive"))
                continue
            for r in resampling:
                for c in clustering:
                    combos.append(Combo.parse(f"{m}+{r}+{c}"))
    if not combos:
        raise ConfigError("no model combinations configured")
    names = [c.name for c in combos]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate model combinations")
    return combos


def load_config(path, env: Optional[dict] = None) -> RunConfig:
    """Read and validate a run configuration; paths resolve against the file's directory."""
    env = os.environ if env is None else env
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        unknown = set(cp[sec]) - SCHEMA[sec]
        if unknown:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(unknown)}")
    for sec in ("paths", "study"):
        if sec not in cp:
            raise ConfigError(f"missing section [{sec}]")
    base = path.parent
    paths = {}
    for key in PATH_KEYS:
        raw = env.get(ENV_PREFIX + key.upper()) or cp["paths"].get(key)
        if not raw:
            raise ConfigError(f"[paths] {key} is required")
        p = Path(raw)
        paths[key] = p if p.is_absolute() else base / p

    st = cp["study"]
    for key in ("start", "end", "bbox"):
        if key not in st:
            raise ConfigError(f"[study] {key} is required")
    cfg = RunConfig(**paths, start=_date(st["start"], "start"), end=_date(st["end"], "end"),
                    bbox=parse_bbox(st["bbox"]))
    if cfg.end <= cfg.start:
        raise ConfigError("study end must come after start")
    if "utc_offset_hours" in st:
        cfg.utc_offset_hours = _num(st, "utc_offset_hours", float, -14, 14)
    if "initial_train_months" in st:
        cfg.initial_train_months = _num(st, "initial_train_months", int, 1)
    if "validation_fraction" in st:
        cfg.validation_fraction = _num(st, "validation_fraction", float, 0, 1, lo_open=True, hi_open=True)

    fc = cp["forecast"] if "forecast" in cp else {}
    if fc:
        if "keep_fraction" in fc:
            cfg.keep_fraction = _num(fc, "keep_fraction", float, 0, 1, lo_open=True)
        cfg.combos = _combos(fc)
        if "features" in fc:
            feats = tuple(_list(fc["features"]))
            bad = [f for f in feats if f not in FEATURES]
            if bad or not feats:
                raise ConfigError(f"unknown features {bad}")
            cfg.features = feats
        if "l2" in fc:
            cfg.l2 = _num(fc, "l2", float, 0)
        if "gd_tol" in fc:
            cfg.gd_tol = _num(fc, "gd_tol", float, 0, lo_open=True)
        if "gd_max_iter" in fc:
            cfg.gd_max_iter = _num(fc, "gd_max_iter", int, 1)
        if "em_tol" in fc:
            cfg.em_tol = _num(fc, "em_tol", float, 0, lo_open=True)
        if "em_max_iter" in fc:
            cfg.em_max_iter = _num(fc, "em_max_iter", int, 1)
        if "kmeans_restarts" in fc:
            cfg.kmeans_restarts = _num(fc, "kmeans_restarts", int, 1)
        if "metric_averaging" in fc:
            cfg.metric_averaging = fc["metric_averaging"].strip()
            if cfg.metric_averaging not in ("per_fold", "pooled"):
                raise ConfigError("metric_averaging must be per_fold or pooled")
        if "seed" in fc:
            cfg.seed = _num(fc, "seed", int, 0)
        if "workers" in fc:
            cfg.workers = _num(fc, "workers", int, 1)

    if "allocation" in cp:
        ac = cp["allocation"]
        if "p" in ac:
            try:
                cfg.p_list = tuple(int(v) for v in _list(ac["p"]))
            except ValueError:
                raise ConfigError(f"p: cannot parse {ac['p']!r}") from None
            if not cfg.p_list or min(cfg.p_list) < 1:
                raise ConfigError("p values must be >= 1")
        if "alpha" in ac:
            try:
                cfg.alpha_list = tuple(float(v) for v in _list(ac["alpha"]))
            except ValueError:
                raise ConfigError(f"alpha: cannot parse {ac['alpha']!r}") from None
            if not cfg.alpha_list or min(cfg.alpha_list) < 0:
                raise ConfigError("alpha values must be >= 0")
        if "busy_minutes" in ac:
            cfg.busy_minutes = _num(ac, "busy_minutes", float, 0)
        if "penalty_km" in ac:
            cfg.penalty_km = _num(ac, "penalty_km", float, 0)
        if "cell_size_deg" in ac:
            cfg.cell_size_deg = _num(ac, "cell_size_deg", float, 0, lo_open=True)
        if "models" in ac:
            cfg.allocation_models = tuple(_list(ac["models"]))
    return cfg
