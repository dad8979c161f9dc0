"""Rolling-window forecasting runs and allocation/dispatch evaluation."""

from __future__ import annotations

import json
import logging
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .allocation import distance_table, make_grid
from .clustering import fit_kmeans, resample, segment_rates, target_fractions, write_clusters
from .config import Combo, RunConfig
from .dispatch import DispatchIncident, evaluate_policy
from .domain import WINDOW_HOURS, WINDOWS_PER_DAY, haversine_km
from .errors import ConfigError, DataError
from .forecasters import fit, predict_proba, save_model, tune_threshold, with_threshold
from .ingest import build_dataset, map_incidents, read_incidents, read_segments, write_cells
from .metrics import RESULT_COLUMNS, confusion_metrics, pearson, safe_corr, spatial_marginals, spearman

log = logging.getLogger(__name__)

METRIC_COLUMNS = RESULT_COLUMNS[4:]


# --------------------------------------------------------------------------- folds


def _next_month(d: date) -> date:
    return date(d.year + d.month // 12, d.month % 12 + 1, 1)


def month_starts(start: date, end: date) -> list[date]:
    """First day of each calendar month touching [start, end); the first entry is ``start`` itself."""
    out = [start]
    d = _next_month(start)
    while d < end:
        out.append(d)
        d = _next_month(d)
    return out


@dataclass(frozen=True)
class Fold:
    """Half-open window ranges, numbered from midnight of the first month."""

    index: int
    test_month: date
    train: tuple[int, int]       # everything before the test month
    validation: tuple[int, int]  # tail of ``train`` used only for threshold tuning
    test: tuple[int, int]

    @property
    def fit(self) -> tuple[int, int]:
        return (self.train[0], self.validation[0])


def rolling_folds(months: Sequence[date], end: Optional[date] = None, initial_train_months: int = 10,
                  validation_fraction: float = 0.2) -> list[Fold]:
    """Growing-window folds: months 1..k train, month k+1 tests, for k = initial..T-1."""
    months = sorted(months)
    if len(months) <= initial_train_months:
        raise ConfigError(f"need more than {initial_train_months} months for rolling folds, got {len(months)}")
    if not 0 < validation_fraction < 1:
        raise ConfigError("validation_fraction must be in (0, 1)")
    end = _next_month(months[-1]) if end is None else end
    origin = months[0]
    bounds = [(m - origin).days * WINDOWS_PER_DAY for m in months] + [(end - origin).days * WINDOWS_PER_DAY]
    folds = []
    for i in range(initial_train_months, len(months)):
        hi = bounds[i]
        n_val = max(1, int(round(validation_fraction * hi)))
        if n_val >= hi:
            raise ConfigError("validation split leaves no fitting windows")
        folds.append(Fold(len(folds), months[i], (0, hi), (hi - n_val, hi), (hi, bounds[i + 1])))
    return folds


def _between(frame: pd.DataFrame, rng: tuple[int, int]) -> pd.DataFrame:
    w = frame["window"].to_numpy()
    return frame[(w >= rng[0]) & (w < rng[1])]


def derive_seed(base: int, *parts) -> int:
    """Stable child seed from a base seed and labels (strings hashed with crc32)."""
    words = [int(base)] + [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# --------------------------------------------------------------------------- one fold


@dataclass(frozen=True)
class FitSettings:
    combos: tuple
    features: tuple
    l2: float = 1e-4
    gd_tol: float = 1e-8
    gd_max_iter: int = 500
    em_tol: float = 1e-8
    em_max_iter: int = 200
    kmeans_restarts: int = 10
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "FitSettings":
        return cls(tuple(cfg.combos), tuple(cfg.features), cfg.l2, cfg.gd_tol, cfg.gd_max_iter, cfg.em_tol,
                   cfg.em_max_iter, cfg.kmeans_restarts, cfg.seed)


@dataclass
class FoldOutput:
    fold: Fold
    rows: list = field(default_factory=list)           # per-combination metric rows
    predictions: Optional[pd.DataFrame] = None
    clusters: dict = field(default_factory=dict)       # k -> (ClusterModel, rates)
    models: dict = field(default_factory=dict)         # combo name -> {cluster: ModelParams}


def _cluster_ids(frame: pd.DataFrame, assignment: dict, k: int) -> np.ndarray:
    # segments never seen while fitting fall into the lowest-rate cluster
    return frame["segment_id"].map(assignment).fillna(k - 1).astype(int).to_numpy()


def _metric_row(combo: Combo, labels, predicted, frame, probs) -> dict:
    cm = confusion_metrics(labels, predicted)
    obs, pred = spatial_marginals(frame, probs)
    return {
        "Model": combo.model, "Clustering": combo.clustering, "Resampling": combo.resampling, "Name": combo.name,
        "Accuracy": 100 * cm.accuracy, "Precision": 100 * cm.precision, "Recall": 100 * cm.recall,
        "F1-Score": 100 * cm.f1, "Pearson": 100 * safe_corr(pearson, obs, pred),
        "Spearman": 100 * safe_corr(spearman, obs, pred),
    }


def fit_combo(combo: Combo, fit_df, val_df, test_df, settings: FitSettings, fold_index: int, clusters: dict):
    """Fit one combination on ``fit_df``, tune thresholds on ``val_df``, score ``test_df``.

    Returns (probabilities, predictions, cluster ids, {cluster: model}).
    """
    feats = settings.features
    if combo.model == "Naive":
        m = fit("Naive", fit_df, feats)
        m = with_threshold(m, tune_threshold(m, val_df))
        p = predict_proba(m, test_df)
        return p, (p >= m.threshold).astype(int), np.zeros(len(test_df), dtype=int), {0: m}
    k = combo.k
    if k > 1:
        km = clusters[k][0]
        c_fit = _cluster_ids(fit_df, km.assignment, k)
        c_val = _cluster_ids(val_df, km.assignment, k)
        c_test = _cluster_ids(test_df, km.assignment, k)
    else:
        c_fit = np.zeros(len(fit_df), dtype=int)
        c_val = np.zeros(len(val_df), dtype=int)
        c_test = np.zeros(len(test_df), dtype=int)
    labels = fit_df["label"].to_numpy()
    targets = None
    if combo.resampling != "NoR":
        targets = target_fractions({c: float(labels[c_fit == c].mean()) if (c_fit == c).any() else 0.0
                                    for c in range(k)})
    tol, max_iter = (settings.gd_tol, settings.gd_max_iter) if combo.model == "LR" else \
        (settings.em_tol, settings.em_max_iter)
    probs = np.zeros(len(test_df))
    pred = np.zeros(len(test_df), dtype=int)
    models = {}
    for c in range(k):
        part = fit_df[c_fit == c]
        if len(part) == 0:
            raise DataError(f"{combo.name}: cluster {c} has no training cells")
        if targets is not None:
            part = resample(part, targets[c], combo.resampling,
                            derive_seed(settings.seed, fold_index, combo.name, c), cluster=c)
        m = fit(combo.model, part, feats, l2=settings.l2, tol=tol, max_iter=max_iter)
        m = with_threshold(m, tune_threshold(m, val_df[c_val == c]))
        models[c] = m
        sel = c_test == c
        if sel.any():
            probs[sel] = predict_proba(m, test_df[sel])
            pred[sel] = (probs[sel] >= m.threshold).astype(int)
    return probs, pred, c_test, models


def run_fold(cells: pd.DataFrame, fold: Fold, settings: FitSettings) -> FoldOutput:
    fit_df = _between(cells, fold.fit)
    val_df = _between(cells, fold.validation)
    test_df = _between(cells, fold.test)
    if len(fit_df) == 0 or len(test_df) == 0:
        raise DataError(f"fold {fold.index}: empty training or test range")
    out = FoldOutput(fold)
    rates = segment_rates(fit_df)
    for k in sorted({c.k for c in settings.combos if c.model != "Naive" and c.k > 1}):
        km = fit_kmeans(rates, k, seed=derive_seed(settings.seed, fold.index, "kmeans", k),
                        n_init=settings.kmeans_restarts)
        out.clusters[k] = (km, rates)
    preds = []
    for combo in settings.combos:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            probs, pred, cids, models = fit_combo(combo, fit_df, val_df, test_df, settings, fold.index, out.clusters)
        out.models[combo.name] = models
        row = _metric_row(combo, test_df["label"].to_numpy(), pred, test_df, probs)
        row.update(fold=fold.index, test_month=fold.test_month.isoformat(), n_cells=len(test_df),
                   n_positive=int(test_df["label"].sum()))
        out.rows.append(row)
        preds.append(pd.DataFrame({
            "model": combo.name, "fold": fold.index, "segment_id": test_df["segment_id"].to_numpy(),
            "date": pd.to_datetime(test_df["date"]).dt.strftime("%Y-%m-%d").to_numpy(),
            "window_index": test_df["window_index"].to_numpy(), "window": test_df["window"].to_numpy(),
            "cluster_id": cids, "probability": probs, "predicted": pred,
            "incident_count": test_df["incident_count"].to_numpy(), "label": test_df["label"].to_numpy(),
        }))
    out.predictions = pd.concat(preds, ignore_index=True)
    return out


def _run_fold_star(args):
    return run_fold(*args)


# --------------------------------------------------------------------------- forecasting run


@dataclass
class ForecastRun:
    folds: list
    results: pd.DataFrame
    by_fold: pd.DataFrame
    predictions: pd.DataFrame
    outputs: list
    report: dict


def _write_csv(frame: pd.DataFrame, path: Path, float_format: str = "%.10g") -> None:
    frame.to_csv(path, index=False, float_format=float_format, lineterminator="\n")


def aggregate_results(by_fold: pd.DataFrame, predictions: pd.DataFrame, combos: Sequence[Combo],
                      how: str = "per_fold") -> pd.DataFrame:
    """One row per combination: metrics averaged over test folds, or computed on pooled test cells."""
    rows = []
    for combo in combos:
        if how == "pooled":
            p = predictions[predictions["model"] == combo.name]
            rows.append(_metric_row(combo, p["label"].to_numpy(), p["predicted"].to_numpy(), p,
                                    p["probability"].to_numpy()))
            continue
        f = by_fold[by_fold["Name"] == combo.name]
        row = {c: f[c].iloc[0] for c in RESULT_COLUMNS[:4]}
        for c in METRIC_COLUMNS:
            vals = f[c].to_numpy(dtype=float)
            row[c] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
        rows.append(row)
    return pd.DataFrame(rows, columns=list(RESULT_COLUMNS))


def run_forecast(cfg: RunConfig, write: bool = True) -> ForecastRun:
    """ingest -> filter -> cluster -> resample -> fit -> tune -> metrics, over rolling folds."""
    folds = rolling_folds(month_starts(cfg.start, cfg.end), cfg.end, cfg.initial_train_months,
                          cfg.validation_fraction)
    cells, report, kept = build_dataset(cfg.sources, cfg.start, cfg.end, cfg.utc_offset_hours,
                                        cfg.keep_fraction, train_windows=folds[0].train)
    settings = FitSettings.from_config(cfg)
    jobs = [(cells, f, settings) for f in folds]
    if cfg.workers > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(folds))) as pool:
            outs = list(pool.map(_run_fold_star, jobs))
    else:
        outs = [run_fold(*job) for job in jobs]
    outs.sort(key=lambda o: o.fold.index)

    by_fold = pd.DataFrame([r for o in outs for r in o.rows])
    by_fold = by_fold[["fold", "test_month", *RESULT_COLUMNS, "n_cells", "n_positive"]]
    predictions = pd.concat([o.predictions for o in outs], ignore_index=True)
    results = aggregate_results(by_fold, predictions, cfg.combos, cfg.metric_averaging)
    run = ForecastRun(folds, results, by_fold, predictions, outs, report.to_dict())
    if write:
        write_forecast_outputs(run, cells, cfg.output_dir)
    return run


def write_forecast_outputs(run: ForecastRun, cells: pd.DataFrame, out_dir) -> None:
    # single writer: workers only return in-memory results
    out = Path(out_dir)
    (out / "clusters").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(parents=True, exist_ok=True)
    write_cells(cells, out / "cells.csv")
    (out / "ingest_report.json").write_text(json.dumps(run.report, indent=2, sort_keys=True) + "\n")
    _write_csv(run.results, out / "results.csv", "%.4f")
    _write_csv(run.by_fold, out / "results_by_fold.csv", "%.4f")
    _write_csv(run.predictions, out / "predictions.csv")
    _write_csv(pd.DataFrame([{
        "fold": f.index, "test_month": f.test_month.isoformat(), "fit_start": f.fit[0], "fit_end": f.fit[1],
        "validation_start": f.validation[0], "validation_end": f.validation[1],
        "test_start": f.test[0], "test_end": f.test[1]} for f in run.folds]), out / "folds.csv")
    for o in run.outputs:
        for k, (km, rates) in o.clusters.items():
            write_clusters(km, rates, out / "clusters" / f"fold_{o.fold.index:02d}_KM{k}.csv")
        for name, models in o.models.items():
            for c, m in models.items():
                save_model(m, out / "models" / f"fold_{o.fold.index:02d}_{name}_c{c}.model")


# --------------------------------------------------------------------------- allocation run


@dataclass
class AllocationRun:
    summary: pd.DataFrame
    window_stats: pd.DataFrame
    trace: pd.DataFrame
    allocations: pd.DataFrame
    penalty_km: float


def default_penalty_km(bbox) -> float:
    """Twice the bounding-box diagonal."""
    lat0, lat1, lon0, lon1 = bbox
    return 2.0 * haversine_km((lat0, lon0), (lat1, lon1))


def _window_key(day: str, widx: int) -> tuple[str, int]:
    return (day, int(widx))


def load_test_incidents(cfg: RunConfig, segment_ids) -> dict:
    """Incidents mapped (against every segment) onto the given segments, keyed by window."""
    segments = read_segments(cfg.segments)
    incidents = read_incidents(cfg.incidents, cfg.utc_offset_hours)
    mapped = map_incidents(incidents, segments)
    keep = set(segment_ids)
    mapped = mapped[mapped["segment_id"].isin(keep)]
    out: dict = {}
    for row in mapped.itertuples(index=False):
        ts = row.timestamp.to_pydatetime()
        key = _window_key(ts.strftime("%Y-%m-%d"), ts.hour // WINDOW_HOURS)
        out.setdefault(key, []).append(DispatchIncident(str(row.id), ts, (float(row.lat), float(row.lon))))
    return out


def _policy_job(args):
    name, demand, D, centers, incidents, p, alpha, busy, penalty = args
    return name, p, alpha, evaluate_policy(demand, D, centers, incidents, p, alpha, busy, penalty)


def run_allocation(cfg: RunConfig, predictions_path, write: bool = True) -> AllocationRun:
    """For each (model, p, alpha): allocate per test window, replay dispatch, aggregate."""
    if not Path(predictions_path).is_file():
        raise DataError(f"predictions file {predictions_path} not found; run run-forecast first")
    preds = pd.read_csv(predictions_path, dtype={"segment_id": str, "model": str, "date": str})
    need = {"model", "segment_id", "date", "window_index", "probability"}
    if need - set(preds.columns):
        raise DataError(f"predictions file lacks columns {sorted(need - set(preds.columns))}")
    models = list(cfg.allocation_models) if cfg.allocation_models else list(dict.fromkeys(preds["model"]))
    unknown = [m for m in models if m not in set(preds["model"])]
    if unknown:
        raise ConfigError(f"allocation models {unknown} not present in {predictions_path}")
    seg_ids = sorted(preds["segment_id"].unique())
    seg_pos = {s: i for i, s in enumerate(seg_ids)}
    segments = {s.id: s for s in read_segments(cfg.segments)}
    missing = [s for s in seg_ids if s not in segments]
    if missing:
        raise DataError(f"predicted segments missing from segments file: {missing[:5]}")
    grid = make_grid(cfg.bbox, cfg.cell_size_deg)
    centers = [g.center for g in grid]
    D = distance_table([segments[s].centroid for s in seg_ids], grid)
    penalty = cfg.penalty_km if cfg.penalty_km is not None else default_penalty_km(cfg.bbox)
    incidents = load_test_incidents(cfg, seg_ids)
    for p in cfg.p_list:
        if p > len(grid):
            raise ConfigError(f"p = {p} exceeds the {len(grid)} grid locations")

    jobs = []
    for name in models:
        sub = preds[preds["model"] == name]
        keys = list(zip(sub["date"], sub["window_index"].astype(int)))
        uniq = sorted(set(keys))
        kpos = {k: i for i, k in enumerate(uniq)}
        mat = np.zeros((len(uniq), len(seg_ids)))
        mat[[kpos[k] for k in keys], sub["segment_id"].map(seg_pos).to_numpy()] = sub["probability"].to_numpy()
        demand = {k: mat[i] for k, i in kpos.items()}
        for p in cfg.p_list:
            for alpha in cfg.alpha_list:
                jobs.append((name, demand, D, centers, incidents, p, alpha, cfg.busy_minutes, penalty))
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_policy_job, jobs))
    else:
        results = [_policy_job(j) for j in jobs]

    summary, stats, trace, allocs = [], [], [], []
    for name, p, alpha, res in results:
        summary.append({"model": name, "p": p, "alpha": alpha, **res.summary()})
        for w in res.windows:
            day, widx = w.window
            t = w.trace
            stats.append({"model": name, "p": p, "alpha": alpha, "date": day, "window_index": widx,
                          "n_incidents": t.n_incidents, "dispatched": t.dispatched, "unattended": t.unattended,
                          "mean_distance_km": t.mean_distance(), "mean_distance_with_penalty_km": t.mean_with_penalty()})
            for e in t.entries:
                trace.append({"model": name, "p": p, "alpha": alpha, "date": day, "window_index": widx,
                              "incident_id": e.incident_id,
                              "responder_location": -1 if e.unattended else w.chosen[e.responder],
                              "distance_km": e.distance_km, "unattended": int(e.unattended)})
            for order, j in enumerate(w.chosen):
                g = grid[j]
                allocs.append({"model": name, "p": p, "alpha": alpha, "date": day, "window_index": widx,
                               "order": order, "location": j, "cell_row": g.cell_row, "cell_col": g.cell_col,
                               "lat": g.center[0], "lon": g.center[1], "share": w.shares.get(j, 0.0)})
    run = AllocationRun(pd.DataFrame(summary), pd.DataFrame(stats), pd.DataFrame(trace), pd.DataFrame(allocs),
                        penalty)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(run.summary, out / "summary.csv")
        _write_csv(run.window_stats, out / "window_stats.csv")
        _write_csv(run.trace, out / "trace.csv")
        _write_csv(run.allocations, out / "allocations.csv")
    return run


def median_distance(summary: pd.DataFrame, model: str, p: int, alpha: float) -> float:
    row = summary[(summary["model"] == model) & (summary["p"] == p) & np.isclose(summary["alpha"], alpha)]
    if len(row) != 1:
        raise KeyError((model, p, alpha))
    return float(row["dist_median"].iloc[0])

