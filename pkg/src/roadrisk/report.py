"""Self-contained HTML report from run outputs (tables plus inline SVG figures)."""

from __future__ import annotations

import html
import io
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import DataError  # noqa: E402
from .metrics import RESULT_COLUMNS  # noqa: E402

_RED = np.array([0xF8, 0x69, 0x6B])
_WHITE = np.array([0xFC, 0xFC, 0xFF])
_GREEN = np.array([0x63, 0xBE, 0x7B])

_CSS = """
body { font-family: sans-serif; margin: 2em; color: #222; }
table { border-collapse: collapse; margin: 1em 0; font-size: 0.9em; }
th, td { border: 1px solid #999; padding: 3px 8px; text-align: right; }
th { background: #eee; }
td.label { text-align: left; }
figure { margin: 1em 0; }
"""


def _color(value: float, lo: float, hi: float, higher_is_better: bool) -> str:
    """Red-white-green scale over a column, green marking the best value."""
    if not np.isfinite(value) or hi <= lo:
        return ""
    t = (value - lo) / (hi - lo)
    if not higher_is_better:
        t = 1.0 - t
    rgb = _RED + (_WHITE - _RED) * (2 * t) if t < 0.5 else _WHITE + (_GREEN - _WHITE) * (2 * t - 1)
    return "background:#%02X%02X%02X" % tuple(int(round(c)) for c in rgb)


def _table(frame: pd.DataFrame, label_cols, value_cols, higher_is_better=True, fmt="{:.1f}",
           header: Optional[list] = None) -> str:
    out = ["<table>"]
    if header:
        out.extend(header)
    out.append("<tr>" + "".join(f"<th>{html.escape(str(c))}</th>" for c in (*label_cols, *value_cols)) + "</tr>")
    ranges = {}
    for c in value_cols:
        v = pd.to_numeric(frame[c], errors="coerce").to_numpy(dtype=float)
        v = v[np.isfinite(v)]
        ranges[c] = (v.min(), v.max()) if len(v) else (np.nan, np.nan)
    for _, row in frame.iterrows():
        cells = [f'<td class="label">{html.escape(str(row[c]))}</td>' for c in label_cols]
        for c in value_cols:
            v = float(row[c])
            style = _color(v, *ranges[c], higher_is_better)
            text = fmt.format(v) if np.isfinite(v) else "n/a"
            cells.append(f'<td style="{style}">{text}</td>')
        out.append("<tr>" + "".join(cells) + "</tr>")
    out.append("</table>")
    return "\n".join(out)


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", bbox_inches="tight")
    plt.close(fig)
    text = buf.getvalue()
    return text[text.index("<svg"):]


def _alpha_label(a: float) -> str:
    return f"{a:g}"


def forecast_section(results: pd.DataFrame, by_fold: Optional[pd.DataFrame]) -> str:
    parts = ["<h2>Forecasting metrics (%)</h2>",
             _table(results, RESULT_COLUMNS[:4], RESULT_COLUMNS[4:], higher_is_better=True)]
    if by_fold is not None and len(by_fold):
        parts.append("<h3>Per test month</h3>")
        cols = ["fold", "test_month", "Name"]
        parts.append(_table(by_fold, cols, RESULT_COLUMNS[4:], higher_is_better=True))
    return "\n".join(parts)


def unattended_section(summary: pd.DataFrame) -> str:
    ps = sorted(summary["p"].unique())
    alphas = sorted(summary["alpha"].unique())
    models = list(dict.fromkeys(summary["model"]))
    rows = []
    for m in models:
        row = {"Model": m}
        for stat in ("unattended_mean", "unattended_max"):
            for p in ps:
                for a in alphas:
                    sel = summary[(summary["model"] == m) & (summary["p"] == p) & (summary["alpha"] == a)]
                    row[(stat, p, a)] = float(sel[stat].iloc[0]) if len(sel) else np.nan
        rows.append(row)
    frame = pd.DataFrame(rows)
    value_cols = [c for c in frame.columns if c != "Model"]
    n = len(ps) * len(alphas)
    header = [
        "<tr><th></th>" + f'<th colspan="{n}">average unattended per window</th>'
        + f'<th colspan="{n}">maximum unattended per window</th></tr>',
        "<tr><th>p</th>" + "".join(f'<th colspan="{len(alphas)}">{p}</th>' for p in ps) * 2 + "</tr>",
    ]
    frame.columns = ["Model"] + [f"α={_alpha_label(a)}" for (_, _, a) in value_cols]
    # duplicate column labels are fine for display; index positions keep values apart
    body = _table_positional(frame, header)
    return "<h2>Unattended incidents</h2>\n" + body


def _table_positional(frame: pd.DataFrame, header: list) -> str:
    out = ["<table>", *header]
    out.append("<tr>" + "".join(f"<th>{html.escape(str(c))}</th>" for c in frame.columns) + "</tr>")
    values = frame.iloc[:, 1:].to_numpy(dtype=float)
    lo = np.nanmin(values, axis=0) if values.size else []
    hi = np.nanmax(values, axis=0) if values.size else []
    for i in range(len(frame)):
        cells = [f'<td class="label">{html.escape(str(frame.iloc[i, 0]))}</td>']
        for j, v in enumerate(values[i]):
            style = _color(v, lo[j], hi[j], higher_is_better=False)
            cells.append(f'<td style="{style}">{v:.2f}</td>' if np.isfinite(v) else "<td>n/a</td>")
        out.append("<tr>" + "".join(cells) + "</tr>")
    out.append("</table>")
    return "\n".join(out)


def distance_section(summary: pd.DataFrame, window_stats: Optional[pd.DataFrame]) -> str:
    parts = ["<h2>Distance per dispatched incident (km)</h2>"]
    cols = ["dist_min", "dist_median", "dist_mean", "dist_max", "dist_pen_median", "dist_pen_mean"]
    table = summary[["model", "p", "alpha", *cols]].copy()
    table["alpha"] = table["alpha"].map(_alpha_label)
    parts.append(_table(table, ["model", "p", "alpha"], cols, higher_is_better=False, fmt="{:.2f}"))
    parts.append("<p>Statistics are across windows of the per-window mean distance over dispatched incidents; "
                 "the <code>pen</code> columns also charge the unattended penalty.</p>")

    # alpha sweep: median distance against alpha, one panel per p
    ps = sorted(summary["p"].unique())
    fig, axes = plt.subplots(1, len(ps), figsize=(4.5 * len(ps), 3.5), squeeze=False)
    for ax, p in zip(axes[0], ps):
        sub = summary[summary["p"] == p]
        for m in dict.fromkeys(sub["model"]):
            s = sub[sub["model"] == m].sort_values("alpha")
            ax.plot(s["alpha"], s["dist_median"], marker="o", label=m)
        ax.set_title(f"p = {p}")
        ax.set_xlabel("alpha")
        ax.set_ylabel("median distance (km)")
        ax.grid(alpha=0.3)
    axes[0][-1].legend(fontsize="small")
    parts.append("<figure>" + _svg(fig) + "<figcaption>Median per-window distance against the balance exponent."
                 "</figcaption></figure>")

    if window_stats is not None and len(window_stats):
        for p in ps:
            ws = window_stats[(window_stats["p"] == p) & window_stats["mean_distance_km"].notna()]
            alphas = sorted(ws["alpha"].unique())
            models = list(dict.fromkeys(ws["model"]))
            fig, axes = plt.subplots(1, len(alphas), figsize=(max(4, 1.2 * len(models)) * len(alphas), 3.8),
                                     squeeze=False, sharey=True)
            for ax, a in zip(axes[0], alphas):
                data = [ws[(ws["model"] == m) & (ws["alpha"] == a)]["mean_distance_km"].to_numpy() for m in models]
                ax.boxplot(data, showfliers=False)
                ax.set_xticks(range(1, len(models) + 1), models, rotation=45, ha="right", fontsize="small")
                ax.set_title(f"p = {p}, alpha = {_alpha_label(a)}")
            axes[0][0].set_ylabel("mean distance per window (km)")
            parts.append("<figure>" + _svg(fig) + f"<figcaption>Per-window distance distribution, p = {p}."
                         "</figcaption></figure>")
    return "\n".join(parts)


def _maybe_read(path: Path) -> Optional[pd.DataFrame]:
    return pd.read_csv(path) if path.is_file() else None


def build_report(in_dir, out_file) -> Path:
    """Render whatever forecast and allocation outputs exist in ``in_dir``."""
    in_dir = Path(in_dir)
    results = _maybe_read(in_dir / "results.csv")
    by_fold = _maybe_read(in_dir / "results_by_fold.csv")
    summary = _maybe_read(in_dir / "summary.csv")
    window_stats = _maybe_read(in_dir / "window_stats.csv")
    if results is None and summary is None:
        raise DataError(f"{in_dir} holds neither results.csv nor summary.csv")
    body = ["<h1>Incident forecasting and response allocation</h1>"]
    if results is not None:
        body.append(forecast_section(results, by_fold))
    if summary is not None:
        body.append(unattended_section(summary))
        body.append(distance_section(summary, window_stats))
    doc = ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>roadrisk report</title>"
           f"<style>{_CSS}</style></head><body>\n" + "\n".join(body) + "\n</body></html>\n")
    out = Path(out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(doc, encoding="utf-8")
    return out
