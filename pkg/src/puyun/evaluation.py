"""
Latitude-weighted verification scores.

Array conventions: forecasts and truths are ``[N_init, L, C, H, W]`` (N
initialisations, L lead times). Scores come back as ``[C, L]``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Climatology, Dataset
from .errors import DataError, ShapeError, UndefinedACCError
from .grid import GridSpec

HOURS_PER_STEP = 6


def _check(preds, truths):
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise ShapeError(f"forecast {preds.shape} vs truth {truths.shape}")
    if preds.ndim != 5:
        raise ShapeError(f"expected [N, L, C, H, W], got {preds.shape}")
    if preds.shape[0] == 0:
        raise DataError("empty set of initialisation times")
    return preds, truths


def rmse(preds, truths, grid: GridSpec) -> np.ndarray:
    """Per-initialisation weighted RMSE, averaged over initialisations -> [C, L]."""
    preds, truths = _check(preds, truths)
    sq = grid.row_weights * (preds - truths) ** 2
    per_init = np.sqrt(sq.mean(axis=(-2, -1)))  # [N, L, C]
    return per_init.mean(axis=0).T


def anomaly_correlation(pred, truth, clim, weights) -> float:
    """ACC of one field; anomalies are ``a_i * (x - m)``."""
    pa = weights * (np.asarray(pred, np.float64) - clim)
    ta = weights * (np.asarray(truth, np.float64) - clim)
    den = np.sqrt((pa * pa).sum()) * np.sqrt((ta * ta).sum())
    if den == 0.0:
        raise UndefinedACCError("anomaly field has zero norm")
    return float((pa * ta).sum() / den)


def acc(preds, truths, clim_fields, grid: GridSpec) -> np.ndarray:
    """Anomaly correlation per (channel, lead), averaged over initialisations.

    ``clim_fields`` holds the climatological mean at each validity time and
    has the same shape as ``preds``. Cells where any initialisation has a
    zero-norm anomaly are NaN (undefined), never 0.
    """
    preds, truths = _check(preds, truths)
    clim = np.asarray(clim_fields, dtype=np.float64)
    if clim.shape != preds.shape:
        raise ShapeError(f"climatology {clim.shape} vs forecast {preds.shape}")
    w = grid.row_weights
    pa = w * (preds - clim)
    ta = w * (truths - clim)
    num = (pa * ta).sum(axis=(-2, -1))
    den = np.sqrt((pa * pa).sum(axis=(-2, -1))) * np.sqrt((ta * ta).sum(axis=(-2, -1)))
    with np.errstate(invalid="ignore", divide="ignore"):
        per_init = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    per_init = np.clip(per_init, -1.0, 1.0)
    return per_init.mean(axis=0).T


@dataclass
class EvalReport:
    """Scores per model: ``scores[model] = {"rmse": [C, L], "acc": [C, L]}``."""

    variables: list
    lead_hours: list
    init_times: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)

    def add(self, model: str, rmse_vals, acc_vals) -> None:
        shape = (len(self.variables), len(self.lead_hours))
        if np.shape(rmse_vals) != shape or np.shape(acc_vals) != shape:
            raise ShapeError(f"scores for {model} must be {shape}")
        self.scores[model] = {"rmse": np.asarray(rmse_vals, float), "acc": np.asarray(acc_vals, float)}

    @property
    def models(self) -> list:
        return list(self.scores)


def truth_windows(dataset: Dataset, init_times: Sequence[int], n_steps: int) -> np.ndarray:
    """Normalised truths X^{t0+1..t0+L} for every init -> [N, L, C, H, W]."""
    data = dataset.normalized
    o = dataset.time_origin
    out = []
    for t0 in init_times:
        if t0 - 1 < o or t0 + n_steps - o >= dataset.n_steps:
            raise DataError(f"init {t0} with {n_steps} leads falls outside the dataset")
        out.append(data[t0 + 1 - o:t0 + 1 + n_steps - o])
    return np.stack(out)


def climatology_windows(clim: Climatology, init_times, n_steps: int) -> np.ndarray:
    return np.stack([np.stack([clim.at(t0 + k) for k in range(1, n_steps + 1)])
                     for t0 in init_times])


def baselines(dataset: Dataset, clim: Climatology, init_times, n_steps: int,
              grid: Optional[GridSpec] = None):
    """Persistence (X^_{t+k} = X^t) and climatology (X^_{t+k} = m[t+k]) forecasts.

    Returns ``{"persistence": (rmse, acc), "climatology": (rmse, acc)}``.
    """
    grid = grid or dataset.grid
    truths = truth_windows(dataset, init_times, n_steps)
    o = dataset.time_origin
    cw = climatology_windows(clim, init_times, n_steps)
    persist = np.stack([np.broadcast_to(dataset.normalized[t0 - o], truths.shape[1:])
                        for t0 in init_times])
    return {
        "persistence": (rmse(persist, truths, grid), acc(persist, truths, cw, grid)),
        "climatology": (rmse(cw, truths, grid), acc(cw, truths, cw, grid)),
    }


def evaluate_runs(name: str, forecasts, dataset: Dataset, clim: Climatology,
                  report: Optional[EvalReport] = None, with_baselines: bool = True) -> EvalReport:
    """Score forecast runs (``ForecastRun`` or ``(init_time, values[L,C,H,W])``)."""
    items = [(r.init_time, r.values) if hasattr(r, "values") and hasattr(r, "init_time") else r
             for r in forecasts]
    if not items:
        raise DataError("no forecasts to evaluate")
    inits = [int(t) for t, _ in items]
    preds = np.stack([np.asarray(v) for _, v in items])
    L = preds.shape[1]
    truths = truth_windows(dataset, inits, L)
    cw = climatology_windows(clim, inits, L)
    if report is None:
        report = EvalReport(list(dataset.variables.channel_names),
                            [HOURS_PER_STEP * (k + 1) for k in range(L)], inits)
    report.add(name, rmse(preds, truths, dataset.grid), acc(preds, truths, cw, dataset.grid))
    if with_baselines:
        for base, (r, a) in baselines(dataset, clim, inits, L).items():
            if base not in report.scores:
                report.add(base, r, a)
    return report


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else f"{x:.6g}"


CSV_HEADER = ["model", "variable", "lead_hours", "rmse", "acc"]


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for model, sc in report.scores.items():
        for c, var in enumerate(report.variables):
            for l, lead in enumerate(report.lead_hours):
                w.writerow([model, var, lead, _fmt(sc["rmse"][c, l]), _fmt(sc["acc"][c, l])])
    return buf.getvalue()


def summary_table(report: EvalReport, metric: str = "rmse") -> str:
    """Wide text table: one row per model, one column per (variable, lead)."""
    cols = [f"{v}@{h}h" for v in report.variables for h in report.lead_hours]
    width = max([12] + [len(c) + 1 for c in cols])
    name_w = max([12] + [len(m) + 1 for m in report.scores])
    lines = ["model".ljust(name_w) + "".join(c.rjust(width) for c in cols)]
    for model, sc in report.scores.items():
        vals = sc[metric].reshape(-1)
        lines.append(model.ljust(name_w) + "".join(
            (_fmt(v) or "n/a").rjust(width) for v in vals))
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, csv_path=None, summary_path=None):
    """Write the long-format CSV and the wide summary; returns both as strings."""
    text = report_csv(report)
    table = summary_table(report)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            fh.write(text)
    if summary_path is not None:
        with open(summary_path, "w") as fh:
            fh.write(table)
    return text, table


def parse_report_csv(text: str) -> list:
    """Rows of the emitted CSV with numbers parsed; missing ACC -> None."""
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({
            "model": r["model"],
            "variable": r["variable"],
            "lead_hours": int(r["lead_hours"]),
            "rmse": float(r["rmse"]) if r["rmse"] else None,
            "acc": float(r["acc"]) if r["acc"] else None,
        })
    return rows
