"""Skill metrics for depth predictions and the tabular report."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

METRIC_COLUMNS = ("rmse", "nrmse", "bias", "nbias", "mape", "rho", "nse", "kge")
COLUMN_TITLES = {
    "rmse": "RMSE[m]",
    "nrmse": "NRMSE",
    "bias": "BIAS[m]",
    "nbias": "NBIAS",
    "mape": "MAPE",
    "rho": "rho",
    "nse": "NSE",
    "kge": "KGE",
}
UNDEFINED = "undefined"


@dataclass
class EvaluationReport:
    """Metrics of one sensor/model pair on one split.

    ``rho``, ``kge``, ``alpha`` are ``None`` when a standard deviation is
    zero; their names are then listed in ``undefined``.
    """

    sensor_id: str
    model_kind: str
    split: str
    n: int
    rmse: float
    nrmse: float
    bias: float
    nbias: float
    mape: float
    rho: float | None
    nse: float
    kge: float | None
    alpha: float | None
    beta: float
    undefined: tuple = ()

    def to_row(self) -> dict:
        row = asdict(self)
        row["undefined"] = ";".join(self.undefined)
        return row


def _training_stats(train_stats):
    if isinstance(train_stats, dict):
        return train_stats["target_mean"], train_stats["target_min"], train_stats["target_max"]
    return train_stats.target_mean, train_stats.target_min, train_stats.target_max


def compute_metrics(y_hat, y, train_stats, sensor_id="", model_kind="", split="test") -> EvaluationReport:
    """Evaluate predictions ``y_hat`` against observations ``y`` (meters).

    NRMSE and NBIAS divide by the training range, NSE compares against the
    training mean. Pearson correlation and the KGE ratios use population
    moments of the evaluated vectors.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape or y.ndim != 1:
        raise ValueError(f"shape mismatch: {y_hat.shape} vs {y.shape}")
    if len(y) < 2:
        raise ValueError("need at least two points")
    if np.any(y == 0):
        raise ValueError("MAPE is undefined for zero observations")
    y_bar, y_min, y_max = _training_stats(train_stats)
    span = y_max - y_min

    err = y_hat - y
    rmse = math.sqrt(np.mean(err**2))
    bias = float(np.mean(err))
    mape = float(np.mean(np.abs(err) / y))
    nse = 1.0 - float(np.sum(err**2) / np.sum((y - y_bar) ** 2))

    mu_hat, mu = y_hat.mean(), y.mean()
    sd_hat, sd = y_hat.std(), y.std()
    beta = float(mu_hat / mu)
    undefined = []
    if sd_hat == 0 or sd == 0:
        rho = kge = None
        alpha = None if sd == 0 else float(sd_hat / sd)
        undefined = ["rho", "kge"] + (["alpha"] if alpha is None else [])
    else:
        rho = float(np.mean((y_hat - mu_hat) * (y - mu)) / (sd_hat * sd))
        rho = min(1.0, max(-1.0, rho))
        alpha = float(sd_hat / sd)
        kge = 1.0 - math.sqrt((rho - 1) ** 2 + (alpha - 1) ** 2 + (beta - 1) ** 2)
    return EvaluationReport(
        sensor_id, model_kind, split, len(y), rmse, rmse / span, bias, bias / span, mape,
        rho, nse, kge, alpha, beta, tuple(undefined),
    )


def format_value(v) -> str:
    """Two decimals; nonzero magnitudes that would round to zero print as ``<0.01``."""
    if v is None:
        return "n/a"
    if v != 0 and abs(v) < 0.005:
        return "<0.01"
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _summary(reports, col):
    vals = [getattr(r, col) for r in reports if getattr(r, col) is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def render_report_table(reports) -> str:
    """Plain-text table, one row per report.

    With two or more sensors for a model, a mean row and a row of
    population standard deviations in parentheses follow.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to render")
    head = ["Sensor", "Model"] + [COLUMN_TITLES[c] for c in METRIC_COLUMNS]
    rows = [[r.sensor_id, r.model_kind] + [format_value(getattr(r, c)) for c in METRIC_COLUMNS] for r in reports]

    kinds = list(dict.fromkeys(r.model_kind for r in reports))
    summary = []
    for kind in kinds:
        group = [r for r in reports if r.model_kind == kind]
        if len({r.sensor_id for r in group}) < 2:
            continue
        stats = [_summary(group, c) for c in METRIC_COLUMNS]
        summary.append(["Mean", kind] + [format_value(m) for m, _ in stats])
        summary.append(["(sigma)", ""] + ["n/a" if s is None else f"({format_value(s)})" for _, s in stats])

    widths = [max(len(str(x[i])) for x in [head] + rows + summary) for i in range(len(head))]

    def line(cells):
        return "  ".join(str(c).ljust(w) if i < 2 else str(c).rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    rule = "-" * len(line(head))
    out = [line(head), rule] + [line(r) for r in rows]
    if summary:
        out += [rule] + [line(r) for r in summary]
    return "\n".join(out) + "\n"


def write_report_csv(reports, path) -> None:
    names = [f.name for f in fields(EvaluationReport)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow({k: ("" if v is None else v) for k, v in r.to_row().items()})
