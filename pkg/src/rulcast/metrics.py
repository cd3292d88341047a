"""Quantitative evaluation of RUL trajectories.

MAE, RMSE and MAPE are the regression metrics; the asymmetric exponential
score penalises over-prediction (predicting more life than remains) more
per unit than under-prediction. MAPE deliberately divides by the absolute
*predicted* value; ``mape_denominator="actual"`` switches to the usual
convention for comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    mape: float
    score: float
    sample_count: int

    def as_dict(self) -> dict[str, float]:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "mape": self.mape,
            "score": self.score,
            "sample_count": self.sample_count,
        }


def _paired(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.size != a.size:
        raise DataError(f"length mismatch: {p.size} predictions vs {a.size} actuals")
    if p.size == 0:
        raise DataError("cannot evaluate empty series")
    return p, a


def phm_score(pred, actual) -> float:
    """Asymmetric exponential score; 0 iff every prediction is exact.

    Error d = predicted - actual contributes exp(-d/13)-1 when d < 0 and
    exp(d/10)-1 when d >= 0, so positive errors of a given magnitude cost
    more than negative ones.
    """
    p, a = _paired(pred, actual)
    d = p - a
    terms = np.where(d < 0, np.expm1(-d / 13.0), np.expm1(d / 10.0))
    return float(np.sum(terms))


def evaluate(pred, actual, mape_denominator: str = "predicted") -> MetricsReport:
    """Compute MAE, RMSE, MAPE (percent) and the asymmetric score."""
    if mape_denominator not in ("predicted", "actual"):
        raise DataError(f"unknown MAPE denominator {mape_denominator!r}")
    p, a = _paired(pred, actual)
    err = p - a
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err**2)))

    denom = np.abs(p) if mape_denominator == "predicted" else np.abs(a)
    zero_idx = np.nonzero(denom == 0.0)[0]
    if zero_idx.size:
        which = "predicted" if mape_denominator == "predicted" else "actual"
        shown = ", ".join(str(i) for i in zero_idx[:10])
        raise DataError(
            f"MAPE undefined: zero {which} value at index(es) {shown}"
            + ("..." if zero_idx.size > 10 else "")
        )
    mape = float(100.0 * np.mean(np.abs(err) / denom))
    return MetricsReport(
        mae=mae,
        rmse=rmse,
        mape=mape,
        score=phm_score(p, a),
        sample_count=int(p.size),
    )


def write_report(path, report: MetricsReport, header: dict[str, str] | None = None) -> None:
    """Emit both a human-readable block and machine-readable key=value lines."""
    lines = []
    for key, value in (header or {}).items():
        lines.append(f"# {key}={value}")
    for key, value in report.as_dict().items():
        lines.append(f"{key}={value!r}" if isinstance(value, str) else f"{key}={value:.12g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
