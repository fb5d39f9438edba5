"""Evaluation metrics: MAE, Pearson correlation, Acc7, dual Acc2, weighted F1.

Acc7 buckets predictions by clamping to [-3, 3] and rounding half away from
zero. Acc2/F1 come in two community conventions, both always reported:
``incl_zero`` treats values >= 0 as positive over all samples
(negative vs non-negative); ``excl_zero`` drops samples whose label is
exactly zero and classifies the rest by sign (negative vs positive).

Correlation on zero-variance inputs is reported as ``None`` (undefined), not
coerced to a number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from sklearn.metrics import f1_score

CSV_COLUMNS = (
    "n_samples",
    "mae",
    "corr",
    "acc7",
    "acc2_incl_zero",
    "acc2_excl_zero",
    "f1_incl_zero",
    "f1_excl_zero",
)


@dataclass(frozen=True)
class EvalReport:
    mae: float
    corr: float | None
    acc7: float
    acc2_incl_zero: float
    acc2_excl_zero: float | None
    f1_incl_zero: float
    f1_excl_zero: float | None
    n_samples: int

    def __post_init__(self):
        assert self.mae >= 0.0
        assert self.corr is None or -1.0 - 1e-12 <= self.corr <= 1.0 + 1e-12
        for name in ("acc7", "acc2_incl_zero", "acc2_excl_zero", "f1_incl_zero", "f1_excl_zero"):
            value = getattr(self, name)
            assert value is None or 0.0 <= value <= 1.0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else (str(v) if isinstance(v, int) else f"{v:.6f}")

        return ",".join(fmt(getattr(self, c)) for c in CSV_COLUMNS)

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_COLUMNS)


def seven_class(values: np.ndarray) -> np.ndarray:
    """Clamp to [-3, 3] then round half away from zero."""
    clamped = np.clip(values, -3.0, 3.0)
    return np.copysign(np.floor(np.abs(clamped) + 0.5), clamped)


def pearson(preds: np.ndarray, labels: np.ndarray) -> float | None:
    vp = preds - preds.mean()
    vy = labels - labels.mean()
    denom = np.sqrt((vp * vp).sum()) * np.sqrt((vy * vy).sum())
    if denom == 0.0:
        return None
    return float((vp * vy).sum() / denom)


def evaluate(preds, labels) -> EvalReport:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"preds and labels must be 1-D and equal length, got {preds.shape} vs {labels.shape}")
    n = preds.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    if not (np.isfinite(preds).all() and np.isfinite(labels).all()):
        raise ValueError("non-finite prediction or label")

    mae = float(np.abs(preds - labels).mean())
    corr = pearson(preds, labels)
    acc7 = float((seven_class(preds) == seven_class(labels)).mean())

    pos_p_incl = preds >= 0.0
    pos_y_incl = labels >= 0.0
    acc2_incl = float((pos_p_incl == pos_y_incl).mean())
    f1_incl = float(f1_score(pos_y_incl, pos_p_incl, average="weighted", zero_division=0))

    keep = labels != 0.0
    if keep.any():
        pos_p_excl = preds[keep] > 0.0
        pos_y_excl = labels[keep] > 0.0
        acc2_excl = float((pos_p_excl == pos_y_excl).mean())
        f1_excl = float(f1_score(pos_y_excl, pos_p_excl, average="weighted", zero_division=0))
    else:
        acc2_excl = None
        f1_excl = None

    return EvalReport(
        mae=mae,
        corr=corr,
        acc7=acc7,
        acc2_incl_zero=acc2_incl,
        acc2_excl_zero=acc2_excl,
        f1_incl_zero=f1_incl,
        f1_excl_zero=f1_excl,
        n_samples=n,
    )


def bootstrap_summary(reports: list[EvalReport]) -> dict[str, dict[str, float | None]]:
    """Mean and population std per metric across runs; undefined propagates."""
    if not reports:
        raise ValueError("no reports to summarize")
    summary: dict[str, dict[str, float | None]] = {}
    for name in CSV_COLUMNS:
        if name == "n_samples":
            continue
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            summary[name] = {"mean": None, "std": None}
        else:
            arr = np.asarray(values, dtype=np.float64)
            summary[name] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return summary
