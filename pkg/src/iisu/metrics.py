"""Abundance and reflectance errors, reconstruction error and comparison tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import AbundanceMap, DataError, SpectralCube

__all__ = [
    "EvaluationReport",
    "ComparisonTable",
    "rmse_a",
    "rmse_r",
    "nre",
    "classify",
    "evaluate",
    "compare_methods",
]


def _fractions(a) -> np.ndarray:
    return a.fractions if isinstance(a, AbundanceMap) else np.asarray(a, dtype=np.float64)


def _values(cube) -> np.ndarray:
    return cube.values if isinstance(cube, SpectralCube) else np.asarray(cube, dtype=np.float64)


def _rms(diff: np.ndarray) -> float:
    return math.sqrt(float(np.mean(diff * diff)))


def rmse_a(truth, est) -> float:
    """Root mean square abundance error over all classes and pixels."""
    t, e = _fractions(truth), _fractions(est)
    if t.shape != e.shape:
        raise DataError(f"abundance shapes differ: {t.shape} vs {e.shape}")
    return _rms(t - e)


def rmse_r(truth, est) -> float:
    """Root mean square reflectance error over all bands and pixels."""
    t, e = _values(truth), _values(est)
    if t.shape != e.shape:
        raise DataError(f"cube shapes differ: {t.shape} vs {e.shape}")
    return _rms(t - e)


def nre(observed, reconstructed) -> float:
    """RMS reconstruction error divided by the value range of the observed cube."""
    x, xh = _values(observed), _values(reconstructed)
    if x.shape != xh.shape:
        raise DataError(f"cube shapes differ: {x.shape} vs {xh.shape}")
    span = float(x.max() - x.min())
    if not span > 0:
        raise DataError("observed cube is constant; its range cannot normalize the error")
    return _rms(x - xh) / span


def classify(est) -> np.ndarray:
    """Per-pixel index of the largest abundance; ties go to the lower class index."""
    a = _fractions(est)
    if a.ndim != 2 or a.shape[0] < 1:
        raise DataError("abundances must be classes x pixels with at least one class")
    # np.argmax returns the first maximum
    return np.argmax(a, axis=0)


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    method: str
    rmse_a: float
    rmse_r: float
    nre: float
    class_names: tuple[str, ...]
    rmse_a_per_class: dict[str, float]
    classification: np.ndarray | None = None
    accuracy: float | None = None
    accuracy_shaded: float | None = None

    def __post_init__(self):
        for name in ("rmse_a", "rmse_r", "nre"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise DataError(f"{name} must be finite and nonnegative, got {val}")

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "rmse_a": self.rmse_a,
            "rmse_r": self.rmse_r,
            "nre": self.nre,
            "rmse_a_per_class": dict(self.rmse_a_per_class),
        }
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        if self.accuracy_shaded is not None:
            out["accuracy_shaded"] = self.accuracy_shaded
        return out


def evaluate(method: str, truth: AbundanceMap, est: AbundanceMap, truth_reflectance, est_reflectance,
             observed, reconstructed, shaded=None) -> EvaluationReport:
    """Score one method against ground truth.

    ``observed``/``reconstructed`` are the data the method fitted and its
    model reconstruction (radiance for IISU, apparent reflectance for the
    baselines). ``shaded`` is an optional boolean pixel mask for the
    accuracy restricted to shadow.
    """
    t, e = _fractions(truth), _fractions(est)
    if t.shape != e.shape:
        raise DataError(f"abundance shapes differ: {t.shape} vs {e.shape}")
    names = tuple(truth.class_names) if isinstance(truth, AbundanceMap) else tuple(f"class{k}" for k in range(t.shape[0]))
    per_class = {n: _rms(t[k] - e[k]) for k, n in enumerate(names)}
    labels_true = classify(t)
    labels_est = classify(e)
    hit = labels_true == labels_est
    acc_shaded = None
    if shaded is not None:
        mask = np.asarray(shaded, dtype=bool).reshape(-1)
        if mask.size != hit.size:
            raise DataError("shadow mask size does not match the pixel count")
        acc_shaded = float(np.mean(hit[mask])) if mask.any() else None
    return EvaluationReport(
        method=method,
        rmse_a=rmse_a(t, e),
        rmse_r=rmse_r(truth_reflectance, est_reflectance),
        nre=nre(observed, reconstructed),
        class_names=names,
        rmse_a_per_class=per_class,
        classification=labels_est,
        accuracy=float(np.mean(hit)),
        accuracy_shaded=acc_shaded,
    )


COLUMNS = ("rmse_a", "rmse_r", "nre")


@dataclass(frozen=True)
class ComparisonTable:
    """One row per method in the order given, columns RMSE_a, RMSE_r, NRE."""

    reports: tuple[EvaluationReport, ...] = field(default_factory=tuple)

    @property
    def methods(self) -> list[str]:
        return [r.method for r in self.reports]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.reports])

    def best(self, name: str) -> str:
        """Method with the smallest value in a column (first on ties)."""
        return self.reports[int(np.argmin(self.column(name)))].method

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", *COLUMNS])
        for r in self.reports:
            writer.writerow([r.method, *(repr(getattr(r, c)) for c in COLUMNS)])
        return buf.getvalue()

    def to_text(self) -> str:
        header = ["method", "RMSE_a", "RMSE_r", "NRE"]
        rows = [[r.method, *(f"{getattr(r, c):.6e}" for c in COLUMNS)] for r in self.reports]
        widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
                 for row in [header, *rows]]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.reports], indent=2)


def compare_methods(reports) -> ComparisonTable:
    reports = tuple(reports)
    if not reports:
        raise DataError("need at least one method to compare")
    names = {r.class_names for r in reports}
    if len(names) > 1:
        raise DataError("reports were computed over different class sets")
    return ComparisonTable(reports)
