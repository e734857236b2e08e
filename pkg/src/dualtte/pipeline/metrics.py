"""RMSE / MAE / MAPE with a mergeable accumulator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

TASKS = ("path", "link", "intersection")


@dataclass
class ErrorStats:
    """Running sums for one task; merging two shards adds the sums."""

    n: int = 0
    abs_sum: float = 0.0
    sq_sum: float = 0.0
    ape_sum: float = 0.0
    ape_n: int = 0
    ape_excluded: int = 0

    def add(self, pred, truth) -> None:
        pred = np.asarray(pred, dtype=np.float64).ravel()
        truth = np.asarray(truth, dtype=np.float64).ravel()
        if pred.shape != truth.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
        keep = ~np.isnan(truth)
        pred, truth = pred[keep], truth[keep]
        err = pred - truth
        self.n += err.size
        self.abs_sum += float(np.abs(err).sum())
        self.sq_sum += float((err * err).sum())
        ok = truth != 0
        self.ape_sum += float((np.abs(err[ok]) / np.abs(truth[ok])).sum())
        self.ape_n += int(ok.sum())
        self.ape_excluded += int((~ok).sum())

    def merge(self, other: "ErrorStats") -> "ErrorStats":
        return ErrorStats(self.n + other.n, self.abs_sum + other.abs_sum, self.sq_sum + other.sq_sum,
                          self.ape_sum + other.ape_sum, self.ape_n + other.ape_n,
                          self.ape_excluded + other.ape_excluded)

    @property
    def rmse(self) -> float:
        return math.sqrt(self.sq_sum / self.n) if self.n else float("nan")

    @property
    def mae(self) -> float:
        return self.abs_sum / self.n if self.n else float("nan")

    @property
    def mape(self) -> float:
        return self.ape_sum / self.ape_n if self.ape_n else float("nan")

    def summary(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "mape": self.mape, "count": self.n,
                "mape_excluded": self.ape_excluded}


@dataclass
class MetricsReport:
    tasks: dict[str, ErrorStats] = field(default_factory=lambda: {t: ErrorStats() for t in TASKS})

    @property
    def rmse(self) -> float:
        return self.tasks["path"].rmse

    @property
    def mae(self) -> float:
        return self.tasks["path"].mae

    @property
    def mape(self) -> float:
        return self.tasks["path"].mape

    @property
    def count(self) -> int:
        return self.tasks["path"].n

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport({t: self.tasks[t].merge(other.tasks[t]) for t in TASKS})

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "mape": self.mape, "count": self.count,
                "tasks": {t: s.summary() for t, s in self.tasks.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def to_table(self) -> str:
        rows = [("task", "count", "rmse_s", "mae_s", "mape", "excluded")]
        for t, s in self.tasks.items():
            rows.append((t, str(s.n), f"{s.rmse:.4f}", f"{s.mae:.4f}", f"{s.mape:.6f}", str(s.ape_excluded)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
                         for r in rows)


def path_metrics(pred, truth) -> MetricsReport:
    rep = MetricsReport()
    rep.tasks["path"].add(pred, truth)
    return rep
