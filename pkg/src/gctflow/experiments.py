"""Ablation and input-sensitivity experiments over seeds.

Every cell (variant, seed) trains an :class:`MFGMRegressor` on the same
chronological split and is scored on the test windows.  A cell whose training
diverges is recorded as failed; the remaining cells still run.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import FlowDataset, SampleSet, make_samples
from .errors import ConfigError, TrainError
from .estimators import MFGMRegressor, baseline_predict
from .graphs import SegmentGraph
from .trainer import EvalReport, evaluate, write_report_csv

log = logging.getLogger(__name__)

ABLATION_VARIANTS = {"full": (), "w/o M": ("M",), "w/o S": ("S",), "w/o T": ("T",)}
INPUT_VARIANTS = {"V": "v", "V+(V-P)": "vp", "V+(V-S)": "vs", "V+both": "all"}
SUITES = ("ablation", "sensitivity")


@dataclass
class ExperimentData:
    train: SampleSet
    val: SampleSet
    test: SampleSet
    graph: SegmentGraph

    @classmethod
    def from_flows(cls, dataset: FlowDataset, graph: SegmentGraph, t_in: int = 12,
                   t_out: int = 12) -> "ExperimentData":
        if graph.n_nodes != dataset.n_segments:
            raise ConfigError(f"graph has {graph.n_nodes} nodes, flows have {dataset.n_segments} segments")
        return cls(*make_samples(dataset, t_in, t_out), graph)


@dataclass
class Cell:
    variant: str
    seed: int
    report: EvalReport | None = None
    error: str | None = None
    seconds: float = 0.0
    best_epoch: int = 0

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class ExperimentReport:
    suite: str
    variants: list
    cells: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        """Long form: one row per (variant, seed, horizon)."""
        out = []
        for c in self.cells:
            if c.ok:
                out.extend(c.report.rows(c.variant, c.seed))
        return out

    def _ok(self, variant: str) -> list[Cell]:
        return [c for c in self.cells if c.variant == variant and c.ok]

    def summary(self) -> list[dict]:
        """One row per variant: mean and std over seeds of the step-averaged metrics."""
        out = []
        for v in self.variants:
            cells = self._ok(v)
            row = {"variant": v, "n_seeds": len(cells),
                   "failed": sum(1 for c in self.cells if c.variant == v and not c.ok)}
            for m in ("mae", "rmse", "mape"):
                vals = np.array([getattr(c.report.overall, m) for c in cells])
                row[f"{m}_mean"] = float(vals.mean()) if len(vals) else float("nan")
                row[f"{m}_std"] = float(vals.std()) if len(vals) else float("nan")
            out.append(row)
        return out

    def mean_mae(self, variant: str) -> float:
        cells = self._ok(variant)
        return float(np.mean([c.report.overall.mae for c in cells])) if cells else float("nan")

    def step_curve(self) -> list[dict]:
        """Seed-averaged MAE at every prediction step, one row per (variant, step)."""
        out = []
        for v in self.variants:
            cells = self._ok(v)
            if not cells:
                continue
            for i in range(len(cells[0].report.per_step)):
                out.append({"variant": v, "step": i + 1,
                            "mae": float(np.mean([c.report.per_step[i].mae for c in cells]))})
        return out

    def write(self, out_dir) -> dict:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / f"{self.suite}.csv", "summary": out / f"{self.suite}_summary.csv"}
        write_report_csv(paths["report"], self.rows())
        _write_rows(paths["summary"], self.summary())
        if self.suite == "sensitivity":
            paths["curve"] = out / "sensitivity_curve.csv"
            _write_rows(paths["curve"], self.step_curve())
        return paths


def _write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["variant"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def n_workers(requested: int | None = None) -> int:
    """Worker count, capped by the GCT_THREADS environment variable (default 1)."""
    cap = int(os.environ.get("GCT_THREADS", "1") or 1)
    n = cap if requested is None else min(requested, cap)
    return max(n, 1)


def _run_cell(data: ExperimentData, variant: str, seed: int, model_params: dict,
              horizons: Sequence[int]) -> Cell:
    try:
        est = MFGMRegressor(graph=data.graph, random_state=seed, **model_params)
        est.fit(data.train.inputs, data.train.targets, eval_set=(data.val.inputs, data.val.targets))
        report = evaluate(est.predict(data.test.inputs), data.test.targets, horizons)
        return Cell(variant, seed, report, seconds=est.train_seconds_, best_epoch=est.best_epoch_)
    except TrainError as exc:
        log.warning("cell %s seed %d failed: %s", variant, seed, exc)
        return Cell(variant, seed, error=str(exc))


def run_experiments(suite: str, data: ExperimentData, seeds: Sequence[int] = (0, 1, 2),
                    model_params: dict | None = None, horizons: Sequence[int] = (3, 6, 9, 12),
                    n_jobs: int | None = None) -> ExperimentReport:
    """Train every (variant, seed) cell of ``suite`` and score it on the test windows.

    ``model_params`` are passed to :class:`MFGMRegressor` (for example
    ``max_epochs`` or ``learning_rate``) and shared by every cell.
    """
    if suite == "ablation":
        variants = {k: {"ablation": v} for k, v in ABLATION_VARIANTS.items()}
    elif suite == "sensitivity":
        variants = {k: {"inputs": v} for k, v in INPUT_VARIANTS.items()}
    else:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {SUITES}")
    if not seeds:
        raise ConfigError("at least one seed is required")
    params = dict(model_params or {})
    jobs = [(name, seed, {**params, **extra}) for name, extra in variants.items() for seed in seeds]
    workers = n_workers(n_jobs)
    if workers > 1:
        from joblib import Parallel, delayed

        cells = Parallel(n_jobs=workers)(delayed(_run_cell)(data, v, s, p, horizons) for v, s, p in jobs)
    else:
        cells = [_run_cell(data, v, s, p, horizons) for v, s, p in jobs]
    return ExperimentReport(suite, list(variants), list(cells))


def baseline_reports(data: ExperimentData, kinds: Sequence[str] = ("naive", "historical_average"),
                     horizons: Sequence[int] = (3, 6, 9, 12)) -> dict[str, EvalReport]:
    return {k: evaluate(baseline_predict(k, data.train, data.test, data.val), data.test.targets, horizons)
            for k in kinds}
