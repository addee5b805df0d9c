"""Evaluation protocol: accuracy with/without +-1 frame tolerance over
repeated trials with fresh random offsets, and relative error reduction
(RER) against the baseline."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .exceptions import ConfigError, DimensionError, EmptyInputError
from .synthdata import GenConfig, generate_dataset
from .utils import derive_seed

logger = logging.getLogger(__name__)

BASELINE = "baseline"
REPORT_COLUMNS = ["method", "frames", "tolerance", "mean", "std", "rer"]


def accuracy(preds, truths, tolerance: int = 0) -> float:
    """Percentage of predictions within ``tolerance`` frames of the truth."""
    preds = np.asarray([getattr(p, "offset", p) for p in preds], dtype=np.int64)
    truths = np.asarray([getattr(t, "offset", t) for t in truths], dtype=np.int64)
    if preds.size == 0 or truths.size == 0:
        raise EmptyInputError("accuracy of an empty prediction list")
    if preds.shape != truths.shape:
        raise DimensionError(f"{preds.size} predictions vs {truths.size} truths")
    if tolerance not in (0, 1):
        raise ValueError("tolerance must be 0 or 1")
    return 100.0 * float(np.mean(np.abs(preds - truths) <= tolerance))


def rer(baseline_acc: float, method_acc: float) -> float:
    """Relative error reduction (percent) of a method over the baseline."""
    if baseline_acc >= 100.0:
        raise ZeroDivisionError("RER is undefined when the baseline makes no errors")
    base_err = 100.0 - baseline_acc
    return 100.0 * (base_err - (100.0 - method_acc)) / base_err


@dataclass
class Cell:
    method: str
    frames: int
    tolerance: int
    trials: List[float]
    rer: Optional[float] = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.trials))

    @property
    def std(self) -> float:
        return float(np.std(self.trials))


@dataclass
class EvalReport:
    cells: List[Cell] = field(default_factory=list)

    def cell(self, method: str, frames: int, tolerance: int) -> Cell:
        for c in self.cells:
            if (c.method, c.frames, c.tolerance) == (method, frames, tolerance):
                return c
        raise KeyError((method, frames, tolerance))

    @property
    def methods(self) -> List[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    @property
    def frames(self) -> List[int]:
        return list(dict.fromkeys(c.frames for c in self.cells))

    @property
    def trial_count(self) -> int:
        return len(self.cells[0].trials) if self.cells else 0

    def fill_rer(self, baseline: str = BASELINE) -> None:
        for c in self.cells:
            if c.method == baseline:
                c.rer = None
                continue
            try:
                base = self.cell(baseline, c.frames, c.tolerance)
            except KeyError:
                continue
            try:
                c.rer = rer(base.mean, c.mean)
            except ZeroDivisionError:
                c.rer = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for c in self.cells:
            writer.writerow([c.method, c.frames, c.tolerance, f"{c.mean:.2f}", f"{c.std:.2f}",
                             "" if c.rer is None else f"{c.rer:.2f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        """Two aligned tables (without / with tolerance) in the familiar
        method x frames layout; RER in brackets."""
        lines = []
        for tol in (0, 1):
            lines.append(f"Accuracy (%) {'with' if tol else 'without'} +-1 frame tolerance")
            header = ["# frames"] + [str(f) for f in self.frames]
            rows = [header]
            for m in self.methods:
                row = [m]
                for f in self.frames:
                    try:
                        c = self.cell(m, f, tol)
                    except KeyError:
                        row.append("-")
                        continue
                    text = f"{c.mean:.2f} +-{c.std:.2f}"
                    if c.rer is not None:
                        text += f" ({c.rer:.2f})"
                    row.append(text)
                rows.append(row)
            widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
            for r in rows:
                lines.append("  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip())
            lines.append("")
        return "\n".join(lines)

    def save(self, prefix: Union[str, Path]) -> None:
        prefix = Path(prefix)
        prefix.with_suffix(".csv").write_text(self.to_csv())
        prefix.with_suffix(".txt").write_text(self.to_text())


def run_benchmark(
    models: Mapping[str, Mapping[int, object]],
    cfg: GenConfig,
    frames: Sequence[int] = (11, 13, 15, 20),
    trials: int = 10,
    clips_per_trial: int = 1000,
    seed: int = 0,
    baseline: str = BASELINE,
    workers: int = 1,
) -> EvalReport:
    """Evaluate every method at every clip length.

    ``models[method][frames]`` must expose ``predict(ClipSet) -> offsets``.
    Trial ``t`` at length ``f`` draws fresh offsets and noise from the
    sub-seed ``(seed, "eval", f, t)``; all methods see the same clips.
    Trials run on up to ``workers`` threads; results are collected in a
    fixed order, so the report does not depend on scheduling.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    for method, per_len in models.items():
        missing = [f for f in frames if f not in per_len]
        if missing:
            raise ConfigError(f"method {method!r} has no model for frames {missing}")

    def trial(job):
        f, t = job
        clips = generate_dataset(cfg.replace(frames=f), clips_per_trial, derive_seed(seed, "eval", f, t),
                                 balanced=False)
        out = {}
        for method, per_len in models.items():
            preds = per_len[f].predict(clips)
            for tol in (0, 1):
                out[(method, f, tol)] = accuracy(preds, clips.offsets, tol)
        logger.info("eval frames=%d trial=%d done", f, t)
        return out

    jobs = [(f, t) for f in frames for t in range(trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(trial, jobs))
    else:
        outcomes = [trial(job) for job in jobs]
    results: Dict[tuple, List[float]] = {}
    for out in outcomes:
        for key, acc in out.items():
            results.setdefault(key, []).append(acc)
    report = EvalReport()
    for method in models:
        for f in frames:
            for tol in (0, 1):
                report.cells.append(Cell(method, f, tol, results[(method, f, tol)]))
    report.fill_rer(baseline)
    return report
