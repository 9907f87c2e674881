"""Parameter drift and runtime summaries for finished runs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .model import ParameterRegistry
from .selection import SelectionHistory
from .trainer import TrainLog

NORMS = ("mean_abs", "l2")


def matrix_variation(a: np.ndarray, b: np.ndarray, norm: str = "mean_abs") -> float:
    """Mean absolute elementwise difference, or the Frobenius norm with ``norm='l2'``."""
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    if norm == "mean_abs":
        return float(diff.mean())
    if norm == "l2":
        return float(np.sqrt((diff * diff).sum()))
    raise ValueError(f"norm must be one of {NORMS}")


def _check(final: ParameterRegistry, base: ParameterRegistry) -> None:
    final.check_compatible(base)


@dataclass
class VariationReport:
    norm: str
    blocks: dict[tuple[int, str], float] = field(default_factory=dict)
    by_times: dict[int, float] = field(default_factory=dict)
    bucket_sizes: dict[int, int] = field(default_factory=dict)
    fft_blocks: dict[tuple[int, str], float] | None = None

    def spearman(self) -> float:
        """Rank correlation between selected-times count and mean variation."""
        keys = sorted(self.by_times)
        if len(keys) < 2:
            raise ValueError("need at least two non-empty buckets")
        return float(spearmanr(keys, [self.by_times[k] for k in keys]).statistic)

    def write_blocks_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "category", "variation", "fft_baseline", f"norm={self.norm}"])
            for (group, cat), v in sorted(self.blocks.items()):
                fft = "" if self.fft_blocks is None else repr(self.fft_blocks[(group, cat)])
                w.writerow([group, cat, repr(v), fft, ""])

    def write_times_csv(self, path, fft_baseline: float | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["selected_times", "variation", "n_matrices", "fft_baseline", f"norm={self.norm}"])
            for k in sorted(self.by_times):
                base = "" if fft_baseline is None else repr(fft_baseline)
                w.writerow([k, repr(self.by_times[k]), self.bucket_sizes[k], base, ""])


def block_variation(theta_final: ParameterRegistry, theta_0: ParameterRegistry, norm: str = "mean_abs",
                    categories: Sequence[str] = ("SAN", "FFN")) -> dict[tuple[int, str], float]:
    """Mean per-matrix variation for each (adjacent layer pair, category)."""
    _check(theta_final, theta_0)
    layers = theta_final.layer_indices()
    if len(layers) % 2:
        raise ValueError(f"layer-pair grouping needs an even number of layers, got {len(layers)}")
    groups: dict[tuple[int, str], list[float]] = {}
    for e in theta_final:
        if e.layer is None or e.category not in categories:
            continue
        key = (layers.index(e.layer) // 2, e.category)
        groups.setdefault(key, []).append(matrix_variation(e.tensor.data, theta_0.array(e.name), norm))
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def variation_by_selected_times(theta_final: ParameterRegistry, theta_0: ParameterRegistry,
                                history: SelectionHistory, norm: str = "mean_abs",
                                categories: Sequence[str] = ("SAN", "FFN")) -> tuple[dict[int, float], dict[int, int]]:
    """Mean variation of matrices bucketed by how many rounds they were trainable.

    Returns ``(mean per count, matrices per count)``; empty buckets are omitted.
    """
    _check(theta_final, theta_0)
    if not len(history):
        raise ValueError("empty selection history")
    buckets: dict[int, list[float]] = {}
    for e in theta_final:
        if e.category not in categories:
            continue
        k = history.selected_times(e.name)
        buckets.setdefault(k, []).append(matrix_variation(e.tensor.data, theta_0.array(e.name), norm))
    means = {k: float(np.mean(v)) for k, v in sorted(buckets.items())}
    return means, {k: len(v) for k, v in sorted(buckets.items())}


def variation_report(theta_final: ParameterRegistry, theta_0: ParameterRegistry, history: SelectionHistory,
                     fft_final: ParameterRegistry | None = None, norm: str = "mean_abs") -> VariationReport:
    means, sizes = variation_by_selected_times(theta_final, theta_0, history, norm)
    fft = block_variation(fft_final, theta_0, norm) if fft_final is not None else None
    return VariationReport(norm, block_variation(theta_final, theta_0, norm), means, sizes, fft)


@dataclass(frozen=True)
class RuntimeRow:
    ratio: float
    trainable_percent: float
    wall_ms: float
    wall_percent: float


def runtime_report(runs: Sequence[tuple[float, TrainLog]]) -> list[RuntimeRow]:
    """Wall time of each ``(ratio, log)`` run as a percentage of the ratio-1.0 run."""
    fft = [log for ratio, log in runs if ratio == 1.0]
    if not fft:
        raise ValueError("runtime report needs a ratio 1.0 run as the baseline")
    steps = {log.steps for _, log in runs}
    if len(steps) != 1:
        raise ValueError(f"runs differ in step counts: {sorted(steps)}")
    base = fft[0].wall_ms
    rows = []
    for ratio, log in sorted(runs, key=lambda r: r[0]):
        frac = log.records[0]["trainable_fraction"] if log.records else ratio
        rows.append(RuntimeRow(ratio, 100.0 * frac, log.wall_ms, 100.0 * log.wall_ms / base))
    return rows


def write_runtime_csv(rows: Sequence[RuntimeRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "trainable_percent", "wall_ms", "wall_percent_of_fft"])
        for r in rows:
            w.writerow([r.ratio, f"{r.trainable_percent:.2f}", f"{r.wall_ms:.1f}", f"{r.wall_percent:.1f}"])
