"""Sequential multi-task training and the OP/BWT score matrix."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Model, ParameterRegistry
from .selection import SelectionHistory, full_plan, make_plan
from .tasks import TaskSpec, eval_exact_match
from .trainer import Optimizer, OptimizerConfig, TrainLog, train_round

# per-task epochs, in task order
DEFAULT_EPOCHS = (5, 3, 7, 5, 3, 5, 5, 7)


class MatrixError(ValueError):
    pass


class RunAborted(RuntimeError):
    """Evaluation failed mid-run; ``matrix`` holds every row filled so far."""

    def __init__(self, message: str, matrix: "EvalMatrix"):
        super().__init__(message)
        self.matrix = matrix


class EvalMatrix:
    """Lower-triangular scores ``S[t, i]`` (1-based, ``i <= t``) in percent."""

    def __init__(self, task_names: Sequence[str]):
        self.task_names = list(task_names)
        n = len(self.task_names)
        self._s = np.full((n, n), np.nan)

    @property
    def T(self) -> int:
        return len(self.task_names)

    def set(self, t: int, i: int, score: float) -> None:
        if not 1 <= i <= t <= self.T:
            raise MatrixError(f"entry ({t}, {i}) is outside the lower triangle of a {self.T}-task matrix")
        if not 0.0 <= score <= 100.0:
            raise MatrixError(f"score {score} outside [0, 100]")
        self._s[t - 1, i - 1] = score

    def get(self, t: int, i: int) -> float:
        return float(self._s[t - 1, i - 1])

    def row(self, t: int) -> list[float]:
        if not 1 <= t <= self.T:
            raise MatrixError(f"round {t} out of range")
        vals = self._s[t - 1, :t]
        if np.isnan(vals).any():
            raise MatrixError(f"row {t} is incomplete")
        return [float(v) for v in vals]

    def row_complete(self, t: int) -> bool:
        return not np.isnan(self._s[t - 1, :t]).any()

    @property
    def rounds_complete(self) -> int:
        t = 0
        while t < self.T and self.row_complete(t + 1):
            t += 1
        return t

    def filled(self) -> int:
        return int((~np.isnan(self._s)).sum())

    def metrics(self) -> dict:
        done = self.rounds_complete
        return {"op": [op_score(self, t) for t in range(1, done + 1)],
                "bwt": [bwt_score(self, t) if t >= 2 else None for t in range(1, done + 1)]}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", *self.task_names])
            for t in range(1, self.T + 1):
                cells = ["" if math.isnan(v) else repr(float(v)) for v in self._s[t - 1]]
                w.writerow([t, *cells])

    @classmethod
    def from_csv(cls, path) -> "EvalMatrix":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
        if not rows or rows[0][0].strip().lower() != "round":
            raise MatrixError("CSV must start with a header row beginning with 'round'")
        names = [c.strip() for c in rows[0][1:]]
        if not names:
            raise MatrixError("CSV has no task columns")
        m = cls(names)
        for r in rows[1:]:
            try:
                t = int(r[0])
            except ValueError:
                raise MatrixError(f"bad round label {r[0]!r}") from None
            if len(r) - 1 > len(names):
                raise MatrixError(f"row {t} has more cells than task columns")
            for i, cell in enumerate(r[1:], start=1):
                cell = cell.strip()
                if not cell:
                    continue
                try:
                    m.set(t, i, float(cell))
                except ValueError as exc:
                    raise MatrixError(f"row {t}, column {i}: {exc}") from None
        return m

    def write_metrics(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.metrics(), fh, indent=2)


def op_score(matrix: EvalMatrix, t: int) -> float:
    """Mean of row ``t``."""
    row = matrix.row(t)
    return sum(row) / t


def bwt_score(matrix: EvalMatrix, t: int) -> float:
    """``(1/t) * sum_{i<t} (S[t,i] - S[i,i])``.

    The normalisation is by ``t`` although only ``t - 1`` terms are summed.
    """
    if t < 2:
        raise MatrixError("backward transfer needs at least two rounds")
    row = matrix.row(t)
    return sum(row[i - 1] - matrix.row(i)[i - 1] for i in range(1, t)) / t


def replay_mix(current: Sequence, history: Sequence[Sequence], fraction: float, seed: int) -> list:
    """Current data plus ``ceil(fraction * |D_i|)`` examples from each prior task, shuffled."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"replay fraction must lie in [0, 1], got {fraction}")
    rng = np.random.default_rng([seed, len(history)])
    mixed = list(current)
    for past in history:
        k = math.ceil(fraction * len(past))
        if k:
            idx = rng.choice(len(past), size=k, replace=False)
            mixed.extend(past[i] for i in sorted(idx))
    order = rng.permutation(len(mixed))
    return [mixed[i] for i in order]


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "seqft"
    masking: str = "fft"
    freeze_io: bool = False
    ratio: float | None = None
    replay_fraction: float = 0.10
    selection_seed: int = 0
    data_seed: int = 0
    epochs: tuple[int, ...] = DEFAULT_EPOCHS
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.strategy not in ("seqft", "replay"):
            raise ValueError(f"strategy must be seqft or replay, got {self.strategy!r}")
        if self.masking not in ("fft", "category", "layer", "model", "ratio"):
            raise ValueError(f"unknown masking {self.masking!r}")
        if self.masking == "ratio" and self.ratio is None:
            raise ValueError("ratio masking needs a ratio")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ValueError("replay_fraction must lie in [0, 1]")


@dataclass
class RunResult:
    matrix: EvalMatrix
    history: SelectionHistory
    snapshots: list[ParameterRegistry]
    logs: list[TrainLog]


def round_plan(run: RunConfig, registry: ParameterRegistry, t: int):
    if run.masking == "fft":
        return full_plan(registry, t, run.selection_seed, run.freeze_io)
    return make_plan(run.masking, registry, t, run.selection_seed, run.freeze_io, run.ratio)


def pretrain(model: Model, tasks: Sequence[TaskSpec], opt_config: OptimizerConfig, *, seed: int = 0):
    """Joint multi-task training on the union of ``tasks``' train splits, every parameter trainable.

    Produces a base model that already follows the task markers, the
    starting point that sequential fine-tuning then erodes.
    """
    data = [ex for task in tasks for ex in task.train]
    return train_round(model, full_plan(model.registry), data, opt_config, seed=seed)


def run_sequence(model: Model, tasks: Sequence[TaskSpec], run: RunConfig, *,
                 on_round=None) -> RunResult:
    """Train on ``tasks`` in order, evaluating tasks ``1..t`` after round ``t``.

    ``model`` is updated in place. ``on_round(t, model, plan, log)`` is called
    after each round's evaluation (for checkpointing).
    """
    if not tasks:
        raise ValueError("need at least one task")
    vocab = model.config.vocab_size
    for task in tasks:
        top = max(max(ex.prompt + ex.completion) for ex in task.train + task.eval)
        if top >= vocab:
            raise ValueError(f"task {task.name} uses token {top} beyond vocab_size={vocab}")
    epochs = list(run.epochs) + [run.epochs[-1]] * max(0, len(tasks) - len(run.epochs))

    matrix = EvalMatrix([t.name for t in tasks])
    history = SelectionHistory()
    snapshots, logs = [], []
    optimizer = None
    for t, task in enumerate(tasks, start=1):
        plan = round_plan(run, model.registry, t)
        history.append(plan)
        data = task.train
        if run.strategy == "replay" and t > 1:
            data = replay_mix(task.train, [p.train for p in tasks[:t - 1]], run.replay_fraction,
                              run.data_seed * 1000 + t)
        cfg = _with_epochs(run.opt, epochs[t - 1])
        if optimizer is None:
            optimizer = Optimizer(cfg, 1)
        optimizer.config = cfg
        _, log = train_round(model, plan, data, cfg, seed=run.data_seed * 1000 + t, optimizer=optimizer)
        logs.append(log)
        for i in range(1, t + 1):
            try:
                score = eval_exact_match(model, tasks[i - 1])
            except Exception as exc:
                raise RunAborted(f"evaluation of {tasks[i - 1].name} after round {t} failed: {exc}",
                                 matrix) from exc
            matrix.set(t, i, score)
        snapshots.append(model.registry.copy())
        if on_round is not None:
            on_round(t, model, plan, log)
    return RunResult(matrix, history, snapshots, logs)


def _with_epochs(cfg: OptimizerConfig, epochs: int) -> OptimizerConfig:
    from dataclasses import replace
    return replace(cfg, epochs=epochs)
