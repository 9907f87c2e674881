"""Masked-gradient training.

Only the trainable half of a :class:`~halftune.selection.SelectionPlan` is
differentiated and updated; frozen tensors keep their exact bytes and their
optimizer state. :func:`train_penalty` is the relaxed counterpart, where all
parameters train but leaving the reference point is charged quadratically.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import ParameterRegistry
from .selection import SelectionPlan, full_plan, mask_stats


class TrainingError(FloatingPointError):
    """A step produced a non-finite loss or gradient; parameters were left untouched."""


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    learning_rate: float = 3e-4
    warmup_fraction: float = 0.03
    schedule: str = "linear_decay"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 32
    grad_clip_norm: float | None = 1.0
    reset_state_per_round: bool = True

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"optimizer kind must be sgd or adamw, got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.schedule not in ("constant", "linear_decay"):
            raise ValueError(f"schedule must be constant or linear_decay, got {self.schedule!r}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")


class Optimizer:
    """SGD or AdamW over named arrays with per-parameter Adam step counts.

    A parameter that is frozen for some steps keeps its moments and step
    count exactly as they were.
    """

    def __init__(self, config: OptimizerConfig, total_steps: int):
        self.config = config
        self.total_steps = max(int(total_steps), 1)
        self.step_count = 0
        self.state: dict[str, dict] = {}

    def restart(self, total_steps: int) -> None:
        """New schedule for the next round; moments survive unless the config resets them."""
        self.total_steps = max(int(total_steps), 1)
        self.step_count = 0
        if self.config.reset_state_per_round:
            self.state = {}

    def lr(self) -> float:
        cfg = self.config
        warmup = int(cfg.warmup_fraction * self.total_steps)
        s = self.step_count
        if warmup and s < warmup:
            return cfg.learning_rate * (s + 1) / warmup
        if cfg.schedule == "constant":
            return cfg.learning_rate
        remaining = max(self.total_steps - warmup, 1)
        return cfg.learning_rate * max(0.0, 1.0 - (s - warmup) / remaining)

    def update(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        cfg = self.config
        lr = self.lr()
        out = {}
        for name, g in grads.items():
            p = params[name]
            dt = p.dtype.type
            if cfg.kind == "sgd":
                out[name] = p - dt(lr) * g
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
            b1, b2 = cfg.betas
            st["t"] += 1
            st["m"] = dt(b1) * st["m"] + dt(1 - b1) * g
            st["v"] = dt(b2) * st["v"] + dt(1 - b2) * (g * g)
            mhat = st["m"] / dt(1 - b1 ** st["t"])
            vhat = st["v"] / dt(1 - b2 ** st["t"])
            new = p - dt(lr) * (mhat / (np.sqrt(vhat) + dt(cfg.eps)))
            if cfg.weight_decay:
                new = new - dt(lr * cfg.weight_decay) * p
            out[name] = new
        self.step_count += 1
        return out


@dataclass
class PenaltyConfig:
    """Quadratic pull ``lam * ||(I - M)(theta - reference)||^2``.

    ``mask`` maps a parameter name to the 0/1 array of penalised coordinates
    (the diagonal of ``I - M``); names not listed are unpenalised.
    """

    lam: float
    reference: dict[str, np.ndarray]
    mask: dict[str, np.ndarray]

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        for name, m in self.mask.items():
            if name not in self.reference or self.reference[name].shape != m.shape:
                raise ValueError(f"{name}: mask and reference shapes disagree")

    @classmethod
    def from_plan(cls, lam: float, reference: ParameterRegistry, plan: SelectionPlan) -> "PenaltyConfig":
        ref = {e.name: e.tensor.data for e in reference}
        mask = {n: np.ones_like(ref[n]) for n in sorted(plan.frozen)}
        return cls(lam, ref, mask)

    def deviation(self, registry: ParameterRegistry) -> float:
        """``||(I - M)(theta - reference)||``."""
        total = 0.0
        for name, m in self.mask.items():
            diff = (registry.array(name).astype(np.float64) - self.reference[name]) * m
            total += float((diff * diff).sum())
        return math.sqrt(total)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def wall_ms(self) -> float:
        return sum(r["wall_ms"] for r in self.records)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def _trainable_fraction(plan: SelectionPlan, registry: ParameterRegistry) -> float:
    stats = mask_stats(plan, registry)
    if registry.transformer_names():
        return float(stats.layers_fraction)
    return float(stats.total_fraction)


def step(model, batch, plan: SelectionPlan, optimizer: Optimizer,
         penalty: PenaltyConfig | None = None) -> float:
    """One masked update. Returns the batch loss (before the update)."""
    reg = model.registry
    if plan.names != set(reg.names()):
        raise ValueError("plan does not partition the model's parameters")
    trainable = [n for n in reg.names() if n in plan.trainable]
    params = model.param_tensors(trainable)
    with T.Tape() as tape:
        try:
            loss = model.loss(batch, params)
        except T.NonFiniteError as exc:
            raise TrainingError(str(exc)) from exc
    loss_value = float(loss.data)
    if not trainable:
        return loss_value
    grads = {n: np.array(g.data) for n, g in T.grad(loss, [params[n] for n in trainable], tape).items()}

    if penalty is not None:
        two_lam = 2.0 * penalty.lam
        for name, m in penalty.mask.items():
            if name in grads:
                p = reg.array(name)
                grads[name] = grads[name] + (two_lam * m * (p - penalty.reference[name])).astype(p.dtype)

    sq = sum(float(np.vdot(g, g)) for g in grads.values())
    if not (math.isfinite(loss_value) and math.isfinite(sq)):
        raise TrainingError(f"non-finite loss or gradient at optimizer step {optimizer.step_count}")
    clip = optimizer.config.grad_clip_norm
    if clip:
        norm = math.sqrt(sq)
        if norm > clip:
            factor = clip / (norm + 1e-6)
            grads = {n: g * g.dtype.type(factor) for n, g in grads.items()}

    updates = optimizer.update({n: reg.array(n) for n in grads}, grads)
    for name, value in updates.items():
        reg.set(name, value)
    return loss_value


def iter_batches(dataset: Sequence, batch_size: int, epochs: int, seed: int):
    """Yield example lists, reshuffling each epoch from ``(seed, epoch)``."""
    n = len(dataset)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n, batch_size):
            yield [dataset[i] for i in order[start:start + batch_size]]


def steps_per_round(n_examples: int, config: OptimizerConfig) -> int:
    return config.epochs * math.ceil(n_examples / config.batch_size)


def train_round(model, plan: SelectionPlan, dataset: Sequence, opt_config: OptimizerConfig, *,
                seed: int = 0, optimizer: Optimizer | None = None, penalty: PenaltyConfig | None = None,
                collate: Callable | None = None, max_steps: int | None = None):
    """Train one round in place; returns ``(model, TrainLog)``.

    ``optimizer`` carries state across rounds; pass ``None`` for a fresh one.
    ``max_steps`` truncates the round (the schedule still spans it fully).
    """
    if not len(dataset):
        raise ValueError("empty dataset")
    collate = collate or model.collate
    total = steps_per_round(len(dataset), opt_config)
    if max_steps is not None:
        total = min(total, max_steps)
    if optimizer is None:
        optimizer = Optimizer(opt_config, total)
    else:
        optimizer.restart(total)
    fraction = _trainable_fraction(plan, model.registry)
    log = TrainLog()
    for i, examples in enumerate(iter_batches(dataset, opt_config.batch_size, opt_config.epochs, seed)):
        if i >= total:
            break
        t0 = time.perf_counter()
        loss = step(model, collate(examples), plan, optimizer, penalty)
        log.records.append({"step": i + 1, "loss": loss, "wall_ms": (time.perf_counter() - t0) * 1e3,
                            "trainable_fraction": fraction})
    return model, log


def train_penalty(model, reference: ParameterRegistry, mask: SelectionPlan | Mapping[str, np.ndarray],
                  lam: float, dataset: Sequence, opt_config: OptimizerConfig, *, seed: int = 0,
                  collate: Callable | None = None):
    """Train every parameter against ``L(theta) + lam * ||(I - M)(theta - reference)||^2``.

    ``mask`` is either a plan (its frozen tensors are penalised whole) or a
    mapping from name to a 0/1 array of penalised coordinates.
    """
    reference.check_compatible(model.registry)
    if isinstance(mask, SelectionPlan):
        penalty = PenaltyConfig.from_plan(lam, reference, mask)
    else:
        ref = {e.name: e.tensor.data for e in reference}
        penalty = PenaltyConfig(lam, ref, {n: np.asarray(m, dtype=ref[n].dtype) for n, m in mask.items()})
    plan = full_plan(model.registry)
    return train_round(model, plan, dataset, opt_config, seed=seed, penalty=penalty, collate=collate)


def backward_flops(model, plan: SelectionPlan, seq_len: int | None = None) -> dict[str, float]:
    """Per-token backward FLOPs split into activation and weight gradients.

    A linear map with a ``k x n`` weight costs ``2kn`` for the input gradient
    and ``2kn`` for the weight gradient; attention score/value products cost
    ``8 * T * d`` per token; norm scales cost ``2d`` each for their weight
    gradient and the embedding gather ``d``.
    """
    cfg = model.config
    L = seq_len or cfg.max_seq_len
    d = cfg.d_model
    act = 0.0
    weight_total = weight_frozen = 0.0
    layer_weight = 0.0
    for e in model.registry:
        if e.category in ("SAN", "FFN"):
            w = 2.0 * e.size
            act += w
        elif e.category == "LN":
            w = 2.0 * e.size
            act += 4.0 * d
        elif e.category == "HEAD":
            w = 2.0 * e.size
            act += w
        else:
            w = float(d)
        weight_total += w
        if e.category in ("SAN", "FFN", "LN"):
            layer_weight += w
        if e.name in plan.frozen:
            weight_frozen += w
    act += cfg.n_layers * 8.0 * L * d
    return {"activation": act, "weight": weight_total, "transformer_weight": layer_weight,
            "skipped": weight_frozen, "total": act + weight_total}


def grad_skip_accounting(plan: SelectionPlan, model, seq_len: int | None = None) -> float:
    """Fraction of backward FLOPs elided because frozen weight gradients are skipped."""
    f = backward_flops(model, plan, seq_len)
    return f["skipped"] / f["total"]


class LinearReadout:
    """``y ~ X w`` with squared loss: a convex model for optimizer checks.

    Its single parameter sits in the HEAD category so the usual registry and
    plan machinery applies unchanged.
    """

    def __init__(self, w0: np.ndarray, names: Sequence[str] | None = None):
        w0 = np.asarray(w0)
        self.registry = ParameterRegistry()
        if names is None:
            self.registry.add("w", "HEAD", None, w0.reshape(-1, 1))
        else:
            for name, chunk in zip(names, np.array_split(w0, len(names))):
                self.registry.add(name, "HEAD", None, chunk.reshape(-1, 1))

    def param_tensors(self, trainable=()):
        trainable = set(trainable)
        return {e.name: T.Tensor.wrap(e.tensor.data, requires_grad=e.name in trainable, name=e.name)
                for e in self.registry}

    def collate(self, rows):
        X = np.stack([r[0] for r in rows])
        y = np.array([[r[1]] for r in rows], dtype=X.dtype)
        return X, y

    def loss(self, batch, params=None):
        X, y = batch
        P = params if params is not None else self.param_tensors()
        names = self.registry.names()
        pred = None
        start = 0
        for name in names:
            k = P[name].shape[0]
            part = T.matmul(T.Tensor.wrap(np.ascontiguousarray(X[:, start:start + k])), P[name])
            pred = part if pred is None else T.add(pred, part)
            start += k
        r = T.sub(pred, T.Tensor.wrap(y))
        return T.scale(T.sum_all(T.mul(r, r)), 1.0 / len(y))

    def weights(self) -> np.ndarray:
        return np.concatenate([self.registry.array(n).reshape(-1) for n in self.registry.names()])
