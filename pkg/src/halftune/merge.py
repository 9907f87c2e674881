"""Task vectors and Half-Reset.

A plain floating-point difference ``b - a`` does not always give back ``b``
when added to ``a``. Each entry therefore stores the rounded difference
``hi`` together with its exact rounding residual ``lo`` (``hi + lo == b - a``
in exact arithmetic), and :func:`apply_vector` adds both back with a
compensated sum. Reported norms use ``hi`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CATEGORIES, LAYER_CATEGORIES, ParameterRegistry
from .selection import SelectionPlan, make_plan
from .tensor import Tensor

RESET_STRATEGIES = ("model", "layer", "category")


class StructureError(ValueError):
    pass


def two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Knuth's error-free sum: ``s + e == a + b`` exactly with ``s = fl(a + b)``."""
    s = a + b
    bb = s - a
    e = (a - (s - bb)) + (b - bb)
    return s, e


@dataclass
class TaskVector:
    """Elementwise ``theta_ft - theta_0`` keyed by parameter name."""

    entries: dict[str, Tensor]
    residuals: dict[str, np.ndarray] = field(default_factory=dict)
    categories: dict[str, str] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.entries)

    def array(self, name: str) -> np.ndarray:
        return self.entries[name].data

    def is_zero(self) -> bool:
        return all(not e.data.any() for e in self.entries.values()) and \
            all(not r.any() for r in self.residuals.values())

    def norms(self) -> dict[str, float]:
        """L2 norm per category (categories with no entries are omitted)."""
        sq: dict[str, float] = {}
        for name, t in self.entries.items():
            cat = self.categories.get(name, "UNK")
            sq[cat] = sq.get(cat, 0.0) + float(np.square(t.data, dtype=np.float64).sum())
        order = [c for c in CATEGORIES if c in sq] + sorted(set(sq) - set(CATEGORIES))
        return {c: float(np.sqrt(sq[c])) for c in order}


def _check_structure(a: ParameterRegistry, b: ParameterRegistry) -> None:
    try:
        a.check_compatible(b)
    except ValueError as exc:
        raise StructureError(str(exc)) from None


def task_vector(theta_ft: ParameterRegistry, theta_0: ParameterRegistry) -> TaskVector:
    _check_structure(theta_ft, theta_0)
    entries, residuals, cats = {}, {}, {}
    for e in theta_ft:
        hi, lo = two_sum(e.tensor.data, -theta_0.array(e.name))
        entries[e.name] = Tensor(hi, name=e.name)
        residuals[e.name] = lo
        cats[e.name] = e.category
    return TaskVector(entries, residuals, cats)


def apply_vector(theta_0: ParameterRegistry, tv: TaskVector,
                 keep: SelectionPlan | set[str] | None = None) -> ParameterRegistry:
    """``theta_0 + M * tv``, where ``M`` selects the names in ``keep`` (all by default)."""
    if set(tv.entries) != set(theta_0.names()):
        raise StructureError("task vector and registry name sets differ")
    if isinstance(keep, SelectionPlan):
        keep = set(keep.trainable)
    out = theta_0.copy()
    for name in theta_0.names():
        if keep is not None and name not in keep:
            continue
        base = theta_0.array(name)
        hi = tv.array(name)
        if hi.shape != base.shape or hi.dtype != base.dtype:
            raise StructureError(f"{name}: vector {hi.dtype}{hi.shape} vs registry {base.dtype}{base.shape}")
        s, e = two_sum(base, hi)
        lo = tv.residuals.get(name)
        out.set(name, s + e if lo is None else s + (e + lo))
    return out


def half_reset(theta_ft: ParameterRegistry, theta_0: ParameterRegistry,
               keep_plan: SelectionPlan) -> ParameterRegistry:
    """Keep ``keep_plan.trainable`` fine-tuned and roll ``keep_plan.frozen`` back to ``theta_0``."""
    _check_structure(theta_ft, theta_0)
    if keep_plan.names != set(theta_ft.names()):
        raise StructureError("keep plan does not partition the registry")
    out = theta_ft.copy()
    for name in keep_plan.frozen:
        out.set(name, theta_0.array(name))
    return out


def drop_ratio(tv: TaskVector, q: float, seed: int) -> TaskVector:
    """Zero a seeded ``round(q * n)`` of the ``n`` matrices in ``tv``."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"drop ratio must lie in [0, 1], got {q}")
    names = sorted(tv.entries)
    k = int(round(q * len(names)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    dropped = {names[i] for i in rng.choice(len(names), size=k, replace=False)}
    entries, residuals = {}, {}
    for name, t in tv.entries.items():
        if name in dropped:
            entries[name] = Tensor(np.zeros_like(t.data), name=name)
            residuals[name] = np.zeros_like(t.data)
        else:
            entries[name] = t
            if name in tv.residuals:
                residuals[name] = tv.residuals[name]
    return TaskVector(entries, residuals, dict(tv.categories))


def reset_strategies(theta_ft: ParameterRegistry, theta_0: ParameterRegistry, strategy: str,
                     seed: int, reset_io: bool = False) -> ParameterRegistry:
    """Half-Reset with a plan drawn by the named selection strategy.

    Embedding and output head stay fine-tuned unless ``reset_io`` is set.
    """
    if strategy not in RESET_STRATEGIES:
        raise ValueError(f"reset strategy must be one of {RESET_STRATEGIES}, got {strategy!r}")
    plan = make_plan(strategy, theta_ft, 1, seed, freeze_io=reset_io)
    return half_reset(theta_ft, theta_0, plan)


def layer_elements_equal(a: ParameterRegistry, b: ParameterRegistry) -> tuple[int, int]:
    """(equal, total) element counts over transformer-layer tensors."""
    eq = total = 0
    for e in a:
        if e.category in LAYER_CATEGORIES:
            eq += int((e.tensor.data == b.array(e.name)).sum())
            total += e.size
    return eq, total
