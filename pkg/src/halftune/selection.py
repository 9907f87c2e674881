"""Per-round parameter partitions: which matrices train and which stay frozen.

All planners draw from a counter-based random stream keyed by
``(seed, round, strategy)``, so rounds of one run get independent draws and
any plan can be regenerated from its provenance alone. Sampling always runs
over sorted name lists to keep the draw platform-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .model import CATEGORIES, LAYER_CATEGORIES, ParameterRegistry

STRATEGIES = ("category", "layer", "model", "ratio")
_STREAM_CODE = {"category": 1, "layer": 2, "model": 3, "ratio": 4}
IO_CATEGORIES = ("EMB", "HEAD")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionPlan:
    round_index: int
    strategy: str
    seed: int
    trainable: frozenset
    frozen: frozenset
    freeze_io: bool = False
    ratio: float | None = None

    def __post_init__(self):
        if self.trainable & self.frozen:
            raise PlanError(f"names both trainable and frozen: {sorted(self.trainable & self.frozen)[:3]}")

    @property
    def names(self) -> frozenset:
        return self.trainable | self.frozen

    def to_json(self) -> dict:
        out = {"round": self.round_index, "strategy": self.strategy, "seed": self.seed,
               "freeze_io": self.freeze_io, "frozen": sorted(self.frozen)}
        if self.ratio is not None:
            out["ratio"] = self.ratio
        return out

    @classmethod
    def from_json(cls, obj: dict, names: Iterable[str]) -> "SelectionPlan":
        names = list(names)
        frozen = frozenset(obj["frozen"])
        unknown = frozen - set(names)
        if unknown:
            raise PlanError(f"plan freezes unknown parameters {sorted(unknown)[:3]}")
        return cls(int(obj["round"]), obj["strategy"], int(obj["seed"]),
                   frozenset(names) - frozen, frozen, bool(obj["freeze_io"]), obj.get("ratio"))


@dataclass
class SelectionHistory:
    plans: list[SelectionPlan] = field(default_factory=list)

    def append(self, plan: SelectionPlan) -> None:
        expected = len(self.plans) + 1
        if plan.round_index != expected:
            raise PlanError(f"expected round {expected}, got {plan.round_index}")
        self.plans.append(plan)

    def __len__(self) -> int:
        return len(self.plans)

    def __iter__(self):
        return iter(self.plans)

    def selected_times(self, name: str) -> int:
        """Number of rounds in which ``name`` was trainable."""
        if self.plans and name not in self.plans[0].names:
            raise KeyError(name)
        return sum(name in p.trainable for p in self.plans)

    def to_json(self) -> list[dict]:
        return [p.to_json() for p in self.plans]

    @classmethod
    def from_json(cls, items: list[dict], names: Iterable[str]) -> "SelectionHistory":
        names = list(names)
        hist = cls()
        for obj in items:
            hist.append(SelectionPlan.from_json(obj, names))
        return hist


def round_stream(seed: int, round_index: int, strategy: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_index, _STREAM_CODE[strategy]]))


def _finish(registry, frozen_layers: set[str], round_index, strategy, seed, freeze_io, ratio=None):
    frozen = set(frozen_layers)
    if freeze_io:
        frozen |= {e.name for e in registry if e.category in IO_CATEGORIES}
    names = set(registry.names())
    return SelectionPlan(round_index, strategy, seed, frozenset(names - frozen), frozenset(frozen),
                         freeze_io, ratio)


def _sample(rng: np.random.Generator, names: list[str], k: int) -> list[str]:
    names = sorted(names)
    idx = rng.choice(len(names), size=k, replace=False)
    return [names[i] for i in sorted(idx)]


def _even_layers(registry: ParameterRegistry) -> list[int]:
    layers = registry.layer_indices()
    if len(layers) % 2:
        raise PlanError(f"this strategy needs an even number of layers, got {len(layers)}")
    return layers


def plan_category(registry: ParameterRegistry, round_index: int, seed: int,
                  freeze_io: bool = False) -> SelectionPlan:
    """Freeze half of every block type in every layer.

    Per layer, 2 of 4 attention matrices and 1 of 2 norm vectors freeze. The
    three FFN matrices cannot split evenly, so a seeded half of the layers
    freezes two and the rest freeze one.
    """
    layers = _even_layers(registry)
    rng = round_stream(seed, round_index, "category")
    rounded_up = set(int(i) for i in rng.choice(layers, size=len(layers) // 2, replace=False))
    frozen: set[str] = set()
    for layer in layers:
        groups = {c: [e.name for e in registry.layer_entries(layer, c)] for c in LAYER_CATEGORIES}
        if (len(groups["SAN"]), len(groups["FFN"]), len(groups["LN"])) != (4, 3, 2):
            raise PlanError(f"layer {layer} does not follow the 4 SAN / 3 FFN / 2 LN taxonomy")
        n_ffn = 2 if layer in rounded_up else 1
        frozen.update(_sample(rng, groups["FFN"], n_ffn))
        frozen.update(_sample(rng, groups["SAN"], 2))
        frozen.update(_sample(rng, groups["LN"], 1))
    return _finish(registry, frozen, round_index, "category", seed, freeze_io)


def plan_layer(registry: ParameterRegistry, round_index: int, seed: int,
               freeze_io: bool = False) -> SelectionPlan:
    """Freeze every other whole layer; a seeded coin picks the parity."""
    layers = _even_layers(registry)
    parity = int(round_stream(seed, round_index, "layer").integers(2))
    frozen = {e.name for e in registry if e.layer is not None and e.layer % 2 == parity}
    return _finish(registry, frozen, round_index, "layer", seed, freeze_io)


def plan_model(registry: ParameterRegistry, round_index: int, seed: int,
               freeze_io: bool = False) -> SelectionPlan:
    """Freeze a uniform half (by count, floored) of all transformer tensors."""
    names = registry.transformer_names()
    rng = round_stream(seed, round_index, "model")
    frozen = set(_sample(rng, names, len(names) // 2))
    return _finish(registry, frozen, round_index, "model", seed, freeze_io)


def plan_ratio(registry: ParameterRegistry, round_index: int, seed: int, p: float,
               freeze_io: bool = False) -> SelectionPlan:
    """Train roughly a fraction ``p`` of transformer-layer elements.

    Tensors are visited in seeded order and made trainable while they still
    fit under the target, so the shortfall is below one tensor's size.
    """
    if not 0.0 <= p <= 1.0:
        raise PlanError(f"ratio must lie in [0, 1], got {p}")
    names = sorted(registry.transformer_names())
    total = sum(registry[n].size for n in names)
    target = Fraction(p).limit_denominator(10**9) * total
    rng = round_stream(seed, round_index, "ratio")
    chosen, count = set(), 0
    for i in rng.permutation(len(names)):
        size = registry[names[i]].size
        if count + size <= target:
            chosen.add(names[i])
            count += size
    frozen = set(names) - chosen
    return _finish(registry, frozen, round_index, "ratio", seed, freeze_io, ratio=float(p))


def full_plan(registry: ParameterRegistry, round_index: int = 1, seed: int = 0,
              freeze_io: bool = False) -> SelectionPlan:
    """Full fine-tuning expressed as a ratio plan with ``p = 1``."""
    return plan_ratio(registry, round_index, seed, 1.0, freeze_io)


def make_plan(strategy: str, registry: ParameterRegistry, round_index: int, seed: int,
              freeze_io: bool = False, ratio: float | None = None) -> SelectionPlan:
    if strategy == "category":
        return plan_category(registry, round_index, seed, freeze_io)
    if strategy == "layer":
        return plan_layer(registry, round_index, seed, freeze_io)
    if strategy == "model":
        return plan_model(registry, round_index, seed, freeze_io)
    if strategy == "ratio":
        if ratio is None:
            raise PlanError("ratio strategy needs a ratio")
        return plan_ratio(registry, round_index, seed, ratio, freeze_io)
    raise PlanError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def complement(plan: SelectionPlan) -> SelectionPlan:
    """Swap trainable and frozen sets, keeping provenance."""
    return SelectionPlan(plan.round_index, plan.strategy, plan.seed, plan.frozen, plan.trainable,
                         plan.freeze_io, plan.ratio)


@dataclass(frozen=True)
class MaskStats:
    layers_fraction: Fraction
    total_fraction: Fraction
    per_category: dict
    exact_half: bool

    def summary(self) -> dict:
        return {"trainable_layers": float(self.layers_fraction),
                "trainable_total": float(self.total_fraction),
                "per_category": {k: float(v) for k, v in self.per_category.items()},
                "exact_half": self.exact_half}


def mask_stats(plan: SelectionPlan, registry: ParameterRegistry) -> MaskStats:
    """Trainable element fractions in both calibres, as exact rationals.

    The layers calibre counts only SAN/FFN/LN elements; the total calibre
    also counts EMB and HEAD.
    """
    unknown = plan.names - set(registry.names())
    if unknown:
        raise PlanError(f"plan names not in registry: {sorted(unknown)[:3]}")
    tot = dict.fromkeys(CATEGORIES, 0)
    sel = dict.fromkeys(CATEGORIES, 0)
    for e in registry:
        tot[e.category] += e.size
        if e.name in plan.trainable:
            sel[e.category] += e.size
    layer_tot = sum(tot[c] for c in LAYER_CATEGORIES)
    layer_sel = sum(sel[c] for c in LAYER_CATEGORIES)
    layers = Fraction(layer_sel, layer_tot) if layer_tot else Fraction(0)
    total = Fraction(sum(sel.values()), sum(tot.values())) if sum(tot.values()) else Fraction(0)
    per_cat = {c: Fraction(sel[c], tot[c]) for c in CATEGORIES if tot[c]}
    return MaskStats(layers, total, per_cat, layers == Fraction(1, 2))
