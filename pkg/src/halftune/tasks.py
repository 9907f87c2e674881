"""Eight synthetic sequence-to-sequence tasks over one shared vocabulary.

Token layout (64 ids)::

    0 PAD   1 SEP   2 EOS   3..10 task markers   11..63 content tokens

A prompt is ``[marker, inputs..., SEP]`` and the completion is
``[targets..., EOS]``. Train and eval splits come from separate seed streams
and eval inputs that also occur in train are redrawn.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import PAD_ID, Model, greedy_decode

SEP_ID = 1
EOS_ID = 2
MARKER_BASE = 3
CONTENT_BASE = 11
VOCAB_SIZE = 64
N_CONTENT = VOCAB_SIZE - CONTENT_BASE

KINDS = ("copy", "reverse", "sort_tokens", "modular_add", "parity", "successor", "dedup", "histogram_max")


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    inputs: tuple[int, ...]
    targets: tuple[int, ...]
    task: str
    marker: int

    @property
    def prompt(self) -> tuple[int, ...]:
        return (self.marker, *self.inputs, SEP_ID)

    @property
    def completion(self) -> tuple[int, ...]:
        return (*self.targets, EOS_ID)

    def to_record(self) -> dict:
        return {"input_tokens": list(self.prompt), "target_tokens": list(self.completion), "task": self.task}


@dataclass(frozen=True)
class Slice:
    """Contiguous run of content token ids ``start .. start + size - 1``."""

    start: int = CONTENT_BASE
    size: int = N_CONTENT

    def __post_init__(self):
        if self.start < CONTENT_BASE or self.size < 2 or self.start + self.size > VOCAB_SIZE:
            raise TaskError(f"vocabulary slice [{self.start}, {self.start + self.size}) must lie within "
                            f"content ids [{CONTENT_BASE}, {VOCAB_SIZE}) and hold at least 2 tokens")

    @property
    def tokens(self) -> range:
        return range(self.start, self.start + self.size)


FULL = Slice()


@dataclass
class TaskSpec:
    name: str
    kind: str
    seed: int
    train_size: int
    eval_size: int
    min_len: int = 3
    max_len: int = 6
    base: int = 10
    vocab: Slice = FULL
    train: list[Example] = field(default_factory=list, repr=False)
    eval: list[Example] = field(default_factory=list, repr=False)

    @property
    def marker(self) -> int:
        return MARKER_BASE + KINDS.index(self.kind)

    @property
    def answer_set(self) -> tuple[int, ...] | None:
        """Closed set of single-token answers, or None for free-form output."""
        if self.kind == "parity":
            return (self.vocab.start, self.vocab.start + 1)
        if self.kind == "modular_add":
            return tuple(self.vocab.start + i for i in range(self.base))
        return None

    @property
    def chance(self) -> float:
        answers = self.answer_set
        return 100.0 / len(answers) if answers else 0.0

    @property
    def max_target_len(self) -> int:
        return 1 if self.kind in ("modular_add", "parity", "histogram_max") else self.max_len

    def export_jsonl(self, path, split: str = "train") -> None:
        with open(path, "w") as fh:
            for ex in getattr(self, split):
                fh.write(json.dumps(ex.to_record()) + "\n")


# ---------------------------------------------------------------- rules
# Each rule maps an input token tuple to its unique target tuple. ``sl`` is
# the task's content slice; ``base`` only matters for modular_add.




def _rule_copy(x, sl, base):
    return tuple(x)


def _rule_reverse(x, sl, base):
    return tuple(reversed(x))


def _rule_sort(x, sl, base):
    return tuple(sorted(x))


def _rule_modular_add(x, sl, base):
    return (sl.start + sum(t - sl.start for t in x) % base,)


def _rule_parity(x, sl, base):
    # parity of the number of odd-offset tokens in the slice
    return (sl.start + sum((t - sl.start) % 2 for t in x) % 2,)


def _rule_successor(x, sl, base):
    return tuple(sl.start + (t - sl.start + 1) % sl.size for t in x)


def _rule_dedup(x, sl, base):
    seen, out = set(), []
    for t in x:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return tuple(out)


def _rule_histogram_max(x, sl, base):
    counts = Counter(x)
    top = max(counts.values())
    return (min(t for t, c in counts.items() if c == top),)


RULES: dict[str, Callable] = {
    "copy": _rule_copy,
    "reverse": _rule_reverse,
    "sort_tokens": _rule_sort,
    "modular_add": _rule_modular_add,
    "parity": _rule_parity,
    "successor": _rule_successor,
    "dedup": _rule_dedup,
    "histogram_max": _rule_histogram_max,
}


def apply_rule(kind: str, inputs, base: int = 10, sl: Slice = FULL) -> tuple[int, ...]:
    return RULES[kind](tuple(inputs), sl, base)


def _draw_inputs(kind: str, rng: np.random.Generator, lo: int, hi: int, base: int, sl: Slice) -> tuple[int, ...]:
    n = int(rng.integers(lo, hi + 1))
    if kind == "modular_add":
        return tuple(int(t) for t in sl.start + rng.integers(0, base, size=max(n, 2)))
    tokens = sl.start + rng.integers(0, sl.size, size=n)
    if kind in ("copy", "dedup"):
        # force a repeat so dedup and copy never coincide
        i, j = rng.choice(n, size=2, replace=False)
        tokens[j] = tokens[i]
    if kind == "histogram_max":
        while True:
            counts = Counter(tokens.tolist())
            top = sorted(counts.values(), reverse=True)
            if top[0] >= 2 and (len(top) == 1 or top[1] < top[0]):
                break
            tokens[int(rng.integers(n))] = tokens[int(rng.integers(n))]
    return tuple(int(t) for t in tokens)


def make_task(kind: str, seed: int, train_size: int, eval_size: int, *, min_len: int = 3,
              max_len: int = 6, base: int = 10, name: str | None = None,
              max_seq_len: int | None = None, vocab: Slice = FULL) -> TaskSpec:
    """Materialize a task deterministically from ``(kind, seed, sizes, lengths, vocab)``."""
    if kind not in RULES:
        raise TaskError(f"unknown task kind {kind!r}")
    if train_size <= 0 or eval_size <= 0:
        raise TaskError("split sizes must be positive")
    if not 2 <= min_len <= max_len:
        raise TaskError("need 2 <= min_len <= max_len")
    if kind == "modular_add" and not 2 <= base <= vocab.size:
        raise TaskError(f"modular_add base must lie in [2, {vocab.size}] for a {vocab.size}-token slice")
    if kind in ("copy", "dedup", "histogram_max") and vocab.size < 2:
        raise TaskError(f"vocabulary slice too small for {kind}")
    spec = TaskSpec(name or kind, kind, seed, train_size, eval_size, min_len, max_len, base, vocab)
    if max_seq_len is not None and 2 * max_len + 2 > max_seq_len:
        raise TaskError(f"inputs of length {max_len} need max_seq_len >= {2 * max_len + 2}, got {max_seq_len}")

    def build(stream: int, size: int, exclude: set) -> list[Example]:
        rng = np.random.default_rng([seed, KINDS.index(kind), stream])
        out, seen = [], set()
        attempts = 0
        while len(out) < size:
            attempts += 1
            if attempts > 200 * size:
                raise TaskError(f"{kind}: input space too small for {size} distinct examples")
            x = _draw_inputs(kind, rng, min_len, max_len, base, vocab)
            if x in exclude or x in seen:
                continue
            seen.add(x)
            out.append(Example(x, apply_rule(kind, x, base, vocab), spec.name, spec.marker))
        return out

    spec.train = build(0, train_size, set())
    spec.eval = build(1, eval_size, {ex.inputs for ex in spec.train})
    return spec


def default_suite(seed: int = 0, train_size: int = 512, eval_size: int = 500, **kw) -> list[TaskSpec]:
    """All eight kinds in canonical order, each from its own stream of ``seed``."""
    return [make_task(kind, seed, train_size, eval_size, **kw) for kind in KINDS]


def eval_exact_match(model: Model, task: TaskSpec, batch_size: int = 500) -> float:
    """Percentage of eval examples answered exactly.

    Free-form tasks are decoded greedily until EOS and must reproduce the
    target tokens followed by EOS. Closed-answer tasks take the argmax over
    their answer set at the first completion position.
    """
    examples = task.eval
    if not examples:
        return 0.0
    by_len: dict[int, list[Example]] = {}
    for ex in examples:
        by_len.setdefault(len(ex.prompt), []).append(ex)
    hits = 0
    answers = task.answer_set
    for group in by_len.values():
        for start in range(0, len(group), batch_size):
            chunk = group[start:start + batch_size]
            prompts = np.array([ex.prompt for ex in chunk], dtype=np.int64)
            if answers is not None:
                out = greedy_decode(model, prompts, 1, allowed=answers)
                hits += int(sum(out[i, 0] == ex.targets[0] for i, ex in enumerate(chunk)))
                continue
            max_new = min(task.max_target_len + 1, model.config.max_seq_len - prompts.shape[1])
            out = greedy_decode(model, prompts, max_new, stop_id=EOS_ID)
            for row, ex in zip(out, chunk):
                if _matches(row, ex.completion):
                    hits += 1
    return 100.0 * hits / len(examples)


def _matches(decoded: np.ndarray, completion: tuple[int, ...]) -> bool:
    if len(decoded) < len(completion):
        return False
    return tuple(int(t) for t in decoded[:len(completion)]) == completion


def check_examples(task: TaskSpec) -> int:
    """Brute-force validation; returns the number of checked examples."""
    n = 0
    for ex in task.train + task.eval:
        expected = apply_rule(task.kind, ex.inputs, task.base, task.vocab)
        if ex.targets != expected:
            raise TaskError(f"{task.name}: {ex.inputs} -> {ex.targets}, rule gives {expected}")
        if ex.marker != task.marker or PAD_ID in ex.inputs:
            raise TaskError(f"{task.name}: malformed example {ex}")
        n += 1
    return n


def rule_transfer(source: TaskSpec, target: TaskSpec) -> float:
    """Score (percent) of ``source``'s rule applied to ``target``'s eval inputs."""
    hits = sum(apply_rule(source.kind, ex.inputs, source.base, source.vocab) == ex.targets for ex in target.eval)
    return 100.0 * hits / len(target.eval)
