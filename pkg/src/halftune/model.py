"""Decoder-only toy transformer with a LLaMA-style parameter taxonomy.

Every layer owns four attention projections (SAN), three feed-forward
matrices (FFN) and two RMS-norm scale vectors (LN). Token and learned
absolute position embeddings share one EMB matrix (positions occupy the rows
after the vocabulary); the output projection is a separate HEAD matrix.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import DTYPES, Tensor

CATEGORIES = ("SAN", "FFN", "LN", "EMB", "HEAD")
LAYER_CATEGORIES = ("SAN", "FFN", "LN")
SAN_NAMES = ("wq", "wk", "wv", "wo")
FFN_NAMES = ("w_gate", "w_up", "w_down")
LN_NAMES = ("attn", "ffn")
PAD_ID = 0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    dtype: str = "f32"

    def __post_init__(self):
        for key in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{key} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "dtype")}


@dataclass
class ParamEntry:
    name: str
    category: str
    layer: int | None
    tensor: Tensor

    @property
    def size(self) -> int:
        return self.tensor.data.size


class ParameterRegistry:
    """Ordered, category-tagged parameter store.

    Entries keep insertion order, which is also the serialization order.
    Tensors are immutable; :meth:`set` swaps in a new one.
    """

    def __init__(self, entries: Iterable[ParamEntry] = ()):
        self._entries: dict[str, ParamEntry] = {}
        for e in entries:
            self.add(e.name, e.category, e.layer, e.tensor)

    def add(self, name: str, category: str, layer: int | None, value) -> None:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        self._entries[name] = ParamEntry(name, category, layer, Tensor.wrap(t.data, name=name))

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def array(self, name: str) -> np.ndarray:
        return self._entries[name].tensor.data

    def set(self, name: str, value: np.ndarray) -> None:
        entry = self._entries[name]
        if value.shape != entry.tensor.shape or value.dtype != entry.tensor.data.dtype:
            raise ValueError(f"{name}: expected {entry.tensor.shape}/{entry.tensor.dtype}, "
                             f"got {value.shape}/{value.dtype}")
        entry.tensor = Tensor.wrap(value, name=name)

    def copy(self) -> "ParameterRegistry":
        out = ParameterRegistry()
        for e in self:
            out.add(e.name, e.category, e.layer, Tensor(e.tensor.data))
        return out

    def layer_indices(self) -> list[int]:
        return sorted({e.layer for e in self if e.layer is not None})

    def layer_entries(self, layer: int, category: str | None = None) -> list[ParamEntry]:
        return [e for e in self if e.layer == layer and (category is None or e.category == category)]

    def transformer_names(self) -> list[str]:
        return [e.name for e in self if e.category in LAYER_CATEGORIES]

    def check_compatible(self, other: "ParameterRegistry") -> None:
        """Raise ValueError unless names, order, categories, shapes and dtypes all match."""
        if self.names() != other.names():
            missing = set(self.names()) ^ set(other.names())
            raise ValueError(f"registries differ in names: {sorted(missing)[:5] or 'order differs'}")
        for a, b in zip(self, other):
            if (a.category, a.layer, a.tensor.shape, a.tensor.dtype) != \
                    (b.category, b.layer, b.tensor.shape, b.tensor.dtype):
                raise ValueError(f"{a.name}: {a.category}/{a.tensor.dtype}{a.tensor.shape} "
                                 f"vs {b.category}/{b.tensor.dtype}{b.tensor.shape}")

    def equals(self, other: "ParameterRegistry") -> bool:
        """Bitwise equality of every tensor (names and order must match too)."""
        if self.names() != other.names():
            return False
        return all(a.tensor.data.tobytes() == b.tensor.data.tobytes() for a, b in zip(self, other))


def build_model(config: ModelConfig, init_seed: int) -> "Model":
    """Fresh model with seeded Gaussian init (norm scales start at one)."""
    rng = np.random.default_rng(init_seed)
    dtype = DTYPES[config.dtype]
    d, f = config.d_model, config.d_ff
    proj_std = 0.02 / math.sqrt(config.n_layers)

    def gauss(shape, std):
        return (rng.standard_normal(shape) * std).astype(dtype)

    reg = ParameterRegistry()
    reg.add("embed", "EMB", None, gauss((config.vocab_size + config.max_seq_len, d), 0.02))
    for i in range(config.n_layers):
        p = f"layer.{i}"
        for n in SAN_NAMES:
            reg.add(f"{p}.san.{n}", "SAN", i, gauss((d, d), proj_std))
        reg.add(f"{p}.ffn.w_gate", "FFN", i, gauss((d, f), proj_std))
        reg.add(f"{p}.ffn.w_up", "FFN", i, gauss((d, f), proj_std))
        reg.add(f"{p}.ffn.w_down", "FFN", i, gauss((f, d), proj_std))
        for n in LN_NAMES:
            reg.add(f"{p}.ln.{n}", "LN", i, np.ones(d, dtype=dtype))
    reg.add("lm_head", "HEAD", None, gauss((d, config.vocab_size), 0.02))
    return Model(config, reg)


@dataclass
class Model:
    config: ModelConfig
    registry: ParameterRegistry

    def param_tensors(self, trainable: Iterable[str] = ()) -> dict[str, Tensor]:
        """Leaf tensors over the current buffers; only ``trainable`` ones get gradients."""
        trainable = set(trainable)
        return {e.name: Tensor.wrap(e.tensor.data, requires_grad=e.name in trainable, name=e.name)
                for e in self.registry}

    def collate(self, examples: Sequence) -> tuple[np.ndarray, np.ndarray]:
        return collate(examples)

    def loss(self, batch, params: dict[str, Tensor] | None = None) -> Tensor:
        tokens, targets = batch
        return loss_ce(forward_logits(self, tokens, params), targets, PAD_ID)


def forward_logits(model: Model, tokens, params: dict[str, Tensor] | None = None) -> Tensor:
    """Logits ``[batch, T, vocab]`` under causal self-attention."""
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, T], got shape {tokens.shape}")
    B, L = tokens.shape
    if L > cfg.max_seq_len:
        raise ValueError(f"sequence length {L} exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id outside the vocabulary")
    P = params if params is not None else model.param_tensors()
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H

    positions = np.broadcast_to(cfg.vocab_size + np.arange(L), (B, L))
    x = T.add(T.embed_lookup(P["embed"], tokens), T.embed_lookup(P["embed"], positions))

    def heads(m):
        return T.transpose(T.reshape(m, (B, L, H, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        p = f"layer.{i}"
        h = T.rms_norm(x, P[f"{p}.ln.attn"])
        q = heads(T.matmul(h, P[f"{p}.san.wq"]))
        k = heads(T.matmul(h, P[f"{p}.san.wk"]))
        v = heads(T.matmul(h, P[f"{p}.san.wv"]))
        att = T.row_softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh)), causal=True)
        o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        x = T.add(x, T.matmul(o, P[f"{p}.san.wo"]))

        h = T.rms_norm(x, P[f"{p}.ln.ffn"])
        gate = T.silu(T.matmul(h, P[f"{p}.ffn.w_gate"]))
        x = T.add(x, T.matmul(T.mul(gate, T.matmul(h, P[f"{p}.ffn.w_up"])), P[f"{p}.ffn.w_down"]))

    # final norm has a fixed unit scale so the taxonomy stays 9 tensors per layer
    unit = Tensor.wrap(np.ones(d, dtype=x.data.dtype))
    return T.matmul(T.rms_norm(x, unit), P["lm_head"])


def loss_ce(logits: Tensor, targets, pad_id: int = PAD_ID) -> Tensor:
    """Mean token NLL over positions whose target is not ``pad_id``."""
    return T.cross_entropy(logits, targets, ignore_index=pad_id)


def collate(examples: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Pack prompt/completion pairs into next-token batches.

    Each example exposes ``prompt`` and ``completion`` token tuples. Only
    positions that predict a completion token contribute to the loss.
    """
    seqs = [tuple(ex.prompt) + tuple(ex.completion) for ex in examples]
    L = max(len(s) for s in seqs) - 1
    tokens = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    targets = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    for r, (ex, s) in enumerate(zip(examples, seqs)):
        n = len(s) - 1
        tokens[r, :n] = s[:-1]
        start = len(ex.prompt) - 1
        targets[r, start:n] = s[start + 1:]
    return tokens, targets


def greedy_decode(model: Model, prompts: np.ndarray, max_new: int, stop_id: int | None = None,
                  allowed: Sequence[int] | None = None) -> np.ndarray:
    """Greedy continuation of equal-length prompts ``[batch, P]``.

    ``allowed`` restricts the argmax to a candidate token set. Decoding stops
    early once every row has emitted ``stop_id``.
    """
    seq = np.asarray(prompts, dtype=np.int64)
    out = np.full((seq.shape[0], max_new), PAD_ID, dtype=np.int64)
    done = np.zeros(seq.shape[0], dtype=bool)
    allowed = None if allowed is None else np.asarray(allowed)
    for step in range(max_new):
        logits = forward_logits(model, seq).data[:, -1, :]
        if allowed is None:
            nxt = logits.argmax(axis=-1)
        else:
            nxt = allowed[logits[:, allowed].argmax(axis=-1)]
        out[:, step] = nxt
        if stop_id is not None:
            done |= nxt == stop_id
            if done.all():
                break
        if step + 1 < max_new:
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out


@dataclass
class Census:
    matrices: dict[str, int] = field(default_factory=dict)
    elements: dict[str, int] = field(default_factory=dict)
    by_layer: dict[int, dict[str, int]] = field(default_factory=dict)
    total: int = 0
    transformer_total: int = 0


def param_census(registry: ParameterRegistry) -> Census:
    """Tensor counts and element totals per category and per layer."""
    matrices = dict.fromkeys(CATEGORIES, 0)
    elements = dict.fromkeys(CATEGORIES, 0)
    by_layer: dict[int, dict[str, int]] = defaultdict(lambda: dict.fromkeys(LAYER_CATEGORIES, 0))
    for e in registry:
        matrices[e.category] += 1
        elements[e.category] += e.size
        if e.layer is not None:
            by_layer[e.layer][e.category] += e.size
    total = sum(elements.values())
    layers_only = sum(elements[c] for c in LAYER_CATEGORIES)
    return Census(matrices, elements, dict(by_layer), total, layers_only)
