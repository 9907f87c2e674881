"""Dense tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: it covers exactly what the toy decoder in
:mod:`halftune.model` needs. Arrays are numpy buffers; a :class:`Tape`
records one node per op while it is active, and :func:`grad` walks the nodes
backwards.

Weight gradients of leaves that do not require grad are never computed, which
is what makes frozen parameters cheaper in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, np_dtype in DTYPES.items():
        if dtype == np_dtype:
            return name
    raise TypeError(f"unsupported dtype {dtype}")


class Tensor:
    """Immutable n-d array, optionally a differentiable leaf.

    The wrapped buffer is marked read-only; updates produce new tensors.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(dtype, str):
            dtype = DTYPES[dtype]
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        dtype_name(arr.dtype)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        """Wrap an array without copying. The caller gives up write access."""
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = name
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return dtype_name(self.data.dtype)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], tuple]
    operands: tuple[Tensor, ...]


class Tape:
    """Records op nodes in execution order (hence topologically sorted)."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def leaves(self) -> dict[int, Tensor]:
        """Differentiable inputs that no recorded node produced."""
        out = {}
        for node in self.nodes:
            for t in node.operands:
                if t.requires_grad and id(t) not in self._outputs:
                    out[id(t)] = t
        return out

    def _record(self, kind, operands, out, backward):
        self.nodes.append(Node(kind, tuple(id(t) for t in operands), id(out), backward, tuple(operands)))
        self._outputs[id(out)] = out


_ACTIVE: list[Tape] = []
CHECK_FINITE = True


def _emit(kind: str, value: np.ndarray, operands: Sequence[Tensor], backward) -> Tensor:
    if CHECK_FINITE and not np.isfinite(value).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    needs = any(t.requires_grad for t in operands)
    out = Tensor.wrap(value, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1]._record(kind, operands, out, backward)
    return out


def _same_dtype(*ts: Tensor) -> None:
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"dtype mismatch: {ts[0].dtype} vs {t.dtype}")


# ---------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a: [..., m, k]`` and ``b: [k, n]`` or ``b: [..., k, n]``.

    Batched operands must have identical leading dimensions.
    """
    _same_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    flat = shared and A.ndim > 2

    def backward(g):
        ga = gb = None
        if flat:
            k, n = B.shape
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ B.T).reshape(A.shape)
            if b.requires_grad:
                gb = A.reshape(-1, k).T @ g2
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(B, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + B.shape[-1:]) if flat else A @ B
    return _emit("matmul", out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row bias of shape ``[a.shape[-1]]``."""
    _same_dtype(a, b)
    row_bias = b.data.ndim == 1 and a.data.ndim > 1 and b.shape[0] == a.shape[-1]
    if a.shape != b.shape and not row_bias:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def backward(g):
        gb = None
        if b.requires_grad:
            gb = g.reshape(-1, b.shape[0]).sum(axis=0) if row_bias else g
        return (g if a.requires_grad else None), gb

    return _emit("add", a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g * B if a.requires_grad else None), (g * A if b.requires_grad else None)

    return _emit("mul", A * B, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if x.data.ndim < 2:
            raise ShapeError("transpose needs >=2 dims")
        axes = list(range(x.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"bad permutation {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def row_softmax(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis.

    With ``causal=True`` the last two axes must be square and entry ``[i, j]``
    is excluded for ``j > i``.
    """
    z = x.data
    if causal:
        T = z.shape[-1]
        if z.ndim < 2 or z.shape[-2] != T:
            raise ShapeError(f"causal softmax needs square trailing dims, got {x.shape}")
        z = np.where(np.tri(T, dtype=bool), z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("row_softmax", y, (x,), backward)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize rows by their root mean square, then scale by ``weight``."""
    _same_dtype(x, weight)
    if weight.data.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm weight {weight.shape} does not match rows of {x.shape}")
    X, W = x.data, weight.data
    r = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
    xh = X * r

    def backward(g):
        gw = (g * xh).reshape(-1, W.shape[0]).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * W
            gx = r * (gxh - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx, gw

    return _emit("rms_norm", xh * W, (x, weight), backward)


def silu(x: Tensor) -> Tensor:
    X = x.data
    s = 1.0 / (1.0 + np.exp(-X))
    return _emit("silu", X * s, (x,), lambda g: (g * s * (1.0 + X * (1.0 - s)),))


def embed_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (``[n, d]``) for an integer array of ids."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    n, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")

    def backward(g):
        gt = np.zeros((n, d), dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _emit("embed_lookup", table.data[ids], (table,), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    Positions whose target equals ``ignore_index`` are left out of the mean.
    """
    targets = np.asarray(targets)
    Z = logits.data
    if Z.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    V = Z.shape[-1]
    Z2 = Z.reshape(-1, V)
    t = targets.reshape(-1)
    valid = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is ignored")
    if (t[valid] < 0).any() or (t[valid] >= V).any():
        raise IndexError("target id out of range")
    safe_t = np.where(valid, t, 0)
    shifted = Z2 - Z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    nll = logsum - shifted[np.arange(len(t)), safe_t]
    loss = np.asarray((nll * valid).sum() / count, dtype=Z.dtype)

    def backward(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(len(t)), safe_t] -= 1.0
        p *= (valid / count)[:, None]
        return ((g * p).reshape(Z.shape).astype(Z.dtype, copy=False),)

    return _emit("cross_entropy", loss, (logits,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=x.data.dtype),))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


# ---------------------------------------------------------------- gradients


def grad(loss: Tensor, wrt: Iterable[Tensor], tape: Tape | None = None) -> dict[str, Tensor]:
    """Gradients of scalar ``loss`` with respect to leaf tensors ``wrt``.

    Returns a mapping keyed by each leaf's ``name`` (leaves must be named).
    Leaves that were traced but do not influence ``loss`` get zero gradients.
    """
    wrt = list(wrt)
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if tape is None:
        if not _ACTIVE:
            raise RuntimeError("no tape: pass tape= or call inside the recording context")
        tape = _ACTIVE[-1]
    if id(loss) not in tape._outputs:
        raise ValueError("loss was not produced by a traced op")
    leaves = tape.leaves()
    for t in wrt:
        if t.name is None:
            raise ValueError("gradient targets must be named tensors")
        if id(t) not in leaves:
            raise KeyError(f"parameter {t.name!r} was not traced as a differentiable leaf")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None) if node.output != id(loss) else grads.get(node.output)
        if g is None:
            continue
        for t, gi in zip(node.operands, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        out[t.name] = Tensor.wrap(np.asarray(g, dtype=t.data.dtype).reshape(t.shape), name=t.name)
    return out


def finite_diff_check(fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
                      h: float = 1e-5, n_coords: int = 64, seed: int = 0) -> float:
    """Max relative error between traced gradients and central differences.

    ``fn`` maps named leaf tensors to a scalar loss tensor. Coordinates are
    sampled uniformly over all parameters; the error at a coordinate is
    ``|analytic - numeric| / (|analytic| + 1e-12)``.
    """
    names = list(params)
    leaves = {n: Tensor(params[n], requires_grad=True, name=n) for n in names}
    with Tape() as tape:
        loss = fn(leaves)
    analytic = grad(loss, leaves.values(), tape)

    sizes = np.array([params[n].size for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for k in flat:
        i = int(np.searchsorted(bounds, k, side="right"))
        name = names[i]
        j = int(k - (bounds[i] - sizes[i]))

        def at(delta):
            arr = np.array(params[name], copy=True)
            arr.reshape(-1)[j] += delta
            probe = {n: Tensor(arr if n == name else params[n], name=n) for n in names}
            return float(fn(probe).data)

        numeric = (at(h) - at(-h)) / (2 * h)
        a = float(analytic[name].data.reshape(-1)[j])
        worst = max(worst, abs(a - numeric) / (abs(a) + 1e-12))
    return worst
