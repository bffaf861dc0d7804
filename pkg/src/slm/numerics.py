"""Dense-tensor math with reverse-mode automatic differentiation.

Everything the encoder needs lives here: a minimal immutable Tensor, an
explicit gradient Tape, and a catalog of forward ops each carrying its exact
backward rule. There is deliberately no general broadcasting -- the only
shape-mixing op is row-wise bias addition -- so every backward rule stays
auditable by hand.

Batches of sequences are laid out as flattened blocks: a batch of B sequences
of padded length n is one [B*n, d] matrix, and the block-aware ops
(shift_blocks, masked_sum_blocks, ...) treat each run of n rows as one
sequence. Block reductions accumulate strictly in row order (via cumsum), so
appending padding rows to a block can never change the reduced value bitwise.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands with incompatible shapes; the message names both."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


# ---------------------------------------------------------------------------
# Precision
# ---------------------------------------------------------------------------

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32


def set_precision(name: str) -> None:
    """Set the global float precision ("f32" or "f64") for new tensors."""
    global _default_dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _default_dtype = _PRECISIONS[name]


def get_precision() -> str:
    return "f32" if _default_dtype is np.float32 else "f64"


def default_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch global precision (used by gradient checks)."""
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


class FlopCounter:
    """Accumulates deterministic per-op FLOP costs while active.

    Costs are fixed functions of operand shapes (see each op), so two runs
    over identical shapes always count identically, independent of hardware.
    Only forward ops count; data movement (concat, slice, shift, gather) is
    free by convention.
    """

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_active_flops: FlopCounter | None = None


@contextlib.contextmanager
def flop_counter():
    """Context manager yielding a FlopCounter that tracks enclosed ops."""
    global _active_flops
    if _active_flops is not None:
        raise RuntimeError("flop_counter contexts do not nest")
    counter = FlopCounter()
    _active_flops = counter
    try:
        yield counter
    finally:
        _active_flops = None


def _flops(n: int) -> None:
    if _active_flops is not None:
        _active_flops.add(n)


# ---------------------------------------------------------------------------
# Tensor and Tape
# ---------------------------------------------------------------------------


class Tensor:
    """Immutable dense array, optionally attached to the active tape.

    `data` is a read-only numpy array; `shape` mirrors it. A tensor detached
    from the active tape behaves as a constant: gradients never flow into it.
    """

    __slots__ = ("data", "_ref")

    def __init__(self, data: np.ndarray, _ref: tuple[int, int] | None = None):
        data.setflags(write=False)
        self.data = data
        self._ref = _ref  # (tape epoch, slot id) or None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        """Slot id on the tape this tensor was recorded on, if any."""
        return None if self._ref is None else self._ref[1]

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def tensor(values, dtype=None) -> Tensor:
    """Build a constant tensor (current precision unless dtype given)."""
    arr = np.array(values, dtype=dtype or _default_dtype)
    return Tensor(arr)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype))


class _Node:
    __slots__ = ("inputs", "outputs", "out_shapes", "backward")

    def __init__(self, inputs, outputs, out_shapes, backward):
        self.inputs = inputs        # tuple of slot ids; None marks a constant
        self.outputs = outputs      # tuple of slot ids
        self.out_shapes = out_shapes
        self.backward = backward    # tuple of out grads -> tuple of in grads


_tape_epochs = 0
_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Nodes are appended in execution order, so their order is already
    topological and the backward sweep is a single reverse pass. A tape is
    confined to one logical thread; tapes do not nest.
    """

    def __init__(self) -> None:
        global _tape_epochs
        _tape_epochs += 1
        self.epoch = _tape_epochs
        self.nodes: list[_Node] = []
        self._slots = 0
        self._watched: list[tuple[int, tuple[int, ...], np.dtype]] = []
        self._watched_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None

    def _new_slot(self) -> int:
        self._slots += 1
        return self._slots - 1

    def _slot_of(self, t: Tensor) -> int | None:
        if t._ref is not None and t._ref[0] == self.epoch:
            return t._ref[1]
        return None

    def watch(self, t: Tensor) -> Tensor:
        """Mark a tensor as a gradient leaf on this tape (idempotent)."""
        if not np.issubdtype(t.data.dtype, np.floating):
            raise TypeError(f"only float tensors can be watched, got {t.data.dtype}")
        if self._slot_of(t) is None:
            t._ref = (self.epoch, self._new_slot())
        slot = t._ref[1]
        if slot not in self._watched_ids:
            self._watched_ids.add(slot)
            self._watched.append((slot, t.shape, t.data.dtype))
        return t

    def gradients(self, loss: Tensor) -> "GradientMap":
        """Reverse-accumulate d(loss)/d(leaf) for every watched leaf."""
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        lid = self._slot_of(loss)
        if lid is None:
            raise ValueError("loss is not attached to this tape")
        acc: dict[int, np.ndarray] = {lid: np.ones((), dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            if not any(o in acc for o in node.outputs):
                continue
            out_grads = tuple(
                acc[o] if o in acc else np.zeros(s, dtype=loss.data.dtype)
                for o, s in zip(node.outputs, node.out_shapes)
            )
            in_grads = node.backward(out_grads)
            for slot, g in zip(node.inputs, in_grads):
                if slot is None or g is None:
                    continue
                if slot in acc:
                    acc[slot] = acc[slot] + g
                else:
                    acc[slot] = g
            for o in node.outputs:  # grads of interior slots are never re-read
                if o not in self._watched_ids:
                    acc.pop(o, None)
        grads = {}
        for slot, shape, dtype in self._watched:
            g = acc.get(slot)
            grads[slot] = g if g is not None else np.zeros(shape, dtype=dtype)
        return GradientMap(self.epoch, grads)


class GradientMap:
    """Gradients keyed by tape slot; index with the watched tensors."""

    def __init__(self, epoch: int, grads: dict[int, np.ndarray]):
        self._epoch = epoch
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t._ref is None or t._ref[0] != self._epoch or t._ref[1] not in self._grads:
            raise KeyError("tensor was not watched on the tape these gradients came from")
        return self._grads[t._ref[1]]

    def get(self, t: Tensor, default=None):
        try:
            return self[t]
        except KeyError:
            return default

    def __len__(self) -> int:
        return len(self._grads)


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Gradient map of a scalar loss for all leaves watched on `tape`."""
    return tape.gradients(loss)


def _record(inputs: Sequence[Tensor], out_arrays: Sequence[np.ndarray],
            backward_fn: Callable) -> list[Tensor]:
    """Wrap op results as Tensors, recording a tape node if any input is live."""
    tape = _active_tape
    outs = [Tensor(a) for a in out_arrays]
    if tape is not None:
        in_slots = tuple(tape._slot_of(t) for t in inputs)
        if any(s is not None for s in in_slots):
            out_slots = tuple(tape._new_slot() for _ in outs)
            for t, s in zip(outs, out_slots):
                t._ref = (tape.epoch, s)
            tape.nodes.append(_Node(in_slots, out_slots,
                                    tuple(a.shape for a in out_arrays), backward_fn))
    return outs


# ---------------------------------------------------------------------------
# Op catalog
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _flops(2 * a.shape[0] * a.shape[1] * b.shape[1])
    ad, bd = a.data, b.data

    def bwd(g):
        (go,) = g
        return go @ bd.T, ad.T @ go

    return _record((a, b), (out,), bwd)[0]


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    _flops(a.size)
    return _record((a, b), (a.data + b.data,), lambda g: (g[0], g[0]))[0]


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    _flops(a.size)
    return _record((a, b), (a.data - b.data,), lambda g: (g[0], -g[0]))[0]


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    _flops(a.size)
    ad, bd = a.data, b.data
    return _record((a, b), (ad * bd,), lambda g: (g[0] * bd, g[0] * ad))[0]


def add_bias(mat: Tensor, vec: Tensor) -> Tensor:
    """Row-wise bias: mat[i, :] + vec. The one permitted broadcast."""
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[1] != vec.shape[0]:
        raise ShapeError(f"add_bias: {mat.shape} + {vec.shape}")
    _flops(mat.size)
    return _record((mat, vec), (mat.data + vec.data,),
                   lambda g: (g[0], g[0].sum(axis=0)))[0]


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    _flops(t.size)
    return _record((t,), (t.data * c,), lambda g: (g[0] * c,))[0]


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis (default) or along rows (axis=0)."""
    if len(ts) < 2:
        raise ValueError("concat needs at least two tensors")
    nd = ts[0].data.ndim
    if axis not in (-1, nd - 1, 0):
        raise ShapeError(f"concat: unsupported axis {axis} for {nd}-d tensors")
    ax = axis if axis != -1 else nd - 1
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if t.data.ndim != nd or [s for i, s in enumerate(other) if i != ax] != \
                [s for i, s in enumerate(ref) if i != ax]:
            raise ShapeError(f"concat: {ts[0].shape} vs {t.shape} along axis {ax}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g[0], bounds, axis=ax))

    return _record(tuple(ts), (out,), bwd)[0]


def split_cols(t: Tensor, parts: int) -> list[Tensor]:
    """Split a [n, parts*d] matrix into `parts` equal [n, d] slices."""
    if t.data.ndim != 2 or t.shape[1] % parts != 0:
        raise ShapeError(f"split_cols: cannot split {t.shape} into {parts} column blocks")
    pieces = np.split(t.data, parts, axis=1)

    def bwd(g):
        return (np.concatenate(g, axis=1),)

    return _record((t,), tuple(np.ascontiguousarray(p) for p in pieces), bwd)


def transpose(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {t.shape}")
    return _record((t,), (np.ascontiguousarray(t.data.T),),
                   lambda g: (np.ascontiguousarray(g[0].T),))[0]


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    with np.errstate(over="ignore"):
        z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    _flops(4 * t.size)
    return _record((t,), (out,), lambda g: (g[0] * out * (1.0 - out),))[0]


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)
    _flops(6 * t.size)
    return _record((t,), (out,), lambda g: (g[0] * (1.0 - out * out),))[0]


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form), used by the attention baseline."""
    x = t.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)
    _flops(10 * t.size)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g[0] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _record((t,), (out.astype(x.dtype),), bwd)[0]


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup out[i] = table[indices[i]] (embedding gather / row select)."""
    idx = np.asarray(indices)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: table {table.shape}, indices shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range [0, {table.shape[0]}) "
            f"(min {idx.min()}, max {idx.max()})")
    out = table.data[idx]
    shape = table.shape
    dt = table.data.dtype

    def bwd(g):
        acc = np.zeros(shape, dtype=dt)
        np.add.at(acc, idx, g[0])
        return (acc,)

    return _record((table,), (out,), bwd)[0]


def shift_blocks(t: Tensor, block: int, offset: int) -> Tensor:
    """Shift rows within each length-`block` run, zero-filling at block edges.

    offset=+1 gives out[i] = in[i-1] (left neighbor), offset=-1 the right
    neighbor. Blocks never leak into each other, which is exactly the
    zero-vector boundary convention at sequence ends.
    """
    if t.data.ndim != 2 or t.shape[0] % block != 0:
        raise ShapeError(f"shift_blocks: {t.shape} not divisible into blocks of {block}")
    if offset not in (1, -1):
        raise ValueError("shift_blocks offset must be +1 or -1")
    nblocks = t.shape[0] // block
    x = t.data.reshape(nblocks, block, t.shape[1])
    out = np.zeros_like(x)
    if offset == 1:
        out[:, 1:] = x[:, :-1]
    else:
        out[:, :-1] = x[:, 1:]
    out = out.reshape(t.shape)

    def bwd(g):
        go = g[0].reshape(nblocks, block, t.shape[1])
        back = np.zeros_like(go)
        if offset == 1:
            back[:, :-1] = go[:, 1:]
        else:
            back[:, 1:] = go[:, :-1]
        return (back.reshape(t.shape),)

    return _record((t,), (out,), bwd)[0]


def repeat_block_rows(t: Tensor, block: int) -> Tensor:
    """Repeat each row of a [B, d] matrix `block` times -> [B*block, d]."""
    if t.data.ndim != 2:
        raise ShapeError(f"repeat_block_rows expects a matrix, got {t.shape}")
    nb, d = t.shape
    out = np.repeat(t.data, block, axis=0)

    def bwd(g):
        return (g[0].reshape(nb, block, d).sum(axis=1),)

    return _record((t,), (out,), bwd)[0]


def _check_block_mask(t: Tensor, mask: np.ndarray, block: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if t.data.ndim != 2 or mask.shape != (t.shape[0],):
        raise ShapeError(f"block reduce: matrix {t.shape} with mask shape {mask.shape}")
    if t.shape[0] % block != 0:
        raise ShapeError(f"block reduce: {t.shape[0]} rows not divisible by block {block}")
    return mask


def masked_sum_blocks(t: Tensor, mask, block: int) -> Tensor:
    """Per-block sum over real rows -> [B, d].

    Accumulates strictly in row order so appending padding rows to a block
    leaves the sum bit-identical.
    """
    mask = _check_block_mask(t, mask, block)
    nb, d = t.shape[0] // block, t.shape[1]
    contrib = t.data * mask[:, None]
    out = np.cumsum(contrib.reshape(nb, block, d), axis=1)[:, -1]
    _flops(2 * t.size)

    def bwd(g):
        return (np.repeat(g[0], block, axis=0) * mask[:, None],)

    return _record((t,), (np.ascontiguousarray(out),), bwd)[0]


def masked_mean_blocks(t: Tensor, mask, block: int) -> Tensor:
    """Per-block mean over real rows -> [B, d]; every block needs a real row."""
    mask = _check_block_mask(t, mask, block)
    nb, d = t.shape[0] // block, t.shape[1]
    counts = mask.reshape(nb, block).sum(axis=1)
    if (counts == 0).any():
        raise ValueError(f"masked mean: block {int(np.argmin(counts))} has no real rows")
    contrib = t.data * mask[:, None]
    sums = np.cumsum(contrib.reshape(nb, block, d), axis=1)[:, -1]
    inv = (1.0 / counts).astype(t.data.dtype)
    out = sums * inv[:, None]
    _flops(2 * t.size + nb * d)

    def bwd(g):
        return (np.repeat(g[0] * inv[:, None], block, axis=0) * mask[:, None],)

    return _record((t,), (np.ascontiguousarray(out),), bwd)[0]


def masked_mean_rows(t: Tensor, mask) -> Tensor:
    """Mean over real rows of one sequence ([n, d] -> [d])."""
    out2 = masked_mean_blocks(t, mask, block=t.shape[0])
    return reshape_rows(out2)


def reshape_rows(t: Tensor) -> Tensor:
    """[1, d] <-> [d] reshape (pure view change, shared backward)."""
    if t.data.ndim == 2 and t.shape[0] == 1:
        new = t.data.reshape(t.shape[1])
    elif t.data.ndim == 1:
        new = t.data.reshape(1, t.shape[0])
    else:
        raise ShapeError(f"reshape_rows: expected [1, d] or [d], got {t.shape}")
    old_shape = t.shape
    return _record((t,), (new.copy(),), lambda g: (g[0].reshape(old_shape),))[0]


def softmax_over_group(gates: Sequence[Tensor]) -> list[Tensor]:
    """Per-coordinate softmax across k same-shaped tensors (k >= 2).

    Coordinate j of the outputs is softmax([g1[j], ..., gk[j]]); each
    coordinate's outputs are nonnegative and sum to one.
    """
    k = len(gates)
    if k < 2:
        raise ValueError("softmax_over_group needs at least two members")
    for g in gates[1:]:
        _same_shape(gates[0], g, "softmax_over_group")
    stack = np.stack([g.data for g in gates])
    mx = stack.max(axis=0)
    exps = np.exp(stack - mx)
    probs = exps / exps.sum(axis=0)
    probs = probs.astype(stack.dtype)
    _flops(4 * k * gates[0].size)

    def bwd(g):
        gs = np.stack(g)
        inner = (probs * gs).sum(axis=0)
        d = probs * (gs - inner)
        return tuple(d[i] for i in range(k))

    return _record(tuple(gates), tuple(probs[i] for i in range(k)), bwd)


def masked_group_softmax_blocks(tok: Tensor, own: Tensor, mask, block: int
                                ) -> tuple[Tensor, Tensor]:
    """Per-block, per-coordinate softmax over {real token rows} + {own row}.

    tok is [B*block, d], own is [B, d]. Outputs share those shapes; padded
    token rows get exact zeros and are excluded from the normalization, so
    real outputs plus the own-row output sum to one per coordinate.
    """
    mask = _check_block_mask(tok, mask, block)
    if own.data.ndim != 2 or own.shape != (tok.shape[0] // block, tok.shape[1]):
        raise ShapeError(f"group softmax: own {own.shape} vs tok {tok.shape} "
                         f"with block {block}")
    nb, d = own.shape
    tok3 = tok.data.reshape(nb, block, d)
    m3 = mask.reshape(nb, block, 1)
    neg_inf = np.array(-np.inf, dtype=tok.data.dtype)
    mx_tok = np.max(np.where(m3, tok3, neg_inf), axis=1)
    mx = np.maximum(mx_tok, own.data)
    e_tok = np.where(m3, np.exp(tok3 - mx[:, None, :]), 0.0).astype(tok.data.dtype)
    e_own = np.exp(own.data - mx)
    denom = np.cumsum(e_tok, axis=1)[:, -1] + e_own
    p_tok = (e_tok / denom[:, None, :]).reshape(tok.shape)
    p_own = e_own / denom
    _flops(4 * (tok.size + own.size))

    def bwd(g):
        g_tok, g_own = g
        inner = np.cumsum((p_tok * g_tok).reshape(nb, block, d), axis=1)[:, -1] \
            + p_own * g_own
        d_tok = p_tok * (g_tok - np.repeat(inner, block, axis=0))
        d_own = p_own * (g_own - inner)
        return d_tok, d_own

    outs = _record((tok, own), (np.ascontiguousarray(p_tok), p_own), bwd)
    return outs[0], outs[1]


def softmax_last(t: Tensor) -> Tensor:
    """Softmax along the last axis (vocabulary axis / attention rows)."""
    x = t.data
    mx = x.max(axis=-1, keepdims=True)
    e = np.exp(x - mx)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)
    _flops(4 * t.size)

    def bwd(g):
        go = g[0]
        return (p * (go - (p * go).sum(axis=-1, keepdims=True)),)

    return _record((t,), (p,), bwd)[0]


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true labels ([m, V] logits -> scalar)."""
    lab = np.asarray(labels)
    if logits.data.ndim != 2 or lab.ndim != 1 or lab.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels shape {lab.shape}")
    if lab.size == 0:
        raise ValueError("cross_entropy: no labels")
    if lab.min() < 0 or lab.max() >= logits.shape[1]:
        raise IndexError(f"cross_entropy: label out of range [0, {logits.shape[1]})")
    x = logits.data
    mx = x.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(x - mx).sum(axis=1))
    rows = np.arange(lab.shape[0])
    losses = lse - x[rows, lab]
    out = np.array(losses.mean(), dtype=x.dtype)
    _flops(5 * logits.size)
    m = lab.shape[0]

    def bwd(g):
        p = np.exp(x - mx)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, lab] -= 1.0
        return (p * (g[0] / m),)

    return _record((logits,), (out,), bwd)[0]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Accepts a vector [d] or a matrix of row vectors [n, d]; gain and bias are
    [d]. Differentiable through all three tensor inputs.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xd = x.data if x.data.ndim == 2 else x.data.reshape(1, d)
    mu = xd.mean(axis=1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = (xhat * gain.data + bias.data).astype(xd.dtype).reshape(x.shape)
    _flops(8 * x.size)

    def bwd(g):
        go = g[0].reshape(xd.shape)
        d_gain = (go * xhat).sum(axis=0)
        d_bias = go.sum(axis=0)
        d_xhat = go * gain.data
        dx = inv * (d_xhat - d_xhat.mean(axis=1, keepdims=True)
                    - xhat * (d_xhat * xhat).mean(axis=1, keepdims=True))
        return dx.reshape(x.shape), d_gain, d_bias

    return _record((x, gain, bias), (out,), bwd)[0]


def total_sum(t: Tensor) -> Tensor:
    """Sum of all entries -> scalar (test/loss plumbing)."""
    out = np.array(t.data.sum(), dtype=t.data.dtype)
    _flops(t.size)
    shape, dt = t.shape, t.data.dtype
    return _record((t,), (out,), lambda g: (np.full(shape, g[0], dtype=dt),))[0]


def op_catalog() -> dict[str, Callable]:
    """The required forward/backward operation set, by name."""
    return {
        "matmul": matmul,
        "add": add,
        "sub": sub,
        "mul": mul,
        "concat": concat,
        "sigmoid": sigmoid,
        "tanh": tanh,
        "gather_rows": gather_rows,
        "masked_mean_rows": masked_mean_rows,
        "softmax_last": softmax_last,
        "cross_entropy_logits": cross_entropy_logits,
    }


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], params: Sequence[Tensor],
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f(*params)` must return a scalar Tensor built from taped ops. Requires
    64-bit parameters; finite differences are meaningless at 32 bits.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValueError(f"step {step} outside [1e-6, 1e-4]")
    for i, p in enumerate(params):
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 params; param {i} is {p.data.dtype}")

    with Tape() as tape:
        for p in params:
            tape.watch(p)
        loss = f(*params)
    grads = backward(tape, loss)

    def eval_loss() -> float:
        out = f(*params)
        return float(out.data)

    worst = 0.0
    for pi, p in enumerate(params):
        analytic = grads[p]
        p.data.setflags(write=True)
        flat = p.data.reshape(-1)
        ga = analytic.reshape(-1)
        for j in range(flat.shape[0]):
            orig = flat[j]
            flat[j] = orig + step
            up = eval_loss()
            flat[j] = orig - step
            down = eval_loss()
            flat[j] = orig
            diff = (up - down) / (2.0 * step)
            if not (math.isfinite(diff) and math.isfinite(float(ga[j]))):
                raise NumericError(
                    f"non-finite gradient at param {pi}, coordinate {j}: "
                    f"analytic {ga[j]}, difference {diff}")
            err = abs(float(ga[j]) - diff) / max(abs(float(ga[j])), abs(diff), 1e-8)
            worst = max(worst, err)
    return worst
