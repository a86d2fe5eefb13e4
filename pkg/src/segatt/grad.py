"""Minimal reverse-mode autodiff over numpy float64 arrays.

Ops are coarse (a whole LSTM cell or a masked softmax is one tape node) and
carry hand-written backward rules.  Recording only happens inside an active
:class:`Tape`; outside of one the same functions run as plain numpy code,
which is what the decoders use.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named, optionally trainable tensor owned by a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    outputs: tuple[Tensor, ...]
    backward: Callable[[], None]


_active = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_active, "tape", None)


class Tape:
    """Records op nodes while active; ``backward`` replays them in reverse.

    One tape per sequence: lengths vary, so the graph is rebuilt each time.
    Tapes are thread-local and never shared.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _current_tape()
        _active.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _active.tape = self._prev

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if any(o.grad is not None for o in node.outputs):
                node.backward()


def _record(inputs: Sequence[Tensor], outputs: tuple[Tensor, ...], backward) -> bool:
    tape = _current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return False
    for o in outputs:
        o.requires_grad = True
    tape.nodes.append(_Node(outputs, backward))
    return True


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _g(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ W + b`` for ``x`` of rank 1 or 2 and ``W`` of rank 1 or 2."""
    if x.data.shape[-1] != W.data.shape[0]:
        raise DimensionError(f"linear: cannot multiply x{list(x.shape)} by W{list(W.shape)}")
    y = x.data @ W.data
    if b is not None:
        if W.data.ndim == 1 and b.data.size == 1:
            y = y + b.data.reshape(())
        elif W.data.ndim == 2 and b.data.shape == y.shape[-1:]:
            y = y + b.data
        else:
            raise DimensionError(f"linear: bias b{list(b.shape)} does not match output {list(y.shape)}")
    out = Tensor(y)

    def backward():
        gy = out.grad
        if x.requires_grad:
            if W.data.ndim == 1:
                gx = np.multiply.outer(gy, W.data)
            else:
                gx = gy @ W.data.T
            _acc(x, gx)
        if W.requires_grad:
            if x.data.ndim == 1:
                gW = np.multiply.outer(x.data, gy)
            else:
                gW = x.data.T @ gy
            _acc(W, gW)
        if b is not None and b.requires_grad:
            if W.data.ndim == 1:
                gb = np.sum(gy)
            else:
                gb = gy.sum(axis=0) if gy.ndim == 2 else gy
            _acc(b, np.reshape(gb, b.data.shape))

    inputs = [x, W] + ([b] if b is not None else [])
    _record(inputs, (out,), backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-shape row broadcast over ``a``."""
    if a.shape != b.shape and a.shape[-b.data.ndim:] != b.shape:
        raise DimensionError(f"add: shapes {list(a.shape)} and {list(b.shape)} are incompatible")
    out = Tensor(a.data + b.data)

    def backward():
        gy = out.grad
        _acc(a, gy)
        if b.requires_grad:
            gb = gy
            while gb.ndim > b.data.ndim:
                gb = gb.sum(axis=0)
            _acc(b, gb)

    _record([a, b], (out,), backward)
    return out


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or same-shape constant array."""
    out = Tensor(a.data * c)
    _record([a], (out,), lambda: _acc(a, out.grad * c))
    return out


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors (typically scalar loss terms)."""
    if not terms:
        return Tensor(0.0)
    total = terms[0].data.copy()
    for t in terms[1:]:
        total = total + t.data
    out = Tensor(total)

    def backward():
        for t in terms:
            _acc(t, out.grad)

    _record(terms, (out,), backward)
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-1 tensors (or the last axis of equal-rank tensors)."""
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    sizes = [p.data.shape[-1] for p in parts]

    def backward():
        off = 0
        for p, n in zip(parts, sizes):
            _acc(p, out.grad[..., off:off + n])
            off += n

    _record(parts, (out,), backward)
    return out


def stack(rows: Sequence[Tensor]) -> Tensor:
    out = Tensor(np.stack([r.data for r in rows]))

    def backward():
        for i, r in enumerate(rows):
            _acc(r, out.grad[i])

    _record(rows, (out,), backward)
    return out


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` (0-based, half-open) of a rank-2 tensor."""
    out = Tensor(x.data[lo:hi])

    def backward():
        g = np.zeros_like(x.data)
        g[lo:hi] = out.grad
        _acc(x, g)

    _record([x], (out,), backward)
    return out


def reverse_rows(x: Tensor) -> Tensor:
    out = Tensor(x.data[::-1].copy())
    _record([x], (out,), lambda: _acc(x, out.grad[::-1]))
    return out


def embed(table: Tensor, index: int) -> Tensor:
    if not 0 <= index < table.shape[0]:
        raise IndexError(f"embedding index {index} out of range [0, {table.shape[0]})")
    out = Tensor(table.data[index].copy())

    def backward():
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        table.grad[index] += out.grad

    _record([table], (out,), backward)
    return out


def pick(x: Tensor, index: int) -> Tensor:
    out = Tensor(x.data[index])

    def backward():
        g = np.zeros_like(x.data)
        g[index] = out.grad
        _acc(x, g)

    _record([x], (out,), backward)
    return out


def total(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    _record([x], (out,), lambda: _acc(x, np.full_like(x.data, out.grad)))
    return out


# --------------------------------------------------------------------------
# elementwise


def tanh_op(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    _record([x], (out,), lambda: _acc(x, out.grad * (1.0 - y * y)))
    return out


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_op(x: Tensor) -> Tensor:
    y = sigmoid_np(x.data)
    out = Tensor(y)
    _record([x], (out,), lambda: _acc(x, out.grad * y * (1.0 - y)))
    return out


def exp_op(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    _record([x], (out,), lambda: _acc(x, out.grad * y))
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` without overflow; ``log(1 - sigmoid(x)) = log_sigmoid(-x)``."""
    z = x.data
    y = -np.logaddexp(0.0, -z)
    out = Tensor(y)
    _record([x], (out,), lambda: _acc(x, out.grad * sigmoid_np(-z)))
    return out


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


# --------------------------------------------------------------------------
# normalisation


def softmax_op(e: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out positions get exactly zero."""
    z = e.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise InvalidMaskError("softmax_op: every position is masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p = p / p.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward():
        gy = out.grad
        _acc(e, p * (gy - (gy * p).sum(axis=-1, keepdims=True)))

    _record([e], (out,), backward)
    return out


def log_softmax(e: Tensor) -> Tensor:
    z = e.data - e.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(y)

    def backward():
        gy = out.grad
        _acc(e, gy - np.exp(y) * gy.sum(axis=-1, keepdims=True))

    _record([e], (out,), backward)
    return out


def maxout_op(x: Tensor) -> Tensor:
    """Max over adjacent pairs of the last axis (pool size 2).

    On ties the gradient goes to the lower index of the pair.
    """
    n = x.data.shape[-1]
    if n % 2:
        raise DimensionError(f"maxout_op: last dimension {n} is odd")
    pairs = x.data.reshape(x.data.shape[:-1] + (n // 2, 2))
    take_second = pairs[..., 1] > pairs[..., 0]
    y = np.where(take_second, pairs[..., 1], pairs[..., 0])
    out = Tensor(y)

    def backward():
        g = np.zeros_like(pairs)
        g[..., 0] = np.where(take_second, 0.0, out.grad)
        g[..., 1] = np.where(take_second, out.grad, 0.0)
        _acc(x, g.reshape(x.data.shape))

    _record([x], (out,), backward)
    return out


def maxpool_time(x: Tensor, k: int) -> Tensor:
    """Max-pool rows of ``x[T, D]`` in blocks of ``k``; remainder rows dropped."""
    if k == 1:
        return x
    T = x.shape[0] // k
    blocks = x.data[: T * k].reshape(T, k, -1)
    idx = blocks.argmax(axis=1)  # first max on ties
    y = np.take_along_axis(blocks, idx[:, None, :], axis=1)[:, 0, :]
    out = Tensor(y)

    def backward():
        g = np.zeros_like(blocks)
        np.put_along_axis(g, idx[:, None, :], out.grad[:, None, :], axis=1)
        full = np.zeros_like(x.data)
        full[: T * k] = g.reshape(T * k, -1)
        _acc(x, full)

    _record([x], (out,), backward)
    return out


# --------------------------------------------------------------------------
# LSTM


@dataclass
class LSTMParams:
    """Weights of one LSTM cell; gate column order is input, forget, cell, output."""

    W_x: Parameter
    W_h: Parameter
    b: Parameter

    @property
    def hidden(self) -> int:
        return self.W_h.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W_x, self.W_h, self.b]


def lstm_cell_np(z_x: np.ndarray, h: np.ndarray, c: np.ndarray, W_h: np.ndarray):
    """Forward LSTM cell on raw arrays; returns ``(h', c', gate activations)``."""
    d = W_h.shape[0]
    z = z_x + h @ W_h
    act = 0.5 + 0.5 * np.tanh(0.5 * z)  # sigmoid, overflow-free
    i = act[:d]
    f = act[d:2 * d]
    g = np.tanh(z[2 * d:3 * d])
    o = act[3 * d:]
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, g, o, tc)


def lstm_cell(z_x: Tensor, h: Tensor, c: Tensor, W_h: Tensor) -> tuple[Tensor, Tensor]:
    """LSTM recurrence given the precomputed input projection ``z_x = x W_x + b``."""
    d = W_h.shape[0]
    if z_x.shape != (4 * d,) or h.shape != (d,) or c.shape != (d,):
        raise DimensionError(
            f"lstm_cell: gate input {list(z_x.shape)}, h {list(h.shape)}, c {list(c.shape)} "
            f"do not match hidden size {d}"
        )
    h_new, c_new, (i, f, g, o, tc) = lstm_cell_np(z_x.data, h.data, c.data, W_h.data)
    out_h, out_c = Tensor(h_new), Tensor(c_new)

    def backward():
        gh = _g(out_h)
        gc = _g(out_c) + gh * o * (1.0 - tc * tc)
        dz = np.empty(4 * d)
        dz[:d] = gc * g * i * (1.0 - i)
        dz[d:2 * d] = gc * c.data * f * (1.0 - f)
        dz[2 * d:3 * d] = gc * i * (1.0 - g * g)
        dz[3 * d:] = gh * tc * o * (1.0 - o)
        _acc(z_x, dz)
        _acc(h, dz @ W_h.data.T)
        _acc(c, gc * f)
        _acc(W_h, np.outer(h.data, dz))

    _record([z_x, h, c, W_h], (out_h, out_c), backward)
    return out_h, out_c


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], params: LSTMParams) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != params.W_x.shape[0]:
        raise DimensionError(f"lstm_step: input {list(x.shape)} vs W_x {list(params.W_x.shape)}")
    h, c = state
    return lstm_cell(linear(x, params.W_x, params.b), h, c, params.W_h)


def lstm_scan(zx: Tensor, W_h: Tensor, reverse: bool = False) -> Tensor:
    """Whole-sequence LSTM over precomputed input projections ``zx[T, 4d]``.

    One tape node with a hand-written backward pass through time; equivalent
    to chaining :func:`lstm_cell` from a zero state.
    """
    d = W_h.shape[0]
    T = zx.shape[0]
    if zx.shape != (T, 4 * d):
        raise DimensionError(f"lstm_scan: gate inputs {list(zx.shape)} do not match hidden size {d}")
    order = range(T - 1, -1, -1) if reverse else range(T)
    H = np.zeros((T, d))
    h_prev = np.zeros((T, d))
    c_prev = np.zeros((T, d))
    gates = np.zeros((T, 4 * d))
    tcs = np.zeros((T, d))
    h = np.zeros(d)
    c = np.zeros(d)
    Z, Wh = zx.data, W_h.data
    for t in order:
        h_prev[t] = h
        c_prev[t] = c
        h, c, (i, f, g, o, tc) = lstm_cell_np(Z[t], h, c, Wh)
        gates[t, :d], gates[t, d:2 * d], gates[t, 2 * d:3 * d], gates[t, 3 * d:] = i, f, g, o
        tcs[t] = tc
        H[t] = h
    out = Tensor(H)

    def backward():
        gH = out.grad
        dZ = np.zeros((T, 4 * d))
        dh = np.zeros(d)
        dc = np.zeros(d)
        WhT = Wh.T
        for t in reversed(order):
            i, f, g, o = gates[t, :d], gates[t, d:2 * d], gates[t, 2 * d:3 * d], gates[t, 3 * d:]
            tc = tcs[t]
            gh = gH[t] + dh
            gc = dc + gh * o * (1.0 - tc * tc)
            dz = dZ[t]
            dz[:d] = gc * g * i * (1.0 - i)
            dz[d:2 * d] = gc * c_prev[t] * f * (1.0 - f)
            dz[2 * d:3 * d] = gc * i * (1.0 - g * g)
            dz[3 * d:] = gh * tc * o * (1.0 - o)
            dh = dz @ WhT
            dc = gc * f
        _acc(zx, dZ)
        _acc(W_h, h_prev.T @ dZ)

    _record([zx, W_h], (out,), backward)
    return out


def lstm_sequence(xs: Tensor, params: LSTMParams, reverse: bool = False) -> Tensor:
    """Run an LSTM over rows of ``xs[T, in]`` from a zero state; returns ``[T, d]``."""
    if xs.shape[-1] != params.W_x.shape[0]:
        raise DimensionError(f"lstm_sequence: input {list(xs.shape)} vs W_x {list(params.W_x.shape)}")
    return lstm_scan(linear(xs, params.W_x, params.b), params.W_h, reverse)


def split_rows(x: Tensor) -> list[Tensor]:
    """Split a rank-2 tensor into row tensors with a single shared backward node."""
    rows = [Tensor(r) for r in x.data]

    def backward():
        _acc(x, np.stack([_g(r) for r in rows]))

    _record([x], tuple(rows), backward)
    return rows


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Sequence[Parameter],
    grads: dict[str, np.ndarray],
    moments: AdamMoments,
    hyper: AdamHyper,
) -> None:
    """One in-place Adam update with bias correction."""
    moments.step += 1
    t = moments.step
    b1, b2 = hyper.beta1, hyper.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        m = moments.m.get(p.name)
        v = moments.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise DimensionError(f"adam_step: moment shape {m.shape} != parameter {p.name} {p.data.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        moments.m[p.name] = m
        moments.v[p.name] = v
        p.data = p.data - hyper.lr * (m / corr1) / (np.sqrt(v / corr2) + hyper.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm and norm > 0:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5, points: int = 3) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place).

    ``points=5`` uses the fourth-order stencil, which tolerates a larger
    ``eps`` and so loses less to round-off on small gradients.
    """
    if points not in (3, 5):
        raise ValueError("points must be 3 or 5")
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]

        def at(d):
            x[idx] = old + d
            return f()

        if points == 3:
            g[idx] = (at(eps) - at(-eps)) / (2 * eps)
        else:
            g[idx] = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
        x[idx] = old
    return g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
