"""Segment length models: static per-label table and the framewise neural model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from segatt import grad as G
from segatt.grad import Parameter, Tensor
from segatt.model import BLANK, EncoderOutput, SegmentationError, validate_boundaries

NEG_INF = -math.inf


# --------------------------------------------------------------------------
# static model


@dataclass
class StaticLengthTable:
    """``p(dt | a) = exp(-|mu_a - dt|) / Z_a`` on ``1 <= dt <= delta_max``."""

    mu: np.ndarray
    delta_max: int
    _log_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.delta_max < 1:
            raise ValueError(f"delta_max must be >= 1, got {self.delta_max}")
        dt = np.arange(1, self.delta_max + 1, dtype=np.float64)
        energies = -np.abs(self.mu[:, None] - dt[None, :])
        self._log_table = energies - np.log(self.Z)[:, None]

    @property
    def Z(self) -> np.ndarray:
        dt = np.arange(1, self.delta_max + 1, dtype=np.float64)
        return np.exp(-np.abs(self.mu[:, None] - dt[None, :])).sum(axis=1)

    @property
    def vocab_size(self) -> int:
        return len(self.mu)

    def log_prob(self, a: int, dt: int) -> float:
        if not 1 <= dt <= self.delta_max:
            return NEG_INF
        return float(self._log_table[a, dt - 1])

    def log_probs(self) -> np.ndarray:
        """``[V, delta_max]`` table; column ``k`` is ``dt = k + 1``."""
        return self._log_table

    @classmethod
    def estimate(
        cls,
        alignments: Iterable[tuple[Sequence[int], Sequence[int]]],
        vocab_size: int,
        delta_max: int = 20,
    ) -> "StaticLengthTable":
        """Per-label mean segment length from ``(labels, boundaries)`` pairs.

        Labels never observed fall back to the mean over all segments.
        """
        sums = np.zeros(vocab_size)
        counts = np.zeros(vocab_size)
        for labels, bounds in alignments:
            prev = 0
            for a, t in zip(labels, bounds):
                sums[a] += t - prev
                counts[a] += 1
                prev = t
        if counts.sum() == 0:
            raise ValueError("cannot estimate a static length model from an empty corpus")
        global_mean = sums.sum() / counts.sum()
        mu = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
        return cls(mu, delta_max)


def static_estimate(alignments, vocab_size: int, delta_max: int = 20) -> StaticLengthTable:
    return StaticLengthTable.estimate(alignments, vocab_size, delta_max)


def static_log_prob(table: StaticLengthTable, a: int, dt: int) -> float:
    return table.log_prob(a, dt)


# --------------------------------------------------------------------------
# blank-encoded framewise alignment


def encode_blank_alignment(labels: Sequence[int], boundaries: Sequence[int], T: int) -> list[int]:
    """Framewise symbols for frames ``1..T``: the label at its end frame, blank elsewhere."""
    if len(labels) != len(boundaries):
        raise SegmentationError(f"{len(labels)} labels but {len(boundaries)} boundaries")
    validate_boundaries(boundaries, T)
    omega = [BLANK] * T
    for a, t in zip(labels, boundaries):
        if a == BLANK:
            raise ValueError("the blank id cannot be used as a label")
        omega[t - 1] = a
    return omega


def decode_blank_alignment(omega: Sequence[int]) -> tuple[list[int], list[int]]:
    labels, bounds = [], []
    for t, sym in enumerate(omega, start=1):
        if sym != BLANK:
            labels.append(int(sym))
            bounds.append(t)
    return labels, bounds


def shifted_inputs(omega: Sequence[int]) -> list[int]:
    """Inputs ``omega_0 .. omega_{T-1}`` seen at frames ``1..T`` (``omega_0`` is blank)."""
    return [BLANK] + list(omega[:-1])


# --------------------------------------------------------------------------
# neural model


class NeuralLengthModel:
    """Framewise segment-end probability ``q_t`` from an LSTM over frames.

    At frame ``t`` the LSTM consumes ``h_t`` and the embedding of the
    alignment symbol of frame ``t - 1``; ``q_t = sigmoid(w . tanh(state) + b)``.
    """

    def __init__(self, embed: Parameter, W_h_in: Parameter, W_emb: Parameter, W_h: Parameter,
                 b: Parameter, w_out: Parameter, b_out: Parameter):
        self.embed = embed
        self.W_h_in = W_h_in
        self.W_emb = W_emb
        self.W_h = W_h
        self.b = b
        self.w_out = w_out
        self.b_out = b_out

    @property
    def hidden(self) -> int:
        return self.W_h.shape[0]

    def teacher_logits(self, enc: EncoderOutput, omega_prev: Sequence[int]) -> Tensor:
        """Logits of ``q_1..q_T`` given the full (teacher) alignment inputs."""
        if len(omega_prev) != enc.T:
            raise SegmentationError(f"{len(omega_prev)} alignment inputs for T={enc.T}")
        zh = G.linear(enc.h, self.W_h_in, self.b)
        ze = G.linear(G.stack([G.embed(self.embed, s) for s in omega_prev]), self.W_emb)
        states = G.lstm_scan(G.add(zh, ze), self.W_h)
        return G.linear(G.tanh_op(states), self.w_out, self.b_out)

    # fast path for search; no tape

    def _prepared(self, enc: EncoderOutput) -> tuple[np.ndarray, np.ndarray]:
        cached = enc.cache.get("len")
        if cached is None:
            zh = enc.h.data @ self.W_h_in.data + self.b.data
            ze = self.embed.data @ self.W_emb.data
            cached = enc.cache["len"] = (zh, ze)
        return cached

    def initial_state(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.hidden
        return np.zeros(d), np.zeros(d)

    def step(self, enc: EncoderOutput, state, t: int, omega_prev: int):
        """Advance over frame ``t`` (1-based); returns ``(logit of q_t, new state)``."""
        zh, ze = self._prepared(enc)
        h, c, _ = G.lstm_cell_np(zh[t - 1] + ze[omega_prev], state[0], state[1], self.W_h.data)
        z = float(np.tanh(h) @ self.w_out.data + self.b_out.data[0])
        return z, (h, c)

    def run(self, enc: EncoderOutput, state, start: int, n: int, first_input: int):
        """Frames ``start+1 .. start+n`` with ``first_input`` then blanks as inputs.

        Returns per-frame logits and the state after each frame.
        """
        logits = np.empty(n)
        states = []
        sym = first_input
        for k in range(n):
            z, state = self.step(enc, state, start + 1 + k, sym)
            logits[k] = z
            states.append(state)
            sym = BLANK
        return logits, states

    def q_values(self, enc: EncoderOutput, omega: Sequence[int]) -> np.ndarray:
        """``q_1..q_T`` for a complete framewise alignment (teacher inputs)."""
        state = self.initial_state()
        out = np.empty(enc.T)
        for t, sym in enumerate(shifted_inputs(omega), start=1):
            z, state = self.step(enc, state, t, sym)
            out[t - 1] = z
        return G.sigmoid_np(out)


def neural_q(length: NeuralLengthModel, enc: EncoderOutput, omega_prefix: Sequence[int], t: int) -> float:
    """``q_t`` given the alignment symbols of frames ``1..t-1``; causal in both inputs."""
    if len(omega_prefix) < t - 1:
        raise ValueError(f"need {t - 1} alignment symbols, got {len(omega_prefix)}")
    state = length.initial_state()
    inputs = [BLANK] + list(omega_prefix[: t - 1])
    z = 0.0
    for k, sym in enumerate(inputs, start=1):
        z, state = length.step(enc, state, k, sym)
    return float(G.sigmoid_np(np.array(z)))


def log_q_terms(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(log q, log(1 - q))`` from logits, stable for large magnitudes."""
    logits = np.asarray(logits, dtype=np.float64)
    return -np.logaddexp(0.0, -logits), -np.logaddexp(0.0, logits)


def neural_segment_log_prob(t_prev: int, t: int, q: Sequence[float]) -> float:
    """``log p(t_s = t | t_{s-1} = t_prev)`` with ``q[k]`` holding ``q_{k+1}``."""
    if t < t_prev + 1:
        return NEG_INF
    q = np.asarray(q, dtype=np.float64)
    cont = q[t_prev:t - 1]
    with np.errstate(divide="ignore"):
        return float(np.log1p(-cont).sum() + np.log(q[t - 1]))


def segment_log_probs_from_logits(logits: np.ndarray) -> np.ndarray:
    """Log probability of ending after ``1..n`` frames of an open segment."""
    log_q, log_1mq = log_q_terms(logits)
    before = np.concatenate([[0.0], np.cumsum(log_1mq)[:-1]])
    return before + log_q
