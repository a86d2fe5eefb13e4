"""LSTM encoder and attention label model (global or segmental windows)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from segatt import grad as G
from segatt.grad import LSTMParams, Parameter, Tensor

# Reserved id 0: begin-of-sequence input, end-of-sequence output of the global
# model, and the blank symbol of the framewise alignment.
BOS = EOS = BLANK = 0

WINDOW_MODES = ("global", "segmental")
SILENCE_VARIANTS = ("none", "no_split", "split")
LENGTH_MODELS = ("none", "static", "neural")


class TooShortInputError(ValueError):
    pass


class InvalidWindowError(ValueError):
    pass


class SegmentationError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 16
    enc_layers: int = 2
    enc_dim: int = 64
    pool_factors: list[int] = field(default_factory=lambda: [2, 3])
    dec_dim: int = 64
    vocab_size: int = 10
    att_dim: int = 64
    window_mode: str = "segmental"
    ctx_dependency: bool = True
    silence_variant: str = "none"
    length_model: str = "neural"
    len_dim: int = 32

    def __post_init__(self):
        self.pool_factors = [int(k) for k in self.pool_factors]
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if len(self.pool_factors) > self.enc_layers:
            raise ValueError("more pool factors than encoder layers")
        if any(k < 1 for k in self.pool_factors):
            raise ValueError(f"pool factors must be positive: {self.pool_factors}")
        if self.window_mode not in WINDOW_MODES:
            raise ValueError(f"window_mode must be one of {WINDOW_MODES}")
        if self.silence_variant not in SILENCE_VARIANTS:
            raise ValueError(f"silence_variant must be one of {SILENCE_VARIANTS}")
        if self.length_model not in LENGTH_MODELS:
            raise ValueError(f"length_model must be one of {LENGTH_MODELS}")
        for name in ("input_dim", "enc_layers", "enc_dim", "dec_dim", "att_dim", "len_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def downsampling(self) -> int:
        return math.prod(self.pool_factors)

    @property
    def silence_id(self) -> int | None:
        """Silence is the last vocabulary entry whenever it is a label."""
        return None if self.silence_variant == "none" else self.vocab_size - 1

    @property
    def enc_out_dim(self) -> int:
        return 2 * self.enc_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncoderOutput:
    h: Tensor
    T: int
    T_input: int
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class DecoderState:
    """Decoder recurrence state between label steps.

    ``prev_label`` is the last label fed into the LSTM.  ``prev_context`` is the
    last attention context, or zeros when the context dependency is disabled.
    """

    lstm_h: Tensor
    lstm_c: Tensor
    prev_context: Tensor
    prev_label: int = BOS


@dataclass(frozen=True, init=False)
class Segmentation:
    """Segment end frames ``t_1..t_S`` (1-based, ``t_0 = 0`` implicit)."""

    t: tuple[int, ...]

    def __init__(self, t: Iterable[int], T: int | None = None):
        object.__setattr__(self, "t", tuple(int(x) for x in t))
        validate_boundaries(self.t, T)

    @property
    def S(self) -> int:
        return len(self.t)

    def windows(self) -> list[tuple[int, int]]:
        starts = (0,) + self.t[:-1]
        return [(lo + 1, hi) for lo, hi in zip(starts, self.t)]

    def lengths(self) -> list[int]:
        starts = (0,) + self.t[:-1]
        return [hi - lo for lo, hi in zip(starts, self.t)]


def validate_boundaries(t: Sequence[int], T: int | None = None) -> None:
    if len(t) == 0:
        raise SegmentationError("segmentation needs at least one segment")
    prev = 0
    for x in t:
        if x <= prev:
            raise SegmentationError(f"boundaries must be strictly increasing from 0: {list(t)}")
        prev = x
    if T is not None and t[-1] != T:
        raise SegmentationError(f"last boundary {t[-1]} must equal T={T}")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    r = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-r, r, size=shape)


class SegmentalModel:
    """Encoder, attention label model and optional length models.

    The same parameters serve the global model (window ``[1, T]`` plus an
    explicit end-of-sequence label) and the segmental model (window equal to
    the current segment, end of sequence implied by ``t_S = T``).
    """

    def __init__(self, config: ModelConfig, params: dict[str, Parameter], static_table=None):
        self.config = config
        self.params = params
        self.static_table = static_table
        self._bind()

    # -- construction ----------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "SegmentalModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Parameter] = {}
        for name, shape, fan_in in cls.parameter_shapes(config):
            params[name] = Parameter(name, _uniform(rng, shape, fan_in))
        return cls(config, params)

    @staticmethod
    def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
        shapes = []

        def lstm(prefix, n_in, d):
            shapes.append((f"{prefix}.W_x", (n_in, 4 * d), n_in))
            shapes.append((f"{prefix}.W_h", (d, 4 * d), d))
            shapes.append((f"{prefix}.b", (4 * d,), d))

        n_in = cfg.input_dim
        for layer in range(cfg.enc_layers):
            lstm(f"enc.{layer}.fw", n_in, cfg.enc_dim)
            lstm(f"enc.{layer}.bw", n_in, cfg.enc_dim)
            n_in = cfg.enc_out_dim
        D, V, dd = cfg.enc_out_dim, cfg.vocab_size, cfg.dec_dim
        shapes.append(("dec.embed", (V, dd), dd))
        lstm("dec.lstm", dd + D, dd)
        shapes += [
            ("att.W_s", (dd, cfg.att_dim), dd),
            ("att.b", (cfg.att_dim,), dd),
            ("att.W_h", (D, cfg.att_dim), D),
            ("att.v", (cfg.att_dim,), cfg.att_dim),
            ("out.W1", (dd + D, 2 * dd), dd + D),
            ("out.b1", (2 * dd,), dd + D),
            ("out.W2", (dd, V), dd),
            ("out.b2", (V,), dd),
        ]
        if cfg.length_model == "neural":
            L = cfg.len_dim
            shapes += [
                ("len.embed", (V, L), L),
                ("len.W_h_in", (D, 4 * L), D + L),
                ("len.W_emb", (L, 4 * L), D + L),
                ("len.W_h", (L, 4 * L), L),
                ("len.b", (4 * L,), D + L),
                ("len.w_out", (L,), L),
                ("len.b_out", (1,), L),
            ]
        return shapes

    def _bind(self) -> None:
        p = self.params
        cfg = self.config
        self.enc_lstms = [
            (LSTMParams(p[f"enc.{l}.fw.W_x"], p[f"enc.{l}.fw.W_h"], p[f"enc.{l}.fw.b"]),
             LSTMParams(p[f"enc.{l}.bw.W_x"], p[f"enc.{l}.bw.W_h"], p[f"enc.{l}.bw.b"]))
            for l in range(cfg.enc_layers)
        ]
        self.dec_lstm = LSTMParams(p["dec.lstm.W_x"], p["dec.lstm.W_h"], p["dec.lstm.b"])
        self.length = None
        if cfg.length_model == "neural":
            from segatt.length import NeuralLengthModel

            self.length = NeuralLengthModel(
                p["len.embed"], p["len.W_h_in"], p["len.W_emb"], p["len.W_h"],
                p["len.b"], p["len.w_out"], p["len.b_out"],
            )

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self, prefix: str = "") -> int:
        return sum(p.data.size for n, p in self.params.items() if n.startswith(prefix))

    def clone(self) -> "SegmentalModel":
        params = {n: Parameter(n, p.data.copy(), p.trainable) for n, p in self.params.items()}
        return SegmentalModel(replace(self.config), params, self.static_table)

    # -- encoder ---------------------------------------------------------

    def encode(self, x) -> EncoderOutput:
        """Stacked bidirectional LSTMs with max-pooling after each layer."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise G.DimensionError(f"encode: features {list(x.shape)} do not have input_dim {cfg.input_dim}")
        T_in = x.shape[0]
        if T_in < cfg.downsampling:
            raise TooShortInputError(
                f"input of {T_in} frames is shorter than the total pool factor {cfg.downsampling}"
            )
        h = Tensor(x)
        for layer, (fw, bw) in enumerate(self.enc_lstms):
            h = G.concat([G.lstm_sequence(h, fw), G.lstm_sequence(h, bw, reverse=True)])
            if layer < len(cfg.pool_factors):
                h = G.maxpool_time(h, cfg.pool_factors[layer])
        return EncoderOutput(h=h, T=h.shape[0], T_input=T_in)

    # -- label model -----------------------------------------------------

    def initial_state(self) -> DecoderState:
        d, D = self.config.dec_dim, self.config.enc_out_dim
        return DecoderState(Tensor(np.zeros(d)), Tensor(np.zeros(d)), Tensor(np.zeros(D)), BOS)

    def _check_label(self, a: int) -> None:
        if not 0 <= a < self.config.vocab_size:
            raise IndexError(f"label {a} out of vocabulary range [0, {self.config.vocab_size})")

    def advance(self, state: DecoderState, a_prev: int) -> DecoderState:
        """Feed ``a_prev`` (and the previous context, if used) through the decoder LSTM."""
        self._check_label(a_prev)
        emb = G.embed(self.params["dec.embed"], a_prev)
        if self.config.ctx_dependency:
            ctx = state.prev_context
        else:
            ctx = Tensor(np.zeros(self.config.enc_out_dim))
        h, c = G.lstm_step(G.concat([emb, ctx]), (state.lstm_h, state.lstm_c), self.dec_lstm)
        return DecoderState(h, c, state.prev_context, a_prev)

    def attention_keys(self, enc: EncoderOutput) -> Tensor:
        keys = enc.cache.get("att_keys")
        if keys is None:
            keys = G.linear(enc.h, self.params["att.W_h"])
            enc.cache["att_keys"] = keys
        return keys

    def attend(self, state: DecoderState, enc: EncoderOutput, window: tuple[int, int]) -> tuple[Tensor, Tensor]:
        """Attention over frames ``lo..hi`` (1-based, inclusive) queried by the LSTM output."""
        lo, hi = window
        if not 1 <= lo <= hi <= enc.T:
            raise InvalidWindowError(f"window [{lo}, {hi}] is empty or outside [1, {enc.T}]")
        p = self.params
        query = G.linear(state.lstm_h, p["att.W_s"], p["att.b"])
        keys = G.slice_rows(self.attention_keys(enc), lo - 1, hi)
        energies = G.linear(G.tanh_op(G.add(keys, query)), p["att.v"])
        weights = G.softmax_op(energies)
        context = G.linear(weights, G.slice_rows(enc.h, lo - 1, hi))
        return context, weights

    def readout(self, query: Tensor, context: Tensor) -> Tensor:
        p = self.params
        hidden = G.maxout_op(G.linear(G.concat([query, context]), p["out.W1"], p["out.b1"]))
        return G.log_softmax(G.linear(hidden, p["out.W2"], p["out.b2"]))

    def label_step(
        self, state: DecoderState, a_prev: int, enc: EncoderOutput, window: tuple[int, int]
    ) -> tuple[Tensor, DecoderState]:
        """Log label distribution for the next output given the attention window."""
        st = self.advance(state, a_prev)
        context, _ = self.attend(st, enc, window)
        logp = self.readout(st.lstm_h, context)
        if self.config.ctx_dependency:
            st = DecoderState(st.lstm_h, st.lstm_c, context, a_prev)
        else:
            st = DecoderState(st.lstm_h, st.lstm_c, Tensor(np.zeros(self.config.enc_out_dim)), a_prev)
        return logp, st

    def seq_log_prob(
        self, labels: Sequence[int], segmentation: Segmentation, enc: EncoderOutput
    ) -> tuple[list[Tensor], Tensor]:
        """Teacher-forced per-label log probabilities under a given segmentation."""
        if segmentation.S != len(labels):
            raise SegmentationError(f"{len(labels)} labels but {segmentation.S} segments")
        validate_boundaries(segmentation.t, enc.T)
        state = self.initial_state()
        a_prev = BOS
        scores = []
        for a, window in zip(labels, segmentation.windows()):
            self._check_label(a)
            logp, state = self.label_step(state, a_prev, enc, window)
            scores.append(G.pick(logp, a))
            a_prev = a
        return scores, G.add_n(scores)

    def global_log_prob(self, labels: Sequence[int], enc: EncoderOutput) -> tuple[list[Tensor], Tensor]:
        """Teacher-forced global-attention scores, including the final end-of-sequence step."""
        state = self.initial_state()
        a_prev = BOS
        scores = []
        for a in list(labels) + [EOS]:
            self._check_label(a)
            logp, state = self.label_step(state, a_prev, enc, (1, enc.T))
            scores.append(G.pick(logp, a))
            a_prev = a
        return scores, G.add_n(scores)

    # -- batched inference helpers (no tape) -----------------------------

    def segment_label_scores(
        self, state: DecoderState, enc: EncoderOutput, seg_start: int, max_end: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Log label distributions for every window ``[seg_start+1, t]``, ``t <= max_end``.

        ``state`` must already have consumed the previous label (see
        :meth:`advance`).  Returns ``(logp[n, V], contexts[n, D])`` where row
        ``k`` is the window ending at ``seg_start + 1 + k``.
        """
        p = self.params
        keys = self.attention_keys(enc).data[seg_start:max_end]
        H = enc.h.data[seg_start:max_end]
        n = max_end - seg_start
        query = state.lstm_h.data @ p["att.W_s"].data + p["att.b"].data
        e = np.tanh(keys + query) @ p["att.v"].data
        # row k attends over the first k+1 frames
        tri = np.tril(np.ones((n, n), dtype=bool))
        z = np.where(tri, e[None, :], -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        w = np.exp(z)
        w /= w.sum(axis=1, keepdims=True)
        contexts = w @ H
        return self._readout_np(state.lstm_h.data, contexts), contexts

    def window_label_scores(
        self, state: DecoderState, enc: EncoderOutput, lo: int, hi: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Single-window variant of :meth:`segment_label_scores`; returns ``(logp[V], context[D])``."""
        p = self.params
        keys = self.attention_keys(enc).data[lo - 1:hi]
        query = state.lstm_h.data @ p["att.W_s"].data + p["att.b"].data
        e = np.tanh(keys + query) @ p["att.v"].data
        w = np.exp(e - e.max())
        w /= w.sum()
        context = w @ enc.h.data[lo - 1:hi]
        return self._readout_np(state.lstm_h.data, context[None, :])[0], context

    def _readout_np(self, query: np.ndarray, contexts: np.ndarray) -> np.ndarray:
        p = self.params
        n = contexts.shape[0]
        x = np.concatenate([np.broadcast_to(query, (n, query.shape[0])), contexts], axis=1)
        a = (x @ p["out.W1"].data + p["out.b1"].data).reshape(n, -1, 2)
        hidden = np.where(a[..., 1] > a[..., 0], a[..., 1], a[..., 0])
        logits = hidden @ p["out.W2"].data + p["out.b2"].data
        logits -= logits.max(axis=1, keepdims=True)
        return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))

    def next_state(self, advanced: DecoderState, context: np.ndarray) -> DecoderState:
        """State after emitting a label whose attention context was ``context``."""
        if self.config.ctx_dependency:
            ctx = Tensor(context)
        else:
            ctx = Tensor(np.zeros(self.config.enc_out_dim))
        return DecoderState(advanced.lstm_h, advanced.lstm_c, ctx, advanced.prev_label)
