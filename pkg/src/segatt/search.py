"""Decision rule and decoders for segmental (and global) attention models.

Scores follow ``(sum_s alpha * log p(t_s | ...) + log p(a_s | ...)) * S**-gamma``.
The segmental decoders are time synchronous: every hypothesis touched while
processing frame ``t`` sits at frame ``t``.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from segatt.length import (
    NEG_INF,
    encode_blank_alignment,
    log_q_terms,
    neural_segment_log_prob,
    segment_log_probs_from_logits,
)
from segatt.model import (
    BOS,
    EOS,
    DecoderState,
    EncoderOutput,
    Segmentation,
    SegmentalModel,
)

MODES = ("simple", "segmental", "oracle")

# exhaustive search guard
ORACLE_MAX_T = 8
ORACLE_MAX_VOCAB = 4
ORACLE_MAX_DELTA = 4


class EmptyBeamError(RuntimeError):
    pass


class InstanceTooLargeError(ValueError):
    pass


@dataclass
class SearchConfig:
    beam_size: int = 8
    alpha: float = 1.0
    gamma: int = 0
    delta_max: int = 20
    mode: str = "segmental"
    length_model: str | None = None  # defaults to the model's own length model
    recombine: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.delta_max < 1:
            raise ValueError(f"delta_max must be >= 1, got {self.delta_max}")
        if self.gamma not in (0, 1):
            raise ValueError(f"gamma must be 0 or 1, got {self.gamma}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SearchConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Hypothesis:
    frame: int
    labels: tuple[int, ...]
    boundaries: tuple[int, ...]
    seg_start: int
    log_score: float
    label_scores: tuple[float, ...] = ()
    length_scores: tuple[float, ...] = ()
    dec_state: DecoderState | None = field(default=None, repr=False)
    len_state: Any = field(default=None, repr=False)
    # alignment symbol the length model consumes at the next frame
    len_input: int = BOS

    @property
    def S(self) -> int:
        return len(self.labels)

    def normalized(self, gamma: int) -> float:
        return normalize(self.log_score, self.S, gamma)


def normalize(score: float, S: int, gamma: int) -> float:
    return score / max(S, 1) if gamma else score


def rank_key(h: Hypothesis, gamma: int):
    """Sort key: best normalized score first, then lexicographically smaller labels."""
    return (-h.normalized(gamma), h.labels, h.boundaries)


# --------------------------------------------------------------------------
# length scorers


@dataclass
class SegmentLengths:
    """Length-model terms for one open segment starting after ``seg_start``.

    ``scores[k]`` is the log probability of the segment ending after ``k + 1``
    frames (shape ``[n]`` or ``[n, V]`` when label dependent).  Neural models
    additionally expose the framewise terms and per-frame recurrent states.
    """

    scores: np.ndarray
    log_q: np.ndarray | None = None
    log_1mq: np.ndarray | None = None
    states: list | None = None


class NoLength:
    kind = "none"

    def initial_state(self):
        return None

    def segment(self, enc, state, first_input, seg_start, n) -> SegmentLengths:
        return SegmentLengths(np.zeros(n))


class StaticLength:
    kind = "static"

    def __init__(self, table):
        self.table = table

    def initial_state(self):
        return None

    def segment(self, enc, state, first_input, seg_start, n) -> SegmentLengths:
        lp = np.full((n, self.table.vocab_size), NEG_INF)
        m = min(n, self.table.delta_max)
        lp[:m] = self.table.log_probs()[:, :m].T
        return SegmentLengths(lp)


class NeuralLength:
    kind = "neural"

    def __init__(self, model):
        self.model = model

    def initial_state(self):
        return self.model.initial_state()

    def segment(self, enc, state, first_input, seg_start, n) -> SegmentLengths:
        logits, states = self.model.run(enc, state, seg_start, n, first_input)
        log_q, log_1mq = log_q_terms(logits)
        return SegmentLengths(segment_log_probs_from_logits(logits), log_q, log_1mq, states)


def length_scorer(model: SegmentalModel, kind: str | None = None):
    kind = kind or model.config.length_model
    if kind == "none":
        return NoLength()
    if kind == "static":
        if model.static_table is None:
            raise ValueError("static length model requested but the model has no static table")
        return StaticLength(model.static_table)
    if kind == "neural":
        if model.length is None:
            raise ValueError("neural length model requested but the model has none")
        return NeuralLength(model.length)
    raise ValueError(f"unknown length model {kind!r}")


def _length_term(lengths: SegmentLengths, k: int, a: int) -> float:
    s = lengths.scores
    return float(s[k, a] if s.ndim == 2 else s[k])


# --------------------------------------------------------------------------
# decision rule


@dataclass
class ScoredSequence:
    score: float
    raw: float
    label_scores: list[float]
    length_scores: list[float]


def score_sequence(
    model: SegmentalModel,
    enc: EncoderOutput,
    labels: Sequence[int],
    boundaries: Sequence[int],
    alpha: float,
    gamma: int,
    length_model: str | None = None,
) -> ScoredSequence:
    """Decision score of one (labels, segmentation) pair by direct teacher forcing."""
    seg = Segmentation(boundaries, enc.T)
    if len(labels) != seg.S:
        raise ValueError(f"{len(labels)} labels for {seg.S} segments")
    label_scores = [t.item() for t in model.seq_log_prob(labels, seg, enc)[0]]
    kind = length_model or model.config.length_model
    length_scores = [0.0] * seg.S
    if alpha != 0 and kind != "none":
        if kind == "static":
            table = model.static_table
            length_scores = [table.log_prob(a, n) for a, n in zip(labels, seg.lengths())]
        else:
            q = model.length.q_values(enc, encode_blank_alignment(labels, seg.t, enc.T))
            starts = (0,) + seg.t[:-1]
            length_scores = [neural_segment_log_prob(s, t, q) for s, t in zip(starts, seg.t)]
    raw = 0.0
    for ls, lab in zip(length_scores, label_scores):
        raw += (alpha * ls if alpha != 0 else 0.0) + lab
    return ScoredSequence(normalize(raw, seg.S, gamma), raw, label_scores, length_scores)


def global_score(model: SegmentalModel, enc: EncoderOutput, labels: Sequence[int], gamma: int) -> ScoredSequence:
    """Global-attention score including end of sequence; normalised by ``S + 1``."""
    scores = [t.item() for t in model.global_log_prob(labels, enc)[0]]
    raw = float(sum(scores))
    return ScoredSequence(normalize(raw, len(scores), gamma), raw, scores, [0.0] * len(scores))


# --------------------------------------------------------------------------
# shared expansion cache


class _Expansion:
    """Label and length scores for every possible end of one open segment."""

    __slots__ = ("advanced", "logp", "contexts", "lengths", "max_end")

    def __init__(self, model, scorer, enc, parent: Hypothesis, delta_max: int, alpha: float,
                 memo: dict | None = None):
        start = parent.frame
        self.max_end = min(start + delta_max, enc.T)
        n = self.max_end - start
        key = (parent.labels, start)
        hit = memo.get(key) if memo is not None else None
        if hit is None:
            a_prev = parent.labels[-1] if parent.labels else BOS
            advanced = model.advance(parent.dec_state, a_prev)
            hit = (advanced, *model.segment_label_scores(advanced, enc, start, self.max_end))
            if memo is not None:
                memo[key] = hit
        self.advanced, self.logp, self.contexts = hit
        if alpha == 0 and scorer.kind != "neural":
            self.lengths = SegmentLengths(np.zeros(n))
        else:
            self.lengths = scorer.segment(enc, parent.len_state, parent.len_input, start, n)


def _emit(model, parent: Hypothesis, exp: _Expansion, t: int, a: int, score: float,
          label_lp: float, len_lp: float, len_state) -> Hypothesis:
    k = t - parent.frame - 1
    return Hypothesis(
        frame=t,
        labels=parent.labels + (a,),
        boundaries=parent.boundaries + (t,),
        seg_start=t,
        log_score=score,
        label_scores=parent.label_scores + (label_lp,),
        length_scores=parent.length_scores + (len_lp,),
        dec_state=model.next_state(exp.advanced, exp.contexts[k]),
        len_state=len_state,
        len_input=a,
    )


def _label_memo(model: SegmentalModel) -> dict | None:
    """Label scores keyed by (label history, segment start).

    Without context dependency the decoder state is a function of the label
    history alone, so these scores are shared by hypotheses that differ only
    in earlier boundaries.
    """
    return None if model.config.ctx_dependency else {}


def _root(model: SegmentalModel, scorer) -> Hypothesis:
    return Hypothesis(0, (), (), 0, 0.0, dec_state=model.initial_state(), len_state=scorer.initial_state())


def _labels(model: SegmentalModel) -> range:
    return range(1, model.config.vocab_size)


# --------------------------------------------------------------------------
# segmental search


@dataclass
class SearchResult:
    best: Hypothesis
    final: list[Hypothesis]
    expansions: int = 0


def segmental_search(model: SegmentalModel, enc: EncoderOutput, config: SearchConfig) -> SearchResult:
    """Prune only segment-ended hypotheses against each other.

    Open segments survive until ``delta_max`` frames.  Ended hypotheses with
    the same label history at the same frame are recombined (max score).
    """
    scorer = length_scorer(model, config.length_model)
    alpha, gamma, B, delta = config.alpha, config.gamma, config.beam_size, config.delta_max
    T = enc.T
    ended: list[list[Hypothesis]] = [[] for _ in range(T + 1)]
    ended[0] = [_root(model, scorer)]
    cache: dict[int, _Expansion] = {}
    memo = _label_memo(model)
    labels = _labels(model)
    n_exp = 0
    for t in range(1, T + 1):
        best: dict[tuple, Hypothesis] = {}
        for tp in range(max(0, t - delta), t):
            for parent in ended[tp]:
                assert parent.frame == tp
                exp = cache.get(id(parent))
                if exp is None:
                    exp = cache[id(parent)] = _Expansion(model, scorer, enc, parent, delta, alpha, memo)
                    n_exp += 1
                k = t - tp - 1
                len_state = exp.lengths.states[k] if exp.lengths.states is not None else None
                row = exp.logp[k]
                for a in labels:
                    len_lp = _length_term(exp.lengths, k, a)
                    inc = row[a] + (alpha * len_lp if alpha != 0 else 0.0)
                    if inc == NEG_INF:
                        continue
                    score = parent.log_score + inc
                    key = parent.labels + (a,)
                    if not config.recombine:
                        key = (key, parent.boundaries)
                    cur = best.get(key)
                    if cur is None or score > cur.log_score or (
                        score == cur.log_score and parent.boundaries + (t,) < cur.boundaries
                    ):
                        best[key] = _emit(model, parent, exp, t, a, score, float(row[a]), len_lp, len_state)
        cands = sorted(best.values(), key=lambda h: rank_key(h, gamma))
        ended[t] = cands[:B]
        # open segments that can no longer end are finished with
        if t - delta >= 0:
            for h in ended[t - delta]:
                cache.pop(id(h), None)
    final = ended[T]
    if not final:
        raise EmptyBeamError("segmental search: no hypothesis ends at the last frame")
    return SearchResult(final[0], final, n_exp)


# --------------------------------------------------------------------------
# simple search


def simple_search(model: SegmentalModel, enc: EncoderOutput, config: SearchConfig) -> SearchResult:
    """Prune all hypotheses jointly using framewise neural length scores; no recombination."""
    kind = config.length_model or model.config.length_model
    if kind != "neural":
        raise ValueError("simple search needs the neural length model (framewise scores)")
    scorer = length_scorer(model, kind)
    alpha, gamma, B, delta = config.alpha, config.gamma, config.beam_size, config.delta_max
    T = enc.T
    root = _root(model, scorer)
    # an active hypothesis is (origin, accumulated score, frames into the open segment)
    active: list[tuple[Hypothesis, float, int]] = [(root, 0.0, 0)]
    cache: dict[int, _Expansion] = {}
    memo = _label_memo(model)
    labels = _labels(model)
    n_exp = 0
    final: list[Hypothesis] = []
    for t in range(1, T + 1):
        nxt: list[tuple[tuple, Hypothesis | None, tuple]] = []
        for origin, score, k in active:
            assert origin.frame + k == t - 1
            entry = cache.get(id(origin))
            if entry is None:
                # the origin is stored alongside so its id cannot be recycled
                entry = cache[id(origin)] = (origin, _Expansion(model, scorer, enc, origin, delta, alpha, memo))
                n_exp += 1
            exp = entry[1]
            log_q = exp.lengths.log_q[k]
            log_1mq = exp.lengths.log_1mq[k]
            seg_lp = float(exp.lengths.scores[k])
            # end the segment at t
            row = exp.logp[k]
            base = score + (alpha * log_q if alpha != 0 else 0.0)
            for a in labels:
                s = base + row[a]
                if s == NEG_INF:
                    continue
                h = _emit(model, origin, exp, t, a, origin.log_score + s, float(row[a]), seg_lp,
                          exp.lengths.states[k])
                nxt.append((rank_key(h, gamma), h, (h, 0.0, 0)))
            # keep the segment open
            if t < T and k + 1 < delta:
                s = score + (alpha * log_1mq if alpha != 0 else 0.0)
                if s != NEG_INF:
                    total = origin.log_score + s
                    key = (-normalize(total, origin.S, gamma), origin.labels, origin.boundaries)
                    nxt.append((key, None, (origin, s, k + 1)))
        if not nxt:
            raise EmptyBeamError(f"simple search: beam empty at frame {t}")
        nxt.sort(key=lambda x: x[0])
        kept = nxt[:B]
        if t == T:
            final = [h for _, h, _ in kept if h is not None]
        active = [item for _, _, item in kept]
        live = {id(o) for o, _, _ in active}
        cache = {i: e for i, e in cache.items() if i in live}
    if not final:
        raise EmptyBeamError("simple search: no hypothesis ends at the last frame")
    return SearchResult(final[0], final, n_exp)


# --------------------------------------------------------------------------
# exhaustive oracle


def check_oracle_size(T: int, vocab_size: int, delta_max: int) -> None:
    if T > ORACLE_MAX_T or vocab_size > ORACLE_MAX_VOCAB or delta_max > ORACLE_MAX_DELTA:
        raise InstanceTooLargeError(
            f"oracle search limited to T<={ORACLE_MAX_T}, vocab<={ORACLE_MAX_VOCAB}, "
            f"delta_max<={ORACLE_MAX_DELTA}; got T={T}, vocab={vocab_size}, delta_max={delta_max}"
        )


def compositions(T: int, max_part: int):
    """All tuples of positive parts summing to ``T`` with parts ``<= max_part``."""
    if T == 0:
        yield ()
        return
    for first in range(1, min(T, max_part) + 1):
        for rest in compositions(T - first, max_part):
            yield (first,) + rest


def oracle_search(model: SegmentalModel, enc: EncoderOutput, config: SearchConfig) -> SearchResult:
    """Exact argmax over all segmentations and label sequences by enumeration.

    Prefix computations are shared through a depth-first walk; every complete
    candidate is scored and compared, nothing is pruned.
    """
    check_oracle_size(enc.T, model.config.vocab_size, config.delta_max)
    scorer = length_scorer(model, config.length_model)
    alpha, gamma, delta, T = config.alpha, config.gamma, config.delta_max, enc.T
    labels = _labels(model)
    best: list[Hypothesis] = []
    count = 0
    memo = _label_memo(model)

    def walk(h: Hypothesis):
        nonlocal count
        if h.frame == T:
            count += 1
            if not best or rank_key(h, gamma) < rank_key(best[0], gamma):
                best[:] = [h]
            return
        exp = _Expansion(model, scorer, enc, h, delta, alpha, memo)
        for k in range(exp.max_end - h.frame):
            t = h.frame + k + 1
            len_state = exp.lengths.states[k] if exp.lengths.states is not None else None
            for a in labels:
                len_lp = _length_term(exp.lengths, k, a)
                inc = exp.logp[k, a] + (alpha * len_lp if alpha != 0 else 0.0)
                if inc == NEG_INF:
                    continue
                walk(_emit(model, h, exp, t, a, h.log_score + inc, float(exp.logp[k, a]), len_lp, len_state))

    walk(_root(model, scorer))
    if not best:
        raise EmptyBeamError("oracle search: no finite-score candidate")
    return SearchResult(best[0], best, count)


# --------------------------------------------------------------------------
# global attention (label-synchronous) search


@dataclass
class _GHyp:
    labels: tuple[int, ...]
    score: float
    scores: tuple[float, ...]
    state: DecoderState


def global_search(model: SegmentalModel, enc: EncoderOutput, config: SearchConfig,
                  max_len: int | None = None) -> SearchResult:
    """Label-synchronous beam search with an explicit end-of-sequence label.

    Each step keeps the best ``beam_size`` extensions; those ending in EOS
    leave the beam.  Search stops once ``beam_size`` hypotheses have ended
    or the beam empties.  After ``max_len`` labels only EOS is allowed.
    """
    B, gamma = config.beam_size, config.gamma
    max_len = enc.T if max_len is None else max_len
    beam = [_GHyp((), 0.0, (), model.initial_state())]
    finished: list[Hypothesis] = []
    while beam and len(finished) < B:
        cands = []
        for h in beam:
            adv = model.advance(h.state, h.labels[-1] if h.labels else BOS)
            logp, ctx = model.window_label_scores(adv, enc, 1, enc.T)
            nxt = model.next_state(adv, ctx)
            allowed = (EOS,) if len(h.labels) >= max_len else range(model.config.vocab_size)
            for a in allowed:
                s = h.score + float(logp[a])
                n = len(h.labels) + 1
                cands.append((-normalize(s, n, gamma), h.labels + (a,), s, h, float(logp[a]), nxt))
        cands.sort(key=lambda c: (c[0], c[1]))
        beam = []
        for _, labs, s, h, lp, nxt in cands[:B]:
            if labs[-1] == EOS:
                finished.append(Hypothesis(enc.T, h.labels, (), enc.T, s, h.scores + (lp,)))
            else:
                beam.append(_GHyp(labs, s, h.scores + (lp,), nxt))
    if not finished:
        raise EmptyBeamError("global search: no hypothesis emitted end of sequence")
    finished.sort(key=lambda h: (-normalize(h.log_score, len(h.label_scores), gamma), h.labels))
    return SearchResult(finished[0], finished[:B])


# --------------------------------------------------------------------------


def decode(model: SegmentalModel, enc: EncoderOutput, config: SearchConfig) -> SearchResult:
    if model.config.window_mode == "global":
        return global_search(model, enc, config)
    if config.mode == "simple":
        return simple_search(model, enc, config)
    if config.mode == "oracle":
        return oracle_search(model, enc, config)
    return segmental_search(model, enc, config)


def hypothesis_score(model: SegmentalModel, enc: EncoderOutput, labels, boundaries, config: SearchConfig) -> float:
    if model.config.window_mode == "global":
        return global_score(model, enc, labels, config.gamma).score
    return score_sequence(model, enc, labels, boundaries, config.alpha, config.gamma, config.length_model).score


def count_search_errors(model: SegmentalModel, utts, config: SearchConfig, results=None, tol: float = 1e-9) -> float:
    """Fraction of sequences whose reference outscores the recognised sequence."""
    if not utts:
        return 0.0
    errors = 0
    if results is None:
        results = decode_corpus(model, utts, config)
    for u, res in zip(utts, results):
        enc = model.encode(u.features)
        ref = hypothesis_score(model, enc, u.labels, u.boundaries, config)
        hyp = hypothesis_score(model, enc, res.best.labels, res.best.boundaries, config)
        if ref > hyp + tol:
            errors += 1
    return errors / len(utts)


def _slim(res: SearchResult) -> SearchResult:
    strip = [replace(h, dec_state=None, len_state=None) for h in res.final]
    return SearchResult(strip[0], strip, res.expansions)


def _decode_one(args) -> SearchResult:
    model, features, config = args
    return _slim(decode(model, model.encode(features), config))


def decode_corpus(model: SegmentalModel, utts, config: SearchConfig, jobs: int = 1) -> list[SearchResult]:
    """Decode every utterance; ``jobs > 1`` spreads sequences over processes.

    Results come back in input order and do not depend on ``jobs``.
    """
    work = [(model, u.features, config) for u in utts]
    if jobs <= 1 or len(work) <= 1:
        return [_decode_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_decode_one, work, chunksize=max(1, len(work) // (4 * jobs))))
