"""Error counting, per-label score dumps and report tables.

Every table renders twice: an aligned plain-text block for reading and a
line-record twin (``key=value`` fields separated by tabs) for scripts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

from segatt.search import SearchConfig, decode_corpus


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_len == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.ref_len

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.substitutions + other.substitutions, self.deletions + other.deletions,
                           self.insertions + other.insertions, self.ref_len + other.ref_len)


# alignment ops
MATCH, SUB, DEL, INS = "=", "S", "D", "I"


def align(ref: Sequence, hyp: Sequence) -> list[tuple[str, int | None, int | None]]:
    """Minimal unit-cost alignment as ``(op, ref_index, hyp_index)`` triples.

    The backtrace prefers the diagonal, then a deletion (up), then an
    insertion (left), so substitutions win over deletion/insertion pairs.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + cost, d[i - 1][j] + 1, d[i][j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append((MATCH if ref[i - 1] == hyp[j - 1] else SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append((DEL, i - 1, None))
            i -= 1
        else:
            ops.append((INS, None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def edit_distance(ref: Sequence, hyp: Sequence) -> ErrorCounts:
    counts = {SUB: 0, DEL: 0, INS: 0}
    for op, _, _ in align(ref, hyp):
        if op != MATCH:
            counts[op] += 1
    return ErrorCounts(counts[SUB], counts[DEL], counts[INS], len(ref))


def strip_silence(labels: Iterable[int], silence_id: int | None) -> list[int]:
    return [a for a in labels if a != silence_id] if silence_id is not None else list(labels)


def corpus_errors(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]],
                  silence_id: int | None = None, keep_silence: bool = False) -> ErrorCounts:
    """Summed counts; silence is removed from both sides unless ``keep_silence``."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = ErrorCounts()
    sil = None if keep_silence else silence_id
    for r, h in zip(refs, hyps):
        total = total + edit_distance(strip_silence(r, sil), strip_silence(h, sil))
    return total


def label_error_rate(refs, hyps) -> float:
    return corpus_errors(refs, hyps, keep_silence=True).wer


# --------------------------------------------------------------------------
# tables


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list]

    def text(self) -> str:
        cells = [self.columns] + [[_fmt(v) for v in r] for r in self.rows]
        widths = [max(len(c[i]) for c in cells) for i in range(len(self.columns))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def records(self) -> str:
        out = []
        for r in self.rows:
            fields = [f"table={self.name}"] + [f"{c}={_fmt(v)}" for c, v in zip(self.columns, r)]
            out.append("\t".join(fields))
        return "\n".join(out) + ("\n" if out else "")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return str(v)


def wer_table(name: str, rows: Sequence[tuple[str, ErrorCounts]], extra: dict[str, Sequence] | None = None) -> Table:
    """Rows of ``(condition, counts)`` rendered as percentages.

    Column order: condition, S, D, I, ref_len, WER (percent), then ``extra``.
    """
    cols = ["condition", "sub", "del", "ins", "ref_len", "wer"] + list(extra or {})
    out = []
    for k, (cond, c) in enumerate(rows):
        row = [cond, c.substitutions, c.deletions, c.insertions, c.ref_len, 100.0 * c.wer]
        row += [vals[k] for vals in (extra or {}).values()]
        out.append(row)
    return Table(name, cols, out)


# --------------------------------------------------------------------------
# per-label score comparison


@dataclass
class ScoreTable:
    """Aligned per-label scores of the truth and the recognised sequence."""

    rows: list[tuple[str, int | None, float | None, int | None, float | None]]
    truth_total: float
    recog_total: float
    truth_labels: int
    recog_labels: int

    @property
    def truth_mean(self) -> float:
        return self.truth_total / max(self.truth_labels, 1)

    @property
    def recog_mean(self) -> float:
        return self.recog_total / max(self.recog_labels, 1)

    def table(self, name: str = "scores") -> Table:
        rows = [list(r) for r in self.rows]
        rows.append(["sum", None, self.truth_total, None, self.recog_total])
        rows.append(["sum/S", None, self.truth_mean, None, self.recog_mean])
        return Table(name, ["op", "truth_label", "truth_score", "recog_label", "recog_score"], rows)


def score_table(truth_labels: Sequence[int], truth_scores: Sequence[float],
                recog_labels: Sequence[int], recog_scores: Sequence[float]) -> ScoreTable:
    """Rows follow the edit-distance alignment; deletion rows carry no recognised entry.

    Score lists may be one longer than the label lists (a trailing
    end-of-sequence term); that term appears as a final ``eos`` row.
    """
    rows = []
    for op, i, j in align(list(truth_labels), list(recog_labels)):
        rows.append((op, None if i is None else truth_labels[i], None if i is None else truth_scores[i],
                     None if j is None else recog_labels[j], None if j is None else recog_scores[j]))
    if len(truth_scores) == len(truth_labels) + 1:
        rows.append(("eos", None, truth_scores[-1], None, recog_scores[-1]))
    return ScoreTable(rows, float(sum(truth_scores)), float(sum(recog_scores)),
                      len(truth_scores), len(recog_scores))


# --------------------------------------------------------------------------
# alpha sweep


@dataclass
class SweepResult:
    alphas: list[float]
    counts: list[ErrorCounts]
    hypotheses: list[list[tuple[int, ...]]]

    @property
    def best_alpha(self) -> float:
        wers = [c.wer for c in self.counts]
        return self.alphas[wers.index(min(wers))]

    def table(self, name: str = "alpha_sweep") -> Table:
        return wer_table(name, [(f"alpha={a:g}", c) for a, c in zip(self.alphas, self.counts)])


def sweep(alphas: Sequence[float], model, utts, config: SearchConfig, jobs: int = 1,
          decoder: Callable | None = None) -> SweepResult:
    """One decoding pass per length-model scale."""
    if not alphas:
        raise ValueError("empty alpha list")
    counts, hyps = [], []
    refs = [u.labels for u in utts]
    sil = model.config.silence_id
    for a in alphas:
        cfg = replace(config, alpha=float(a))
        results = decoder(cfg) if decoder is not None else decode_corpus(model, utts, cfg, jobs)
        labels = [r.best.labels for r in results]
        hyps.append(labels)
        counts.append(corpus_errors(refs, labels, sil))
    return SweepResult([float(a) for a in alphas], counts, hyps)
