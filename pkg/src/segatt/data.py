"""Synthetic corpus with exact framewise alignments.

Every label owns a prototype feature vector; a segment of ``n`` downsampled
frames becomes ``n * downsampling`` raw frames of that prototype plus
Gaussian noise.  Silence spans are zero-mean noise.  Because lengths are drawn
at the downsampled resolution the reference boundaries are exact for the
encoder output.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from segatt.length import encode_blank_alignment
from segatt.model import SILENCE_VARIANTS, validate_boundaries

SPLITS = ("train", "dev", "eval")


@dataclass
class CorpusSpec:
    num_labels: int = 8
    input_dim: int = 16
    downsampling: int = 6
    num_train: int = 500
    num_dev: int = 50
    num_eval: int = 50
    min_labels: int = 3
    max_labels: int = 8
    seg_len_min: float = 2.0
    seg_len_max: float = 5.0
    seg_len_std: float = 1.0
    max_seg_len: int = 12
    silence_prob: float = 0.0
    silence_len_mean: float = 6.0
    silence_len_std: float = 4.0
    prototype_scale: float = 1.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_labels < 1:
            raise ValueError("num_labels must be positive")
        if self.min_labels < 1 or self.max_labels < self.min_labels:
            raise ValueError("need 1 <= min_labels <= max_labels")
        if self.seg_len_min < 1 or self.seg_len_max < self.seg_len_min:
            raise ValueError("segment length means must satisfy 1 <= seg_len_min <= seg_len_max")
        if self.max_seg_len < 1:
            raise ValueError("spec would yield zero-length segments: max_seg_len < 1")
        if not 0.0 <= self.silence_prob <= 1.0:
            raise ValueError("silence_prob must lie in [0, 1]")
        if self.noise < 0 or self.seg_len_std < 0:
            raise ValueError("noise and seg_len_std must be nonnegative")

    @property
    def silence_id(self) -> int:
        return self.num_labels + 1

    def vocab_size(self, silence_variant: str) -> int:
        """Reserved id 0, labels ``1..num_labels`` and silence when it is a label."""
        return self.num_labels + (1 if silence_variant == "none" else 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown CorpusSpec keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Utterance:
    """One sequence: raw features plus a segment-level alignment.

    ``boundaries`` are segment end frames at the downsampled resolution;
    ``silence`` flags which segments are silence.
    """

    id: str
    features: np.ndarray
    labels: list[int]
    boundaries: list[int]
    silence: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.silence:
            self.silence = [False] * len(self.labels)
        if len(self.labels) != len(self.boundaries) or len(self.silence) != len(self.labels):
            raise ValueError(f"{self.id}: labels, boundaries and silence flags differ in length")

    @property
    def T(self) -> int:
        return self.boundaries[-1]

    @property
    def T_input(self) -> int:
        return self.features.shape[0]

    @property
    def S(self) -> int:
        return len(self.labels)

    def lengths(self) -> list[int]:
        prev = [0] + self.boundaries[:-1]
        return [b - a for a, b in zip(prev, self.boundaries)]

    def framewise(self) -> list[int]:
        """Label of every downsampled frame."""
        out = []
        for a, n in zip(self.labels, self.lengths()):
            out += [a] * n
        return out

    def blank_alignment(self) -> list[int]:
        return encode_blank_alignment(self.labels, self.boundaries, self.T)

    def words(self) -> list[int]:
        """Labels with silence removed."""
        return [a for a, s in zip(self.labels, self.silence) if not s]


@dataclass
class Corpus:
    spec: CorpusSpec
    splits: dict[str, list[Utterance]]
    silence_variant: str = "no_split"

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]

    def alignments(self, split: str = "train") -> Iterator[tuple[list[int], list[int]]]:
        for u in self.splits[split]:
            yield u.labels, u.boundaries


def _prototypes(spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    protos = rng.normal(size=(spec.num_labels, spec.input_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos * spec.prototype_scale * np.sqrt(spec.input_dim)


def _sample_len(rng: np.random.Generator, mean: float, std: float, cap: int) -> int:
    n = int(round(rng.normal(mean, std))) if std > 0 else int(round(mean))
    return min(max(n, 1), cap)


def generate(spec: CorpusSpec) -> Corpus:
    """Train/dev/eval splits; the seed fixes every value bit-exactly.

    Alignments come out in the ``no_split`` form (silence is its own
    segment); use :func:`apply_silence_variant` for the other forms.
    """
    root = np.random.default_rng(spec.seed)
    protos = _prototypes(spec, root)
    means = root.uniform(spec.seg_len_min, spec.seg_len_max, size=spec.num_labels)
    counts = {"train": spec.num_train, "dev": spec.num_dev, "eval": spec.num_eval}
    splits = {}
    for k, split in enumerate(SPLITS):
        rng = np.random.default_rng([spec.seed, k + 1])
        utts = []
        for i in range(counts[split]):
            utts.append(_generate_one(spec, rng, protos, means, f"{split}-{i:05d}"))
        splits[split] = utts
    return Corpus(spec, splits, "no_split")


def _generate_one(spec, rng, protos, means, uid) -> Utterance:
    S = int(rng.integers(spec.min_labels, spec.max_labels + 1))
    words = []
    prev = -1
    for _ in range(S):
        # no immediate repeats: adjacent equal labels would have no visible boundary
        choices = [a for a in range(1, spec.num_labels + 1) if a != prev] or [1]
        a = int(choices[rng.integers(len(choices))])
        words.append(a)
        prev = a
    segs: list[tuple[int, int, bool]] = []

    def maybe_silence():
        if spec.silence_prob > 0 and rng.random() < spec.silence_prob:
            n = max(1, int(round(rng.normal(spec.silence_len_mean, spec.silence_len_std))))
            segs.append((spec.silence_id, n, True))

    maybe_silence()
    for a in words:
        segs.append((a, _sample_len(rng, means[a - 1], spec.seg_len_std, spec.max_seg_len), False))
        maybe_silence()

    frames = []
    for a, n, is_sil in segs:
        raw = n * spec.downsampling
        base = np.zeros(spec.input_dim) if is_sil else protos[a - 1]
        frames.append(base + spec.noise * rng.normal(size=(raw, spec.input_dim)))
    feats = np.concatenate(frames)
    bounds = np.cumsum([n for _, n, _ in segs]).tolist()
    return Utterance(uid, feats, [a for a, _, _ in segs], bounds, [s for _, _, s in segs])


# --------------------------------------------------------------------------
# silence handling


def apply_silence_variant(utt: Utterance, variant: str, delta_max: int) -> Utterance:
    """Rewrite the alignment of a ``no_split``-form utterance.

    ``none`` merges every silence span into the following label's segment
    (trailing silence into the last label); ``split`` cuts silence spans into
    pieces of at most ``delta_max`` frames.
    """
    if variant not in SILENCE_VARIANTS:
        raise ValueError(f"unknown silence variant {variant!r}")
    lengths = utt.lengths()
    if variant == "no_split":
        return replace(utt, labels=list(utt.labels), boundaries=list(utt.boundaries), silence=list(utt.silence))
    labels, lens, sil = [], [], []
    if variant == "none":
        pending = 0
        for a, n, s in zip(utt.labels, lengths, utt.silence):
            if s:
                pending += n
            else:
                labels.append(a)
                lens.append(n + pending)
                sil.append(False)
                pending = 0
        if not labels:
            raise ValueError(f"{utt.id}: cannot drop silence from an all-silence utterance")
        lens[-1] += pending
    else:
        for a, n, s in zip(utt.labels, lengths, utt.silence):
            if s:
                while n > delta_max:
                    labels.append(a)
                    lens.append(delta_max)
                    sil.append(True)
                    n -= delta_max
            labels.append(a)
            lens.append(n)
            sil.append(s)
    bounds = np.cumsum(lens).tolist()
    validate_boundaries(bounds, utt.T)
    return replace(utt, labels=labels, boundaries=bounds, silence=sil)


def corpus_with_variant(corpus: Corpus, variant: str, delta_max: int) -> Corpus:
    if corpus.silence_variant != "no_split":
        raise ValueError("silence variants are applied to the no_split form only")
    splits = {k: [apply_silence_variant(u, variant, delta_max) for u in v] for k, v in corpus.splits.items()}
    return Corpus(corpus.spec, splits, variant)


# --------------------------------------------------------------------------
# long-sequence protocol


def concat_sequences(utts: Sequence[Utterance], C: int) -> list[Utterance]:
    """Join consecutive groups of ``C`` utterances (the last group may be shorter)."""
    if C < 1:
        raise ValueError(f"C must be >= 1, got {C}")
    if C == 1:
        return list(utts)
    out = []
    for g in range(0, len(utts), C):
        group = utts[g:g + C]
        labels, bounds, sil = [], [], []
        offset = 0
        for u in group:
            labels += u.labels
            bounds += [b + offset for b in u.boundaries]
            sil += u.silence
            offset += u.T
        feats = np.concatenate([u.features for u in group])
        out.append(Utterance("+".join(u.id for u in group), feats, labels, bounds, sil))
    return out


# --------------------------------------------------------------------------
# on-disk format


def save_corpus(corpus: Corpus, root: str | Path) -> None:
    """One directory per split with ``features.f64``, ``index.tsv`` and ``alignments.txt``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, utts in corpus.splits.items():
        d = root / split
        d.mkdir(exist_ok=True)
        offset = 0
        with open(d / "features.f64", "wb") as fb, open(d / "index.tsv", "w") as fi, \
                open(d / "alignments.txt", "w") as fa:
            fi.write("id\tT_input\tinput_dim\toffset\n")
            for u in utts:
                buf = np.ascontiguousarray(u.features, dtype="<f8").tobytes()
                fb.write(buf)
                fi.write(f"{u.id}\t{u.T_input}\t{u.features.shape[1]}\t{offset}\n")
                offset += len(buf)
                sil = " ".join("1" if s else "0" for s in u.silence)
                fa.write(f"{u.id}\t{' '.join(map(str, u.labels))}\t{' '.join(map(str, u.boundaries))}\t{sil}\n")
    manifest = {"spec": corpus.spec.to_dict(), "spec_hash": corpus.spec.digest(),
                "silence_variant": corpus.silence_variant,
                "splits": {k: len(v) for k, v in corpus.splits.items()}}
    (root / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    manifest = json.loads((root / "corpus.json").read_text())
    spec = CorpusSpec.from_dict(manifest["spec"])
    splits = {}
    for split in manifest["splits"]:
        d = root / split
        raw = (d / "features.f64").read_bytes()
        aligns = {}
        for line in (d / "alignments.txt").read_text().splitlines():
            uid, labels, bounds, sil = line.split("\t")
            aligns[uid] = ([int(x) for x in labels.split()], [int(x) for x in bounds.split()],
                           [s == "1" for s in sil.split()])
        utts = []
        for line in (d / "index.tsv").read_text().splitlines()[1:]:
            uid, T_in, dim, off = line.split("\t")
            T_in, dim, off = int(T_in), int(dim), int(off)
            feats = np.frombuffer(raw, dtype="<f8", count=T_in * dim, offset=off).reshape(T_in, dim).copy()
            labels, bounds, sil = aligns[uid]
            utts.append(Utterance(uid, feats, labels, bounds, sil))
        splits[split] = utts
    return Corpus(spec, splits, manifest["silence_variant"])
