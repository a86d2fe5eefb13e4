"""Self-check suite behind ``segatt verify``.

Each check returns a :class:`CheckResult`; the suite never raises for a
failing property, it reports it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from segatt import checkpoint
from segatt import grad as G
from segatt.data import CorpusSpec, generate
from segatt.length import StaticLengthTable, log_q_terms, neural_segment_log_prob
from segatt.model import ModelConfig, SegmentalModel
from segatt.search import SearchConfig, oracle_search, segmental_search, simple_search
from segatt.train import direct_length_nll, loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


def tiny_config(**kw) -> ModelConfig:
    base = dict(input_dim=4, enc_layers=2, enc_dim=4, pool_factors=[1, 2], dec_dim=4, vocab_size=4,
                att_dim=4, len_dim=4, length_model="neural")
    base.update(kw)
    return ModelConfig(**base)


def tiny_utterance(seed: int = 0, downsampling: int = 2):
    spec = CorpusSpec(num_labels=3, input_dim=4, downsampling=downsampling, num_train=1, num_dev=0, num_eval=0,
                      min_labels=2, max_labels=3, seg_len_min=1, seg_len_max=3, max_seg_len=4, noise=0.5, seed=seed)
    return generate(spec)["train"][0]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def gradient_check(model: SegmentalModel, utt, eps: float = 1e-4, points: int = 3) -> dict[str, float]:
    """Relative error of every parameter gradient against central differences.

    The maxout readout has kinks, so large steps are unsafe; 1e-4 keeps
    truncation and round-off both well below 1e-4 relative error.
    """
    with G.Tape() as tape:
        br = loss(model, utt)
    tape.backward(br.total)
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in model.params.items()}
    G.zero_grads(model.parameters())
    out = {}
    for name, p in model.params.items():
        num = G.numerical_grad(lambda: loss(model, utt).total.item(), p.data, eps, points)
        out[name] = relative_error(analytic[name], num)
    return out


def check_gradients() -> CheckResult:
    model = SegmentalModel.init(tiny_config(), seed=1)
    errs = gradient_check(model, tiny_utterance(seed=2))
    worst = max(errs, key=errs.get)
    return CheckResult("gradients match finite differences", errs[worst] < 1e-4, f"worst {worst}={errs[worst]:.2e}")


def check_oracle_equivalence(seeds=range(3), Ts=(2, 4, 6), deltas=(2, 3)) -> CheckResult:
    bad = 0
    n = 0
    rng = np.random.default_rng(0)
    for seed, T, delta, lm in itertools.product(seeds, Ts, deltas, ("none", "static", "neural")):
        cfg = tiny_config(vocab_size=3, pool_factors=[1, 1], ctx_dependency=False, length_model=lm)
        model = SegmentalModel.init(cfg, seed)
        model.static_table = StaticLengthTable(rng.uniform(1, delta, size=cfg.vocab_size), delta)
        enc = model.encode(rng.normal(size=(T, cfg.input_dim)))
        sc = SearchConfig(beam_size=10**6, alpha=0.5, gamma=seed % 2, delta_max=delta, mode="oracle",
                          recombine=lm != "neural")
        ref = oracle_search(model, enc, sc).best
        decoders = [segmental_search] + ([simple_search] if lm == "neural" else [])
        for dec in decoders:
            got = dec(model, enc, sc).best
            n += 1
            if (got.labels, got.boundaries, got.log_score) != (ref.labels, ref.boundaries, ref.log_score):
                bad += 1
    return CheckResult("beam decoders equal the exhaustive oracle", bad == 0, f"{n - bad}/{n} instances")


def check_normalization() -> CheckResult:
    rng = np.random.default_rng(3)
    model = SegmentalModel.init(tiny_config(), seed=4)
    enc = model.encode(rng.normal(size=(12, 4)))
    worst = 0.0
    adv = model.advance(model.initial_state(), 0)
    for lo in range(1, enc.T + 1):
        for hi in range(lo, enc.T + 1):
            _, w = model.attend(adv, enc, (lo, hi))
            worst = max(worst, abs(w.data.sum() - 1))
    logp, _ = model.segment_label_scores(adv, enc, 0, enc.T)
    worst = max(worst, np.abs(np.exp(logp).sum(axis=1) - 1).max())
    table = StaticLengthTable(rng.uniform(0, 25, size=6), 20)
    worst = max(worst, np.abs(np.exp(table.log_probs()).sum(axis=1) - 1).max())
    # telescoping: end probabilities over 1..T plus "no end" sum to one
    q = rng.uniform(0.01, 0.99, size=15)
    ends = sum(np.exp(neural_segment_log_prob(0, t, q)) for t in range(1, 16))
    survive = np.exp(np.log1p(-q).sum())
    worst = max(worst, abs(ends + survive - 1))
    return CheckResult("distributions are normalized", worst < 1e-10, f"max deviation {worst:.1e}")


def check_length_identity() -> CheckResult:
    model = SegmentalModel.init(tiny_config(), seed=5)
    utt = tiny_utterance(seed=6)
    framewise = loss(model, utt).length
    direct = direct_length_nll(model, utt)
    return CheckResult("framewise length loss equals segment NLL", abs(framewise - direct) < 1e-10,
                       f"|diff|={abs(framewise - direct):.1e}")


def check_checkpoint(path: str | Path | None = None) -> CheckResult:
    """Round trip plus corruption detection; with ``path`` only that file is checked."""
    if path is not None:
        try:
            checkpoint.load(path)
        except checkpoint.CheckpointError as e:
            return CheckResult(f"checkpoint {path}", False, str(e))
        return CheckResult(f"checkpoint {path}", True, "checksum ok")
    model = SegmentalModel.init(tiny_config(), seed=7)
    blob = checkpoint.dumps(model, {"k": 1})
    back, meta, _ = checkpoint.loads(blob)
    same = all(np.array_equal(p.data, back.params[n].data) for n, p in model.params.items())
    corrupted = bytearray(blob)
    corrupted[len(blob) // 2] ^= 0xFF
    try:
        checkpoint.loads(bytes(corrupted))
        detected = False
    except checkpoint.ChecksumError:
        detected = True
    return CheckResult("checkpoint round trip and corruption detection", same and detected and meta == {"k": 1})


def check_log_q_stable() -> CheckResult:
    lq, l1 = log_q_terms(np.array([-800.0, 0.0, 800.0]))
    ok = bool(np.all(np.isfinite(lq)) and np.all(np.isfinite(l1)))
    return CheckResult("length log terms finite for extreme logits", ok)


CHECKS: list[Callable[[], CheckResult]] = [
    check_gradients,
    check_oracle_equivalence,
    check_normalization,
    check_length_identity,
    check_checkpoint,
    check_log_q_stable,
]


def run_all(checkpoints=()) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        try:
            results.append(check())
        except Exception as e:  # a crashing check is a failed property
            results.append(CheckResult(check.__name__, False, f"{type(e).__name__}: {e}"))
    results += [check_checkpoint(p) for p in checkpoints]
    return results
