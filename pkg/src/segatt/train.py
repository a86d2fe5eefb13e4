"""Framewise cross-entropy training against given alignments."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from segatt import checkpoint
from segatt import grad as G
from segatt.data import Utterance
from segatt.length import neural_segment_log_prob, shifted_inputs
from segatt.model import ModelConfig, Segmentation, SegmentalModel

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    length_model: bool = True
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("epochs, batch_size, lr and clip_norm must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    total: G.Tensor
    label: float
    length: float
    num_labels: int


def loss(model: SegmentalModel, utt: Utterance, use_length: bool = True) -> LossBreakdown:
    """Negative log likelihood of the reference labels and (optionally) boundaries.

    The neural length term is written framewise: binary cross entropy of
    ``q_t`` with target 1 at segment ends and 0 elsewhere, which telescopes
    into ``-sum_s log p(t_s | ...)``.
    """
    enc = model.encode(utt.features)
    if enc.T != utt.T:
        raise ValueError(f"{utt.id}: alignment covers {utt.T} frames, encoder produced {enc.T}")
    if model.config.window_mode == "global":
        _, label_ll = model.global_log_prob(utt.labels, enc)
        num = len(utt.labels) + 1
    else:
        _, label_ll = model.seq_log_prob(utt.labels, Segmentation(utt.boundaries, enc.T), enc)
        num = len(utt.labels)
    terms = [G.neg(label_ll)]
    length_nll = 0.0
    if use_length and model.length is not None and model.config.window_mode == "segmental":
        omega = utt.blank_alignment()
        logits = model.length.teacher_logits(enc, shifted_inputs(omega))
        # -log q = -log_sigmoid(z); -log(1 - q) = -log_sigmoid(-z)
        sign = np.where(np.asarray(omega) != 0, 1.0, -1.0)
        bce = G.neg(G.total(G.log_sigmoid(G.scale(logits, sign))))
        terms.append(bce)
        length_nll = bce.item()
    total = G.add_n(terms)
    return LossBreakdown(total, -label_ll.item(), length_nll, num)


def direct_length_nll(model: SegmentalModel, utt: Utterance) -> float:
    """``-sum_s log p(t_s | ...)`` computed segment by segment from the q values."""
    enc = model.encode(utt.features)
    q = model.length.q_values(enc, utt.blank_alignment())
    prev = 0
    total = 0.0
    for t in utt.boundaries:
        total -= neural_segment_log_prob(prev, t, q)
        prev = t
    return total


# --------------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    label_loss: float
    length_loss: float

    def record(self) -> str:
        return (f"epoch={self.epoch}\tsplit={self.split}\tloss={self.loss:.6f}"
                f"\tlabel_loss={self.label_loss:.6f}\tlength_loss={self.length_loss:.6f}")


def evaluate_loss(model: SegmentalModel, utts: Sequence[Utterance], use_length: bool = True) -> tuple[float, float, float]:
    """Per-label average of (total, label, length) loss, no gradients."""
    lab = lng = 0.0
    n = 0
    for u in utts:
        br = loss(model, u, use_length)
        lab += br.label
        lng += br.length
        n += br.num_labels
    n = max(n, 1)
    return (lab + lng) / n, lab / n, lng / n


def _opt_state_arrays(moments: G.AdamMoments) -> dict[str, np.ndarray]:
    out = {}
    for k, v in moments.m.items():
        out[f"opt.m.{k}"] = v
        out[f"opt.v.{k}"] = moments.v[k]
    return out


def _opt_state_from(arrays: dict[str, np.ndarray], step: int) -> G.AdamMoments:
    m = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}
    v = {k[len("opt.v."):]: a for k, a in arrays.items() if k.startswith("opt.v.")}
    return G.AdamMoments(m, v, step)


def train(
    model: SegmentalModel,
    train_utts: Sequence[Utterance],
    config: TrainConfig,
    dev_utts: Sequence[Utterance] = (),
    out_dir: str | Path | None = None,
    on_epoch: Callable[[list[EpochMetrics]], None] | None = None,
) -> tuple[SegmentalModel, list[EpochMetrics]]:
    """Adam over shuffled mini-batches; returns the best-by-dev-loss model.

    With ``out_dir`` the run writes ``epoch-NNN.ckpt`` (model plus optimiser
    state), ``best.ckpt`` and ``metrics.tsv``, and resumes from the latest
    epoch checkpoint found there.
    """
    hyper = G.AdamHyper(lr=config.lr)
    moments = G.AdamMoments()
    metrics: list[EpochMetrics] = []
    start_epoch = 1
    best_loss = math.inf
    best_model = model.clone()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        latest = sorted(out.glob("epoch-*.ckpt"))
        if latest:
            model, meta, arrays = checkpoint.load(latest[-1])
            moments = _opt_state_from(arrays, meta["adam_step"])
            start_epoch = meta["epoch"] + 1
            best_loss = meta["best_loss"]
            best_model = checkpoint.load_model(out / "best.ckpt") if (out / "best.ckpt").exists() else model.clone()
            metrics = [EpochMetrics(**m) for m in meta["metrics"]]
            log.info("resuming from %s", latest[-1])
    params = [p for p in model.parameters() if p.trainable]
    use_length = config.length_model
    for epoch in range(start_epoch, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_utts))
        lab_sum = len_sum = 0.0
        n_lab = 0
        for b in range(0, len(order), config.batch_size):
            batch = [train_utts[i] for i in order[b:b + config.batch_size]]
            grads = {p.name: np.zeros_like(p.data) for p in params}
            for utt in batch:
                with G.Tape() as tape:
                    br = loss(model, utt, use_length)
                if not math.isfinite(br.total.item()):
                    raise TrainingDivergedError(f"non-finite loss on {utt.id} in epoch {epoch}")
                tape.backward(br.total)
                for p in params:
                    if p.grad is not None:
                        grads[p.name] += p.grad
                        p.grad = None
                lab_sum += br.label
                len_sum += br.length
                n_lab += br.num_labels
            for k in grads:
                grads[k] /= len(batch)
            G.clip_by_global_norm(grads, config.clip_norm)
            G.adam_step(params, grads, moments, hyper)
        n_lab = max(n_lab, 1)
        metrics.append(EpochMetrics(epoch, "train", (lab_sum + len_sum) / n_lab, lab_sum / n_lab, len_sum / n_lab))
        if dev_utts:
            d_tot, d_lab, d_len = evaluate_loss(model, dev_utts, use_length)
            metrics.append(EpochMetrics(epoch, "dev", d_tot, d_lab, d_len))
            if not math.isfinite(d_tot):
                raise TrainingDivergedError(f"non-finite dev loss in epoch {epoch}")
            score = d_tot
        else:
            score = metrics[-1].loss
        if score < best_loss:
            best_loss = score
            best_model = model.clone()
        for m in metrics[-2 if dev_utts else -1:]:
            log.info(m.record())
        if out is not None:
            if best_model is not None and score == best_loss:
                checkpoint.save(out / "best.ckpt", best_model, {"epoch": epoch, "dev_loss": best_loss})
            meta = {"epoch": epoch, "adam_step": moments.step, "best_loss": best_loss,
                    "metrics": [asdict(m) for m in metrics], "train_config": asdict(config)}
            checkpoint.save(out / f"epoch-{epoch:03d}.ckpt", model, meta, _opt_state_arrays(moments))
            (out / "metrics.tsv").write_text("".join(m.record() + "\n" for m in metrics))
        if on_epoch is not None:
            on_epoch(metrics)
    return best_model, metrics


# --------------------------------------------------------------------------


def import_global(global_model: SegmentalModel, length_model: str = "none", seed: int = 0,
                  static_table=None) -> SegmentalModel:
    """Segmental model sharing every label-model and encoder parameter of a global model.

    Length-model parameters (if any) are freshly initialised from ``seed``.
    """
    gcfg = global_model.config
    cfg = replace(gcfg, window_mode="segmental", length_model=length_model, pool_factors=list(gcfg.pool_factors))
    fresh = SegmentalModel.init(cfg, seed)
    for name, p in fresh.params.items():
        if name.startswith("len."):
            continue
        src = global_model.params.get(name)
        if src is None or src.shape != p.shape:
            raise G.DimensionError(
                f"import_global: parameter {name} {None if src is None else list(src.shape)} "
                f"incompatible with {list(p.shape)}"
            )
        p.data = src.data.copy()
    fresh.static_table = static_table
    return fresh


def check_compatible(global_cfg: ModelConfig, seg_cfg: ModelConfig) -> None:
    fields = ("input_dim", "enc_layers", "enc_dim", "pool_factors", "dec_dim", "vocab_size", "att_dim",
              "ctx_dependency")
    bad = [f for f in fields if getattr(global_cfg, f) != getattr(seg_cfg, f)]
    if bad:
        raise G.DimensionError(f"import_global: configs differ in {bad}")
