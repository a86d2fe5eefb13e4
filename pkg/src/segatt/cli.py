"""``segatt`` command line driver.

Settings resolve in three layers: built-in defaults, then the ``--config``
JSON file, then command-line flags (highest precedence).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from segatt import __version__, checkpoint
from segatt.config import ConfigError, ExperimentConfig
from segatt.data import Corpus, concat_sequences, corpus_with_variant, generate, load_corpus, save_corpus
from segatt.eval import SweepResult, corpus_errors, score_table, sweep, wer_table
from segatt.length import StaticLengthTable
from segatt.model import SILENCE_VARIANTS, SegmentalModel
from segatt.search import (
    InstanceTooLargeError,
    MODES,
    SearchConfig,
    count_search_errors,
    decode_corpus,
    global_score,
    score_sequence,
)
from segatt.train import import_global, train

log = logging.getLogger("segatt")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config resolution


def resolve_config(args) -> ExperimentConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be a JSON object")
    if args.seed is not None:
        data["seed"] = args.seed
    if getattr(args, "silence", None) is not None:
        data["silence_variant"] = args.silence
    if getattr(args, "output_dir", None) is not None:
        data["output_dir"] = args.output_dir
    search = dict(data.get("search", {}))
    for flag, key in (("mode", "mode"), ("alpha", "alpha"), ("gamma", "gamma"), ("beam", "beam_size"),
                      ("delta_max", "delta_max")):
        val = getattr(args, flag, None)
        if val is not None:
            search[key] = val
    if getattr(args, "length_model", None) is not None:
        search["length_model"] = args.length_model
    data["search"] = search
    if getattr(args, "epochs", None) is not None:
        data["train"] = {**data.get("train", {}), "epochs": args.epochs}
    return ExperimentConfig.from_dict(data)


def write_manifest(path: Path, command: str, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
    }
    manifest.update(extra or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "data"


def ensure_corpus(cfg: ExperimentConfig) -> Corpus:
    """Load the generated corpus, creating it first if the directory is empty."""
    spec = cfg.corpus_spec()
    root = data_dir(cfg)
    if (root / "corpus.json").exists():
        corpus = load_corpus(root)
        if corpus.spec.digest() != spec.digest():
            raise ConfigError(f"{root} holds a corpus for a different spec; use another output_dir")
        return corpus
    corpus = generate(spec)
    save_corpus(corpus, root)
    return corpus


def variant_corpus(cfg: ExperimentConfig) -> Corpus:
    return corpus_with_variant(ensure_corpus(cfg), cfg.silence_variant, cfg.search_config().delta_max)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    spec = cfg.corpus_spec()
    corpus = generate(spec)
    save_corpus(corpus, data_dir(cfg))
    counts = {k: len(v) for k, v in corpus.splits.items()}
    write_manifest(data_dir(cfg) / "manifest.json", "gen-data", cfg,
                   {"spec_hash": spec.digest(), "splits": counts})
    print(f"spec_hash={spec.digest()}\t" + "\t".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    corpus = variant_corpus(cfg)
    mcfg = cfg.model_config()
    delta = cfg.search_config().delta_max
    static = StaticLengthTable.estimate(corpus.alignments("train"), mcfg.vocab_size, delta)
    out = Path(cfg.output_dir) / "train"
    if args.import_global:
        source = checkpoint.load_model(args.import_global)
        if source.config.window_mode != "global":
            raise UsageError(f"{args.import_global} is not a global-attention checkpoint")
        model = import_global(source, mcfg.length_model, cfg.init_seed(), static)
        if model.config != replace(mcfg, pool_factors=list(mcfg.pool_factors)):
            raise UsageError("imported model config differs from the experiment's model section")
    else:
        model = SegmentalModel.init(mcfg, cfg.init_seed())
        model.static_table = static
    extra = {"import_global": str(args.import_global) if args.import_global else None}
    if args.import_only:
        if not args.import_global:
            raise UsageError("--import-only needs --import-global")
        out.mkdir(parents=True, exist_ok=True)
        checkpoint.save(out / "best.ckpt", model, {"imported_from": str(args.import_global)})
        write_manifest(out / "manifest.json", "train", cfg, extra)
        print(f"wrote {out / 'best.ckpt'}")
        return 0
    tcfg = cfg.train_config()
    _, metrics = train(model, corpus["train"], tcfg, corpus["dev"], out_dir=out,
                       on_epoch=lambda ms: print(ms[-1].record(), flush=True))
    write_manifest(out / "manifest.json", "train", cfg, {**extra, "train_config": asdict(tcfg)})
    return 0


def _checkpoint_path(args, cfg: ExperimentConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "train" / "best.ckpt"


def _search_for(model: SegmentalModel, sc: SearchConfig) -> SearchConfig:
    kind = sc.length_model or model.config.length_model
    if model.config.window_mode == "segmental" and sc.mode == "simple" and kind != "neural":
        raise UsageError("simple search needs the neural length model (framewise scores)")
    return replace(sc, length_model=kind)


def experiment_id(split: str, model: SegmentalModel, sc: SearchConfig, C: int) -> str:
    if model.config.window_mode == "global":
        return f"{split}-global-b{sc.beam_size}-g{sc.gamma}" + (f"-c{C}" if C else "")
    return (f"{split}-{sc.mode}-{sc.length_model}-a{sc.alpha:g}-g{sc.gamma}-b{sc.beam_size}"
            f"-d{sc.delta_max}" + (f"-c{C}" if C else ""))


def _decode_setup(args):
    cfg = resolve_config(args)
    model = checkpoint.load_model(_checkpoint_path(args, cfg))
    sc = _search_for(model, cfg.search_config())
    utts = variant_corpus(cfg)[args.split]
    if args.limit:
        utts = utts[: args.limit]
    utts = concat_sequences(utts, args.concat)
    return cfg, model, sc, utts


def _scores(model, enc, labels, boundaries, sc):
    if model.config.window_mode == "global":
        return global_score(model, enc, labels, sc.gamma)
    return score_sequence(model, enc, labels, boundaries, sc.alpha, sc.gamma, sc.length_model)


def cmd_decode(args) -> int:
    cfg, model, sc, utts = _decode_setup(args)
    try:
        results = decode_corpus(model, utts, sc, args.jobs)
    except InstanceTooLargeError as e:
        raise UsageError(str(e)) from e
    name = experiment_id(args.split, model, sc, args.concat)
    out = Path(cfg.output_dir) / "decode" / name
    out.mkdir(parents=True, exist_ok=True)
    refs = [u.labels for u in utts]
    hyps = [r.best.labels for r in results]
    counts = corpus_errors(refs, hyps, model.config.silence_id)
    serr = count_search_errors(model, utts, sc, results)
    with open(out / "hyps.txt", "w") as f:
        for u, r in zip(utts, results):
            h = r.best
            fields = [f"id={u.id}", f"labels={' '.join(map(str, h.labels))}",
                      f"boundaries={' '.join(map(str, h.boundaries))}", f"score={h.normalized(sc.gamma):.10g}"]
            if args.dump_scores:
                fields.append("label_scores=" + " ".join(f"{x:.6f}" for x in h.label_scores))
                fields.append("length_scores=" + " ".join(f"{x:.6f}" for x in h.length_scores))
            f.write("\t".join(fields) + "\n")
    table = wer_table(name, [(name, counts)], {"search_err": [100.0 * serr]})
    (out / "report.txt").write_text(table.text() + "\n" + table.records())
    if args.dump_scores:
        with open(out / "scores.txt", "w") as f:
            for u, r in zip(utts, results):
                enc = model.encode(u.features)
                truth = _scores(model, enc, u.labels, u.boundaries, sc)
                recog = _scores(model, enc, r.best.labels, r.best.boundaries, sc)
                st = score_table(u.labels, truth.label_scores, r.best.labels, recog.label_scores)
                t = st.table(f"scores:{u.id}")
                f.write(f"# {u.id}\n" + t.text() + t.records() + "\n")
    write_manifest(out / "manifest.json", "decode", cfg,
                   {"checkpoint": str(_checkpoint_path(args, cfg)), "split": args.split, "concat": args.concat,
                    "limit": args.limit, "search": asdict(sc)})
    sys.stdout.write(table.text())
    return 0


def cmd_sweep(args) -> int:
    cfg, model, sc, utts = _decode_setup(args)
    alphas = [float(a) for a in args.alphas.split(",")]
    res: SweepResult = sweep(alphas, model, utts, sc, args.jobs)
    name = f"sweep-{experiment_id(args.split, model, replace(sc, alpha=0.0), args.concat)}"
    out = Path(cfg.output_dir) / "decode" / name
    out.mkdir(parents=True, exist_ok=True)
    table = res.table(name)
    (out / "report.txt").write_text(table.text() + f"best_alpha={res.best_alpha:g}\n\n" + table.records())
    write_manifest(out / "manifest.json", "sweep", cfg,
                   {"checkpoint": str(_checkpoint_path(args, cfg)), "alphas": alphas, "split": args.split})
    sys.stdout.write(table.text() + f"best_alpha={res.best_alpha:g}\n")
    return 0


def cmd_long_seq(args) -> int:
    cfg = resolve_config(args)
    model = checkpoint.load_model(_checkpoint_path(args, cfg))
    sc = _search_for(model, cfg.search_config())
    base = variant_corpus(cfg)[args.split]
    if args.limit:
        base = base[: args.limit]
    rows, lengths = [], []
    for C in (int(c) for c in args.concat_values.split(",")):
        utts = concat_sequences(base, C)
        results = decode_corpus(model, utts, sc, args.jobs)
        rows.append((f"C={C}", corpus_errors([u.labels for u in utts], [r.best.labels for r in results],
                                              model.config.silence_id)))
        lengths.append(sum(u.T for u in utts) / len(utts))
    name = f"longseq-{experiment_id(args.split, model, sc, 0)}"
    table = wer_table(name, rows, {"mean_frames": lengths})
    out = Path(cfg.output_dir) / "decode" / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(table.text() + "\n" + table.records())
    write_manifest(out / "manifest.json", "long-seq", cfg,
                   {"checkpoint": str(_checkpoint_path(args, cfg)), "concat_values": args.concat_values})
    sys.stdout.write(table.text())
    return 0


def cmd_verify(args) -> int:
    from segatt.verify import run_all

    results = run_all(args.checkpoint or ())
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"verdict: {'all properties passed' if ok else 'FAILED'}")
    return 0 if ok else 1


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment JSON file")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--output-dir", help="experiment directory (overrides config)")
    p.add_argument("--silence", choices=SILENCE_VARIANTS, help="silence variant")


def _search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="model checkpoint (default: <output_dir>/train/best.ckpt)")
    p.add_argument("--split", default="dev", choices=("train", "dev", "eval"))
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--alpha", type=float, help="length model scale")
    p.add_argument("--gamma", type=int, choices=(0, 1), help="length normalization")
    p.add_argument("--beam", type=int, help="beam size")
    p.add_argument("--delta-max", type=int, help="maximum segment length")
    p.add_argument("--length-model", choices=("none", "static", "neural"), help="length model used in search")
    p.add_argument("--jobs", type=int, default=1, help="decoding processes")
    p.add_argument("--limit", type=int, default=0, help="decode only the first N sequences")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segatt", description="Segmental attention experiment driver")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on the corpus alignments")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--delta-max", type=int, help="static length model support")
    p.add_argument("--import-global", metavar="PATH", help="initialise from a global-attention checkpoint")
    p.add_argument("--import-only", action="store_true", help="write the imported model without training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a split and score it")
    _common(p)
    _search_flags(p)
    p.add_argument("--concat", type=int, default=1, metavar="C", help="join C consecutive sequences")
    p.add_argument("--dump-scores", action="store_true", help="write per-label score tables")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", help="WER over length model scales")
    _common(p)
    _search_flags(p)
    p.add_argument("--alphas", default="0,0.01,0.1,0.3,1.0")
    p.add_argument("--concat", type=int, default=1, metavar="C")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("long-seq", help="WER as sequences are concatenated")
    _common(p)
    _search_flags(p)
    p.add_argument("--concat-values", default="1,2,4,10,20")
    p.set_defaults(func=cmd_long_seq)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--checkpoint", action="append", help="also verify this checkpoint file (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, checkpoint.CheckpointError, FileNotFoundError) as e:
        print(f"segatt {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
