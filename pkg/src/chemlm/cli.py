"""Command-line entry point: ``chemlm <subcommand> ...``.

Exit codes: 0 success, 1 I/O error, 2 validation error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, config as cfgmod
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import corpus_stats
from .errors import ChemLMError, DimMismatch, ValidationError
from .model import embed_many, init_state
from .tokenizer import Vocabulary, build_vocabulary, encode, read_corpus
from .train import (
    MetricsWriter,
    Pretrainer,
    encode_corpus,
    finetune,
    read_labeled_csv,
    read_split,
)

log = logging.getLogger("chemlm")


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("run configuration")
    g.add_argument("--config", type=Path, help="key = value configuration file")
    g.add_argument("--seed", type=int, help="root seed for all randomness")
    g.add_argument("--threads", type=int, default=1, help="cap on numeric worker threads (default 1)")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    for key in cfgmod.SCHEMA:
        if key == "seed":
            continue
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE", help=argparse.SUPPRESS)


def _run_config(args) -> cfgmod.RunConfig:
    pairs = []
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append((key.strip(), value.strip()))
    for key in cfgmod.SCHEMA:
        value = getattr(args, f"cfg_{key}", None)
        if value is not None:
            pairs.append((key, value))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    return cfgmod.load_config(args.config, pairs)


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _load_model(args):
    state, header, extra = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    vocab_path = args.vocab or header.get("vocab_path")
    if not vocab_path:
        raise ValidationError(f"{args.checkpoint} records no vocabulary; pass --vocab")
    vocab = Vocabulary.load(_require(Path(vocab_path), "vocabulary"))
    if len(vocab) != state.config.vocab_size:
        raise DimMismatch(
            f"vocabulary {vocab_path} has {len(vocab)} tokens but checkpoint {args.checkpoint} "
            f"expects {state.config.vocab_size}"
        )
    return state, vocab, header, extra


def _write_kv_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, repr(v) if isinstance(v, float) else v])


# subcommands


def cmd_vocab(args) -> int:
    vocab = build_vocabulary(read_corpus(_require(args.corpus, "corpus")))
    vocab.save(args.out)
    log.info("wrote %d tokens to %s", len(vocab), args.out)
    return 0


def cmd_stats(args) -> int:
    stats = corpus_stats(read_corpus(_require(args.corpus, "corpus")))
    if args.out:
        _write_kv_csv(args.out, stats.rows())
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in stats.rows():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
    return 0


def cmd_pretrain(args) -> int:
    rc = _run_config(args)
    vocab = Vocabulary.load(_require(args.vocab, "vocabulary"))
    lines = read_corpus(_require(args.corpus, "corpus"))
    seqs, skipped = encode_corpus(lines, vocab)
    if skipped:
        log.warning("skipped %d corpus lines that could not be encoded", len(skipped))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out)
    metrics = out / "metrics.csv"
    if args.resume is not None:
        trainer = Pretrainer.resume(_require(args.resume, "checkpoint"), vocab, seqs)
        _truncate_metrics(metrics, trainer.step)
    else:
        trainer = Pretrainer(init_state(rc.encoder(len(vocab))), vocab, seqs, rc.train(), rc.buckets())
    sink = MetricsWriter(metrics, echo=not args.quiet, append=args.resume is not None)
    trainer.sink = sink
    try:
        trainer.run(checkpoint_dir=out, vocab_path=Path(args.vocab).resolve())
        trainer.save(out / "final.mlfc", Path(args.vocab).resolve())
    finally:
        sink.close()
    return 0


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop rows logged after ``step`` so a resumed run does not repeat steps."""
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
    path.write_text("".join(keep), encoding="utf-8")


def cmd_embed(args) -> int:
    state, vocab, _, _ = _load_model(args)
    lines = read_corpus(_require(args.corpus, "corpus"))
    seqs = [encode(s.strip(), vocab, i) for i, s in enumerate(lines)]
    emb = embed_many(state, seqs)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["smiles"] + [f"e{i}" for i in range(state.config.hidden)])
        for s, row in zip(lines, emb):
            w.writerow([s.strip()] + [repr(float(x)) for x in row])
    return 0


def cmd_finetune(args) -> int:
    rc = _run_config(args)
    state, vocab, header, _ = _load_model(args)
    vocab_path = str(Path(args.vocab).resolve()) if args.vocab else header.get("vocab_path")
    data = read_labeled_csv(_require(args.data, "labeled dataset"))
    split = read_split(_require(args.split, "split file"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out)
    result = finetune(state, vocab, data, split, rc.train(), task=rc["task"], mode=rc["mode"])
    _write_kv_csv(out / "metrics.csv", [("best_epoch", result.best_epoch)] + sorted(result.metrics.items()))
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        preds = np.asarray(result.test_predictions).reshape(len(split["test"]), -1)
        w.writerow(["index"] + [f"p{j}" for j in range(preds.shape[1])])
        for i, row in zip(split["test"], preds):
            w.writerow([int(i)] + [repr(float(x)) for x in row])
    extra = {f"head.{k}": p.data for k, p in result.head.params.items()}
    for key in ("target_mean", "target_std", "feature_mean", "feature_std"):
        value = getattr(result, key)
        if value is not None:
            extra[f"head.{key}"] = np.asarray(value, dtype=np.float64)
    save_checkpoint(out / "finetuned.mlfc", result.state,
                    {"kind": "finetune", "task": rc["task"], "mode": rc["mode"],
                     "vocab_path": vocab_path}, extra)
    lines = [f"task: {rc['task']}", f"mode: {rc['mode']}", f"best epoch (lowest validation loss): {result.best_epoch}"]
    lines += [f"{k}: {v:.6g}" for k, v in sorted(result.metrics.items())]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_analyze_attention(args) -> int:
    rc = _run_config(args)
    state, vocab, _, _ = _load_model(args)
    geoms = analysis.read_geometries(_require(args.geometries, "geometry file"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out)
    report = analysis.attention_distance_cosine(
        state, vocab, geoms, rc.layers(state.config.layers),
        transform=rc["distance_transform"], d0=rc["distance_d0"], max_len=rc["analysis_max_len"],
    )
    analysis.write_cosine_csv(out / "attention_cosine.csv", report)
    lines = [f"molecules read: {len(geoms)}", f"skipped (alignment mismatch): {report.skipped}"]
    lines += [f"layer {l} {c:<6} mean cosine {m:.4f} over {n} molecules" for l, c, m, n in report.rows]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def _read_pairs(path: Path):
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec or rec[0].startswith("#"):
                continue
            if i == 0 and rec[0].strip().lower() in ("smiles_a", "a", "smiles1"):
                continue
            if len(rec) != 2:
                raise ValidationError(f"{path}:{i + 1}: expected two SMILES per line")
            pairs.append((rec[0].strip(), rec[1].strip()))
    return pairs


def cmd_similarity(args) -> int:
    rc = _run_config(args)
    state, vocab, _, _ = _load_model(args)
    pairs = _read_pairs(_require(args.pairs, "pair file"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out)
    report = analysis.embedding_similarity_correlation(
        state, vocab, pairs, rc["fingerprint_width"], rc["fingerprint_max_n"]
    )
    analysis.write_similarity_csv(out / "similarity.csv", report)
    corr = [("pearson_dist_vs_tanimoto", report.pearson_tanimoto), ("pearson_dist_vs_shared_ngrams", report.pearson_shared)]
    _write_kv_csv(out / "correlations.csv", corr)
    lines = [f"pairs: {len(pairs)}"] + [f"{k}: {v:.4f}" for k, v in corr]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chemlm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vocab", help="build a vocabulary file from a corpus")
    p.add_argument("corpus", type=Path)
    p.add_argument("out", type=Path)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("stats", help="framed-length statistics of a corpus (CSV metric,value)")
    p.add_argument("corpus", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="masked-language-model pretraining")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true", help="do not echo metrics to stdout")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fit a prediction head (frozen or fine-tuned encoder)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="CSV smiles,target1[,...]")
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--vocab", type=Path)
    _common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("embed", help="mean-pooled embeddings of every corpus line")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--vocab", type=Path)
    _common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("analyze-attention", help="attention vs interatomic distance cosines")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--geometries", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--vocab", type=Path)
    _common(p)
    p.set_defaults(func=cmd_analyze_attention)

    p = sub.add_parser("similarity", help="embedding distance vs fingerprint similarity")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--pairs", type=Path, required=True, help="CSV with two SMILES per line")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--vocab", type=Path)
    _common(p)
    p.set_defaults(func=cmd_similarity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", None)
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except ChemLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; resume from the latest step_N.mlfc with --resume", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
