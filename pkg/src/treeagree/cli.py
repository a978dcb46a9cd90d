"""Command line entry point: ``treeagree <command> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import experiments as X
from .grammar import (
    UnsatisfiableError,
    builtin_vocab,
    corpus_stats,
    gen_corpus,
    is_minimal_clause,
    load_builtin_grammar,
    nouns_disagree,
    stats_csv,
)
from .models import ARCHS, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, fine_tune, train
from .treebank import CorpusFormatError, read_corpus, write_corpus

OUTDIR_ENV = "TREEAGREE_OUTDIR"

log = logging.getLogger("treeagree")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _load(path, loader):
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file: {path}")
    return loader(path)


def _config(args, seeds=(0,)) -> TrainConfig:
    return TrainConfig(
        d_emb=args.d_emb, d_h=args.d_h, learning_rate=args.lr, max_epochs=args.max_epochs,
        eval_every_n_sentences=args.eval_every, seeds=tuple(seeds),
        embeddings_trainable=args.train_embeddings)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args):
    grammar = load_builtin_grammar(args.variant)
    exclude = set()
    for path in args.exclude:
        exclude |= {e.sentence for e in _load(path, read_corpus)}
    accept = None
    if args.minimal_disagree:
        accept = lambda d: is_minimal_clause(d) and nouns_disagree(d)  # noqa: E731
    examples = gen_corpus(
        grammar, args.n, args.seed, min_attractors=args.min_attractors,
        max_attractors=args.max_attractors, exclude=exclude, balance=args.balance,
        pp_rate=args.pp_target, accept=accept)
    write_corpus(args.out, examples)
    sys.stdout.write(stats_csv(corpus_stats(examples)))
    return 0


def cmd_stats(args):
    sys.stdout.write(stats_csv(corpus_stats(_load(args.corpus, read_corpus))))
    return 0


def cmd_train(args):
    train_set = _load(args.train, read_corpus)
    val_set = _load(args.val, read_corpus)
    config = _config(args, (args.seed,))
    bundle = init_params(args.model, builtin_vocab(), config.d_emb, config.d_h, args.seed,
                         embeddings_trainable=config.embeddings_trainable)
    best, history = train(args.model, bundle, train_set, val_set, config, args.seed)
    best.meta["seed"] = args.seed
    save_checkpoint(args.out, best)
    if args.history:
        Path(args.history).write_text(X.history_csv({(args.model, args.seed): history}))
    last = history[-1]
    print(f"trained {args.model}: {last.sentences_seen} sentences, "
          f"best validation loss {min(r.validation_loss for r in history):.4f}")
    return 0


def cmd_eval(args):
    bundle = _load(args.checkpoint, load_checkpoint)
    corpus = _load(args.corpus, read_corpus)
    constructed = _load(args.constructed, read_corpus) if args.constructed else None
    table = X.attractor_table(bundle, corpus, constructed)
    seed = bundle.meta.get("seed", "")
    rows = [(bundle.arch, seed, name, n, acc) for name, n, acc in table]
    text = X.rows_csv(["model", "seed", "split", "n", "accuracy"], rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_finetune(args):
    bundle = _load(args.checkpoint, load_checkpoint)
    aug = _load(args.aug, read_corpus)
    config = TrainConfig(d_emb=bundle.d_emb, d_h=bundle.d_h, learning_rate=args.lr)
    tuned = fine_tune(bundle, aug, config, rng_seed=args.seed)
    save_checkpoint(args.out, tuned)
    print(f"fine-tuned {bundle.arch}: {tuned.meta['fine_tune_updates']} updates")
    return 0


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    rows = X.gradient_suite(args.models, args.d_h, args.examples, args.seed)
    worst = 0.0
    for model, d_h, n, err in rows:
        print(f"{model:<13} d_h={d_h} examples={n} max_rel_error={err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tolerance
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, "
          f"tolerance {args.tolerance:g}, {time.perf_counter() - t0:.1f}s)")
    return 0 if ok else 1


def _exp_spec(args) -> X.ExperimentSpec:
    return X.ExperimentSpec(
        outdir=Path(args.outdir), models=tuple(args.models), seeds=tuple(args.seeds),
        config=_config(args, args.seeds), n_train=args.n_train, n_val=args.n_val,
        n_hard=args.n_hard, n_ambig=args.n_ambig, n_aug=args.n_aug,
        corpus_seed=args.corpus_seed, workers=args.workers)


def _finish(outcome, report):
    print(report.read_text(), end="")
    return 0 if outcome.passed else 1


def cmd_exp1(args):
    spec = _exp_spec(args)
    return _finish(X.run_exp1(spec), spec.outdir / "exp1" / "report.txt")


def cmd_exp2(args):
    spec = _exp_spec(args)
    return _finish(X.run_exp2(spec), spec.outdir / "exp2" / "report.txt")


# --------------------------------------------------------------------------
# parser


def _add_train_opts(p, eval_every=1000):
    p.add_argument("--d-emb", type=_positive_int, default=50)
    p.add_argument("--d-h", type=_positive_int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--max-epochs", type=_positive_int, default=50)
    p.add_argument("--eval-every", type=_positive_int, default=eval_every,
                   help=f"validate after this many training sentences (default {eval_every})")
    p.add_argument("--train-embeddings", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treeagree", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="sample a corpus from the builtin grammar")
    p.add_argument("--variant", choices=("test", "augmentation"), default="test")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude", action="append", default=[], metavar="CORPUS",
                   help="skip sentences present in this corpus (repeatable)")
    p.add_argument("--min-attractors", type=int)
    p.add_argument("--max-attractors", type=int)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--pp-target", type=float, nargs="?", const=X.PP_TARGET, default=None,
                   metavar="RATE", help="resample to this PP-presence rate (default 1/3)")
    p.add_argument("--minimal-disagree", action="store_true",
                   help="only 'the N V the N' clauses whose nouns differ in number")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", help="print corpus statistics as CSV")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train one model with early stopping")
    p.add_argument("--model", choices=ARCHS, required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history")
    _add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy per attractor split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--constructed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("finetune", help="one epoch over an augmentation corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--aug", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.001)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("gradcheck", help="finite-difference check of every architecture")
    p.add_argument("--models", nargs="+", choices=ARCHS, default=list(ARCHS))
    p.add_argument("--d-h", type=_positive_int, nargs="+", default=[4])
    p.add_argument("--examples", type=_positive_int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    for name, func, text in (("exp1", cmd_exp1, "train all models on generated corpora"),
                             ("exp2", cmd_exp2, "fine-tune exp1 models on augmentation data")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--outdir", default=os.environ.get(OUTDIR_ENV, "runs"))
        p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
        p.add_argument("--models", nargs="+", choices=ARCHS, default=list(ARCHS))
        p.add_argument("--n-train", type=_positive_int, default=8000)
        p.add_argument("--n-val", type=_positive_int, default=800)
        p.add_argument("--n-hard", type=_positive_int, default=400)
        p.add_argument("--n-ambig", type=_positive_int, default=400)
        p.add_argument("--n-aug", type=_positive_int, default=500)
        p.add_argument("--corpus-seed", type=int, default=1234)
        p.add_argument("--workers", type=_positive_int, default=1)
        _add_train_opts(p, X.EXPERIMENT_EVAL_EVERY)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, CorpusFormatError, UnsatisfiableError, ValueError) as e:
        print(f"treeagree {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
