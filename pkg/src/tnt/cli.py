"""Command-line entry point: ``tnt <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigError, InvalidSpec, TNTError
from .evaluation import read_reports_csv, write_reports_csv
from .model import load_model
from .objective import METHODS, AnnotatedSequence
from .pipeline import evaluate_model, finetune, run_pipeline, train_base, write_curve_files
from .synthdata import annotate_pairs, generate_corpus, read_jsonl, write_corpus, write_jsonl

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("tnt")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _existing_dir(path) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"output directory {path} does not exist")
    return path


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _existing_dir(args.out)
    digests = write_corpus(generate_corpus(cfg.task), cfg.task, out)
    for split, digest in digests.items():
        print(f"{split}.jsonl  sha256 {digest}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = _config(args)
    out = _existing_dir(args.out)
    train_base(cfg, args.data, out)
    print(f"wrote {out / 'model.json'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config(args)
    model = load_model(args.model)
    inputs = [s.input for s in read_jsonl(args.data)]
    max_len = args.max_len or cfg.task.decode_max_len
    gens = model.greedy_decode_batch(inputs, max_len)
    # raw generations; run `annotate` to attach negatives
    write_jsonl([AnnotatedSequence(tuple(i), tuple(g), ()) for i, g in zip(inputs, gens)], args.out)
    return EXIT_OK


def cmd_annotate(args) -> int:
    cfg = _config(args)
    seqs = read_jsonl(args.data)
    write_jsonl(annotate_pairs([(s.input, s.output) for s in seqs], cfg.task), args.out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _existing_dir(args.out)
    original = load_model(args.original)
    _, val_loss = finetune(cfg, original, read_jsonl(args.train), read_jsonl(args.val),
                           args.method, args.alpha, args.lr, out)
    print(f"best validation loss {val_loss:.6f}; wrote {out / 'model.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_model(args.model)
    refs = read_jsonl(args.references)
    report = evaluate_model(model, cfg.task, refs, args.method, args.alpha, args.split)
    write_reports_csv([report], args.out)
    print(json.dumps(report.row()))
    return EXIT_OK


def cmd_curves(args) -> int:
    out = _existing_dir(args.out)
    test = read_reports_csv(args.reports)
    val = read_reports_csv(args.val_reports) if args.val_reports else test
    curves = write_curve_files(test, val, out, args.similarity, args.max_rate)
    for c in curves:
        print(f"{c.label:<10} AUC {c.auc:.3f}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    reports = run_pipeline(cfg, out, jobs=args.jobs, resume=args.resume)
    print(f"{len(reports)} test reports written to {out / 'reports.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import format_table, run_suite

    results = run_suite(quick=args.quick)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tnt", description="Targeted negative training experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help, config=True):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        if config:
            p.add_argument("--config", help="TOML experiment config (defaults used if omitted)")
            p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = add("gen-data", cmd_gen_data, "write train/val/test corpus JSONL")
    p.add_argument("--out", required=True, help="existing output directory")

    p = add("train-base", cmd_train_base, "train the original model by likelihood on a corpus")
    p.add_argument("--data", required=True, help="directory holding train.jsonl and val.jsonl")
    p.add_argument("--out", required=True, help="existing output directory")

    p = add("generate", cmd_generate, "greedy generations for every input of a JSONL file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, help="decode length bound (default from the task)")

    p = add("annotate", cmd_annotate, "attach token annotations to the outputs of a JSONL file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("finetune", cmd_finetune, "update an original model with one objective setting")
    p.add_argument("--original", required=True, help="original model checkpoint")
    p.add_argument("--train", required=True, help="annotated update data")
    p.add_argument("--val", required=True, help="annotated validation data")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True, help="existing output directory")

    p = add("eval", cmd_eval, "score a model against the original model's generations")
    p.add_argument("--model", required=True)
    p.add_argument("--references", required=True, help="original generations (annotated JSONL)")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--method", default="model")
    p.add_argument("--alpha", type=float)
    p.add_argument("--split", default="test")

    p = add("curves", cmd_curves, "frontier curves and AUC from report CSVs", config=False)
    p.add_argument("--reports", required=True, help="test reports CSV")
    p.add_argument("--val-reports", help="validation reports CSV used for selection")
    p.add_argument("--similarity", default="bleu", choices=("bleu", "rouge_l", "seq_acc"))
    p.add_argument("--max-rate", type=float, help="largest threshold (default: highest validation rate)")
    p.add_argument("--out", required=True, help="existing output directory")

    p = add("pipeline", cmd_pipeline, "run the full experiment")
    p.add_argument("--out", help="run directory (default: out_dir from the config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run")

    p = add("verify", cmd_verify, "run the oracle and invariant suite", config=False)
    p.add_argument("--quick", action="store_true", help="fewer instances, shorter tiny-task training")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidSpec) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TNTError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
