"""Command-line entry point: ``csrec {gen,train,evaluate,sweep,groups}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict

from . import __version__
from .data import (
    DataError,
    GROUP_LABELS,
    SyntheticSpec,
    format_synthetic_spec,
    generate_synthetic,
    group_users_by_share_count,
    leave_one_out_split,
    load_corpus,
    read_synthetic_spec,
    save_corpus,
)
from .evaluation import evaluate, group_report, parse_candidates
from .persist import export_text, load_embeddings, save_embeddings, sha256_file, write_json
from .pipeline import (
    DEFAULT_ALPHAS,
    DEFAULT_KS,
    DEFAULT_LAMBDAS,
    MODELS,
    TRAINABLE,
    fit,
    run_sweep,
    scorer_for,
    select_best,
)
from .training import DivergedError, TrainConfig

logger = logging.getLogger("csrec")

EXIT_DATA = 1
EXIT_DIVERGED = 3


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _add_data_args(p, shares_required=False):
    p.add_argument("--interactions", required=True, metavar="PATH")
    p.add_argument("--shares", required=shares_required, metavar="PATH")
    p.add_argument("--explicit", action="store_true", help="read ratings (needs a rating column)")
    p.add_argument("--strict", action="store_true", help="reject share ids absent from interactions")
    p.add_argument("--split-seed", type=int, default=None, help="leave-one-out seed (default: --seed)")


def _add_model_args(p):
    p.add_argument("--model", choices=MODELS, default="csr")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--lambda-s", type=float, default=0.01)
    p.add_argument("--lambda-p", type=float, default=0.01)
    p.add_argument("--lambda-q", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negatives", type=int, default=1, help="negatives per positive (pair-wise)")
    p.add_argument("--init-scale", type=float, default=0.01)
    p.add_argument("--manner", choices=("pairwise", "pointwise"), default="pairwise",
                   help="loss manner for csr (other MF models are pair-wise)")
    p.add_argument("--no-symmetrize", dest="symmetrize", action="store_false")
    p.add_argument("--freeze-q", action="store_true", help="no item gradients from the social term")


def _add_eval_args(p):
    p.add_argument("--cutoffs", type=_ints, default=(5, 10))
    p.add_argument("--candidates", default="full", help="full | sampled:N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csrec", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic corpus")
    p.add_argument("--spec", metavar="PATH", help="key=value synthetic spec (default: built-in)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("train", help="train a model and save its embeddings")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--export-text", action="store_true", help="also write embeddings.txt")

    p = sub.add_parser("evaluate", help="leave-one-out HR@K / NDCG@K")
    _add_data_args(p)
    _add_model_args(p)
    _add_eval_args(p)
    p.add_argument("--embeddings", metavar="PATH", help="default: OUT/embeddings.bin")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("sweep", help="grid search over alpha, K and lambda_s")
    _add_data_args(p)
    _add_model_args(p)
    _add_eval_args(p)
    p.add_argument("--alphas", type=_floats, default=DEFAULT_ALPHAS)
    p.add_argument("--ks", type=_ints, default=DEFAULT_KS)
    p.add_argument("--lambda-ss", type=_floats, default=DEFAULT_LAMBDAS)
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("groups", help="metrics per share-count group (0, 1, 2-3, >3)")
    _add_data_args(p, shares_required=True)
    _add_model_args(p)
    _add_eval_args(p)
    p.add_argument("--embeddings", metavar="PATH", help="default: OUT/embeddings.bin")
    p.add_argument("--out", required=True, metavar="DIR")
    return parser


def _config(args) -> TrainConfig:
    return TrainConfig(
        manner=args.manner, alpha=args.alpha, K=args.k, lambda_s=args.lambda_s,
        lambda_p=args.lambda_p, lambda_q=args.lambda_q, epochs=args.epochs,
        negatives_per_positive=args.negatives, seed=args.seed, init_scale=args.init_scale,
    )


def _load(args):
    dataset, strengths = load_corpus(args.interactions, args.shares,
                                     mode="explicit" if args.explicit else "implicit", strict=args.strict)
    split_seed = args.seed if args.split_seed is None else args.split_seed
    split = leave_one_out_split(dataset, split_seed)
    logger.info("loaded %d users, %d items, %d interactions, %d shares; %d test users",
                dataset.num_users, dataset.num_items, dataset.num_interactions,
                len(dataset.shares), len(split.test))
    return dataset, strengths, split


def _inputs(args) -> dict:
    out = {}
    for name in ("interactions", "shares", "spec", "embeddings"):
        path = getattr(args, name, None)
        if path and os.path.exists(path):
            out[name] = {"path": path, "sha256": sha256_file(path)}
    return out


def _manifest(args, out_dir, artifacts, extra=None) -> None:
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()}
    doc = {
        "version": __version__,
        "command": args.command,
        "argv": resolved,
        "inputs": _inputs(args),
        "artifacts": {os.path.basename(a): sha256_file(a) for a in artifacts},
    }
    if extra:
        doc.update(extra)
    write_json(doc, os.path.join(out_dir, f"manifest-{args.command}.json"))


def cmd_gen(args) -> int:
    spec = read_synthetic_spec(args.spec) if args.spec else SyntheticSpec()
    dataset = generate_synthetic(spec, args.seed)
    ipath, spath = save_corpus(dataset, args.out)
    spec_path = os.path.join(args.out, "synthetic_spec.txt")
    with open(spec_path, "w", encoding="utf-8") as f:
        f.write(format_synthetic_spec(spec))
    _manifest(args, args.out, [ipath, spath, spec_path], {"seeds": {"generator": args.seed}})
    print(f"wrote {dataset.num_users} users, {dataset.num_items} items, "
          f"{dataset.num_interactions} interactions, {len(dataset.shares)} shares to {args.out}")
    return 0


def cmd_train(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.model not in TRAINABLE:
        print(f"model {args.model} has no parameters to train; run `evaluate` directly", file=sys.stderr)
        return EXIT_DATA
    dataset, strengths, split = _load(args)
    config = _config(args)
    emb, log = fit(args.model, split, config, strengths, args.symmetrize, args.freeze_q)
    emb_path = os.path.join(args.out, "embeddings.bin")
    save_embeddings(emb, emb_path)
    artifacts = [emb_path]
    if log is not None:
        log_path = os.path.join(args.out, "train_log.csv")
        log.to_csv(log_path)
        artifacts.append(log_path)
    if args.export_text:
        txt = os.path.join(args.out, "embeddings.txt")
        export_text(emb, dataset, txt)
        artifacts.append(txt)
    _manifest(args, args.out, artifacts, {"config": asdict(config), "seeds": _seeds(args)})
    print(f"trained {args.model} (K={config.K}, epochs={config.epochs}) -> {emb_path}")
    return 0


def _seeds(args):
    return {"train": args.seed, "split": args.seed if args.split_seed is None else args.split_seed}


def _report(args, split):
    emb = None
    if args.model in TRAINABLE:
        path = args.embeddings or os.path.join(args.out, "embeddings.bin")
        emb = load_embeddings(path)
        args.embeddings = path
    scorer = scorer_for(args.model, split, emb, args.seed)
    return evaluate(scorer, split, args.cutoffs, parse_candidates(args.candidates), seed=args.seed,
                    metadata={"model": args.model, "seed": args.seed})


def _write_wide(path, rows, cutoffs):
    cols = [f"{m}@{k}" for k in cutoffs for m in ("HR", "NDCG")]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model"] + cols)
        for model, metrics in rows:
            w.writerow([model] + [repr(float(metrics[c])) for c in cols])


def cmd_evaluate(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    _, _, split = _load(args)
    report = _report(args, split)
    paths = [os.path.join(args.out, n) for n in ("metrics.json", "metrics.csv", "table.csv")]
    report.to_json(paths[0])
    report.to_csv(paths[1])
    _write_wide(paths[2], [(args.model, report.flat())], report.cutoffs)
    _manifest(args, args.out, paths, {"seeds": _seeds(args)})
    print("  ".join(f"{k}={v:.4f}" for k, v in report.flat().items()))
    return 0


def cmd_groups(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    dataset, _, split = _load(args)
    report = _report(args, split)
    groups = group_report(report, group_users_by_share_count(split.train))
    path = os.path.join(args.out, "groups.csv")
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "group", "num_users", "K", "HR", "NDCG"])
        for label in GROUP_LABELS:
            g = groups.get(label)
            if g is None:
                w.writerow([args.model, label, 0, "", "", ""])
                continue
            for k, (hr, nd) in sorted(g["metrics"].items()):
                w.writerow([args.model, label, g["num_users"], k, repr(hr), repr(nd)])
    json_path = os.path.join(args.out, "groups.json")
    report.to_json(json_path)
    _manifest(args, args.out, [path, json_path], {"seeds": _seeds(args)})
    for label in GROUP_LABELS:
        g = groups.get(label)
        print(f"{label:>4}: " + ("absent" if g is None else
              f"n={g['num_users']} " + " ".join(f"HR@{k}={hr:.4f}" for k, (hr, _) in sorted(g["metrics"].items()))))
    return 0


def cmd_sweep(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    _, strengths, split = _load(args)
    cell_root = os.path.join(args.out, "cells")

    def save_cell(cell, report, emb, log):
        d = os.path.join(cell_root, f"cell-{cell.index:03d}")
        os.makedirs(d, exist_ok=True)
        report.to_json(os.path.join(d, "metrics.json"))
        if log is not None:
            log.to_csv(os.path.join(d, "train_log.csv"))

    cells = run_sweep(args.model, split, _config(args), strengths, args.alphas, args.ks, args.lambda_ss,
                      args.cutoffs, parse_candidates(args.candidates),
                      symmetrize=args.symmetrize, freeze_q=args.freeze_q, on_cell=save_cell)
    metric_cols = [f"{m}@{k}" for k in args.cutoffs for m in ("HR", "NDCG")]
    grid_path = os.path.join(args.out, "sweep.csv")
    with open(grid_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "cell", "alpha", "k", "lambda_s", "status"] + metric_cols)
        for c in cells:
            vals = [repr(float(c.metrics[m])) if c.metrics else "" for m in metric_cols]
            w.writerow([args.model, c.index, repr(c.alpha), c.K, repr(c.lambda_s), c.status] + vals)
    primary = 10 if 10 in args.cutoffs else max(args.cutoffs)
    best = select_best(cells, primary)
    best_path = os.path.join(args.out, "best.json")
    write_json({"model": args.model, "selected_by": f"HR@{primary}",
                "best": best.row() if best else None,
                "failed_cells": [c.index for c in cells if c.status != "ok"]}, best_path)
    _manifest(args, args.out, [grid_path, best_path], {"seeds": _seeds(args)})
    if best is None:
        print("all cells failed", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"best cell {best.index}: alpha={best.alpha} K={best.K} lambda_s={best.lambda_s} "
          + " ".join(f"{k}={v:.4f}" for k, v in best.metrics.items()))
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "groups": cmd_groups}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
