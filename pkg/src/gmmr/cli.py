"""Command-line entry point: split, generate, train, eval, answer, gradcheck, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch

log = logging.getLogger("gmmr")


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def _setup_logging():
    level = os.environ.get("GMMR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _require_file(path, what):
    if not os.path.isfile(path):
        raise CliError(f"{what} not found: {path}")


# ---------------------------------------------------------------- commands

def cmd_split(args):
    from .kg import GraphError, load_triples, load_splits, make_splits, verify_containment, write_splits
    _require_file(args.triples, "triples file")
    if not 0.0 <= args.hidden_fraction <= 1.0:
        raise CliError(f"--hidden-fraction must lie in [0, 1], got {args.hidden_fraction}")
    try:
        g = load_triples(args.triples)
    except GraphError as e:
        raise CliError(str(e))
    splits = make_splits(g, args.seed, args.hidden_fraction)
    manifest = write_splits(splits, args.out, args.seed, args.hidden_fraction)
    reloaded = load_splits(manifest)
    ok = verify_containment(reloaded.train, reloaded.valid, reloaded.test)
    print(json.dumps({"manifest": manifest, "train": len(splits.train), "valid": len(splits.valid),
                      "test": len(splits.test), "containment": ok}))
    return 0 if ok else 1


def cmd_generate(args):
    from .kg import load_splits
    from .oracle import GenerationError, RETRY_BUDGET, generate_dataset, write_dataset
    from .query import TEMPLATES
    _require_file(args.splits, "split manifest")
    templates = [t.strip() for t in args.templates.split(",") if t.strip()] if args.templates else list(TEMPLATES)
    for t in templates:
        if t not in TEMPLATES:
            raise CliError(f"unknown template: {t}")
    if args.count < 0:
        raise CliError("--count must be non-negative")
    splits = load_splits(args.splits)
    try:
        ds = generate_dataset(templates, args.count, splits, args.seed)
    except GenerationError as e:
        raise CliError(str(e), code=1)
    manifest = {"seed": args.seed, "templates": templates, "counts": {t: args.count for t in templates},
                "retry_budget": RETRY_BUDGET, "splits": os.path.abspath(args.splits)}
    write_dataset(ds, args.out, manifest)
    print(json.dumps({"train": len(ds.train), "valid": len(ds.valid), "test": len(ds.test)}))
    return 0


def _dataset_vocab(data_dir):
    """Vocabulary sizes from the data manifest's split graphs."""
    from .kg import load_splits
    path = os.path.join(data_dir, "manifest.json")
    _require_file(path, "dataset manifest")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    splits = load_splits(manifest["splits"])
    return splits


def cmd_train(args):
    from .oracle import load_dataset
    from .training import TrainConfig, TrainingError, train
    _require_file(args.config, "config file")
    try:
        config = TrainConfig.from_json(args.config)
    except (ValueError, TypeError) as e:
        raise CliError(f"bad config: {e}")
    splits = _dataset_vocab(args.data)
    ne, nr = splits.test.num_entities, splits.test.num_relations
    ds = load_dataset(args.data, ne, nr)
    try:
        result = train(config, ds.train, ne, nr, ds.valid, out_dir=args.out, resume_from=args.resume)
    except TrainingError as e:
        raise CliError(str(e), code=1)
    print(json.dumps({"best_epoch": result.best_epoch, "best_valid_Ap": result.best_valid_ap,
                      "checkpoint": os.path.join(args.out, "best.ckpt")}))
    return 0


def cmd_eval(args):
    from .evaluation import evaluate
    from .model import GmmReasoner, OracleScorer
    from .oracle import load_dataset
    splits = _dataset_vocab(args.data)
    ne, nr = splits.test.num_entities, splits.test.num_relations
    samples = load_dataset(args.data, ne, nr).split(args.split)
    if not samples:
        raise CliError(f"no samples in split {args.split}")
    if args.oracle_stub:
        scorer = OracleScorer(splits.test if args.split == "test" else splits.valid)
    else:
        if not args.checkpoint:
            raise CliError("--checkpoint is required unless --oracle-stub is given")
        _require_file(args.checkpoint, "checkpoint")
        scorer, _, _ = GmmReasoner.load(args.checkpoint)
        scorer.eval()
    report = evaluate(samples, scorer)
    text = report.to_csv() if args.format == "csv" else report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text if text.endswith("\n") else text + "\n")
    print(text.rstrip("\n"))
    return 0


def cmd_answer(args):
    from .model import GmmReasoner
    from .query import QueryError, parse, serialize
    _require_file(args.checkpoint, "checkpoint")
    model, _, _ = GmmReasoner.load(args.checkpoint)
    model.eval()
    try:
        q = parse(args.query, model.config.num_entities, model.config.num_relations)
    except QueryError as e:
        raise CliError(str(e))
    with torch.no_grad():
        dist = model.distances([q])[0]
        order = torch.argsort(dist, stable=True)[: args.top]
        rows = []
        for e in order.tolist():
            row = {"entity": e, "distance": float(dist[e])}
            if args.explain:
                bd, branch = model.explain(q, e)
                row["branch"] = serialize(branch)
                row["breakdown"] = bd.to_dict()
            rows.append(row)
    print(json.dumps({"query": serialize(q), "top": rows}, indent=2 if args.explain else None))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck
    results = run_gradcheck(d=args.d, k=args.k, seed=args.seed, num_entities=args.entities)
    worst = max(results.values())
    for name, err in sorted(results.items()):
        log.info("%s %.3e", name, err)
    print(json.dumps({"max_relative_error": worst, "checks": len(results), "pass": worst <= args.tol}))
    return 0 if worst <= args.tol else 1


def cmd_report(args):
    from .evaluation import MetricsReport
    _require_file(args.metrics, "metrics file")
    with open(args.metrics, encoding="utf-8") as f:
        try:
            report = MetricsReport.from_dict(json.load(f))
        except (ValueError, KeyError) as e:
            raise CliError(f"bad metrics file: {e}")
    print((report.to_csv() if args.format == "csv" else report.to_json()).rstrip("\n"))
    return 0


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    """Usage errors become a single ``error: ...`` line and exit code 2."""

    def error(self, message):
        self.exit(2, f"error: {self.prog}: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmmr", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="partition a triple file into nested train/valid/test graphs")
    s.add_argument("--triples", required=True, help="head<TAB>relation<TAB>tail file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hidden-fraction", type=float, default=0.1, help="training edges to hide (default 0.1)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("generate", help="sample query-answer datasets from a split manifest")
    s.add_argument("--splits", required=True, help="split manifest JSON")
    s.add_argument("--templates", default="", help="comma-separated structure names (default: all 14)")
    s.add_argument("--count", type=int, required=True, help="samples per template and split")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True, help="JSON with TrainConfig fields")
    s.add_argument("--data", required=True, help="dataset directory from `generate`")
    s.add_argument("--out", required=True, help="output directory for checkpoints and metrics.csv")
    s.add_argument("--resume", default=None, help="continue from a last.ckpt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="filtered MRR / Hits@K on a dataset split")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("valid", "test"), default="test")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--out", default=None, help="also write the report here")
    s.add_argument("--oracle-stub", action="store_true", help="score with the symbolic oracle instead of a model")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("answer", help="rank entities for one query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query", required=True, help='s-expression, e.g. "(p r0 e5)"')
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--explain", action="store_true", help="print distance breakdown and chosen DNF branch")
    s.set_defaults(func=cmd_answer)

    s = sub.add_parser("gradcheck", help="finite-difference certification of all gradients")
    s.add_argument("--d", type=int, default=4)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--entities", type=int, default=8)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="render a saved JSON metrics report")
    s.add_argument("--metrics", required=True)
    s.add_argument("--format", choices=("json", "csv"), default="csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
