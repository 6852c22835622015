"""Command-line front end: ``rhomp {train,evaluate,sample,sweep}``.

Settings resolve as built-in defaults < ``RHOMP_THREADS`` (thread count
only) < ``--config`` JSON file < command-line flags.  Exit codes: 0 success,
1 data or evaluation error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .baselines import KneserNeyModel
from .corpus import (CorpusError, StateSpace, TrailCorpus, _collapse_repeats, count_transitions,
                     parse_trails, preprocess, split_train_test, write_trails)
from .evaluation import (FAMILIES, Cascade, aggregate_reports, buckets_csv, evaluate,
                         frequency_buckets, order_sweep, train_family)
from .model import RhompModel, SamplingError, TrainerConfig, sample_trail, stationary_distribution
from .modelio import ModelFileError, atomic_write, dumps_model, load_model, read_states, write_states

log = logging.getLogger("rhomp")

EXIT_OK, EXIT_DATA, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "RHOMP_THREADS"

DEFAULTS = {
    "input": None,
    "model": None,
    "output": None,
    "buckets": None,
    "family": "rhomp",
    "order": 2,
    "alpha": None,
    "beta": None,
    "auto_alpha": True,
    "nodes": 15,
    "step": 1.0,
    "tol": 1e-5,
    "max_iters": 500,
    "floor": 1e-12,
    "split": 0.6,
    "seed": 0,
    "repetitions": 5,
    "ks": "1,2,3,4,5",
    "min_count": 20,
    "keep_self_loops": False,
    "threads": 1,
    "format": "ws",
    "families": ",".join(FAMILIES),
    "length": 100,
    "n_trails": 100,
    "train_cascade": False,
    "bucket_k": 3,
    "bucket_min_transitions": 1000,
    "bucket_min_states": 5,
}


class StageError(Exception):
    def __init__(self, stage: str, code: int, message: str):
        super().__init__(message)
        self.stage = stage
        self.code = code


def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file of settings (keys as long flag names)")
    p.add_argument("--input", help="trail file")
    p.add_argument("--model", help="model file (comma-separated list for a cascade)")
    p.add_argument("--output", help="output path")
    p.add_argument("--format", choices=("ws", "csv"), default=S, help="trail token separator")
    p.add_argument("--family", choices=FAMILIES, default=S)
    p.add_argument("--order", type=int, default=S)
    p.add_argument("--alpha", type=float, default=S, help="fixed second-order weight")
    p.add_argument("--beta", type=float, default=S, help="explicit truncated-geometric decay")
    p.add_argument("--auto-alpha", dest="auto_alpha", action="store_true", default=S,
                   help="select alpha on Chebyshev nodes (default unless --alpha/--beta)")
    p.add_argument("--nodes", type=int, default=S, help="number of Chebyshev nodes")
    p.add_argument("--step", type=float, default=S, help="initial step size")
    p.add_argument("--tol", type=float, default=S, help="relative improvement tolerance")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=S)
    p.add_argument("--split", type=float, default=S, help="training fraction")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--repetitions", type=int, default=S)
    p.add_argument("--ks", default=S, help="comma-separated k values")
    p.add_argument("--min-count", dest="min_count", type=int, default=S,
                   help="keep states occurring more than this many times")
    p.add_argument("--keep-self-loops", dest="keep_self_loops", action="store_true", default=S)
    p.add_argument("--threads", type=int, default=S)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rhomp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("train", help="fit one model and write it")
    _add_common(p)

    p = sub.add_parser("evaluate", help="precision@k and MRR reports")
    _add_common(p)
    p.add_argument("--train-cascade", dest="train_cascade", action="store_true", default=S,
                   help="train all cascade orders on seeded splits of --input")
    p.add_argument("--buckets", help="write frequency-bucket CSV of the first trial here")
    p.add_argument("--bucket-k", dest="bucket_k", type=int, default=S)
    p.add_argument("--bucket-min-transitions", dest="bucket_min_transitions", type=int, default=S)
    p.add_argument("--bucket-min-states", dest="bucket_min_states", type=int, default=S)

    p = sub.add_parser("sample", help="simulate trails from a RHOMP model file")
    _add_common(p)
    p.add_argument("--length", type=int, default=S, help="states per trail")
    p.add_argument("--n-trails", dest="n_trails", type=int, default=S)

    p = sub.add_parser("sweep", help="precision/MRR versus order for several families")
    _add_common(p)
    p.add_argument("--families", default=S, help="comma-separated subset of mc,kneser,rhomp")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            cfg["threads"] = int(env)
        except ValueError:
            raise StageError("config", EXIT_DATA, f"{THREADS_ENV} must be an integer")
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                file_cfg = json.load(f)
        except OSError as exc:
            raise StageError("config", EXIT_IO, str(exc))
        except json.JSONDecodeError as exc:
            raise StageError("config", EXIT_DATA, f"bad config file: {exc}")
        cfg.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
    cfg.update({k: v for k, v in vars(args).items() if v is not None})
    if isinstance(cfg["ks"], str):
        cfg["ks"] = [int(k) for k in cfg["ks"].split(",") if k]
    if isinstance(cfg["families"], str):
        cfg["families"] = [f for f in cfg["families"].split(",") if f]
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    def bad(msg):
        raise StageError("config", EXIT_DATA, msg)

    if cfg["order"] < 1:
        bad("--order must be >= 1")
    if not 0 < cfg["split"] < 1:
        bad("--split must lie in (0, 1)")
    if cfg["repetitions"] < 1:
        bad("--repetitions must be >= 1")
    if not cfg["ks"] or min(cfg["ks"]) < 1:
        bad("--ks must be positive integers")
    if cfg["min_count"] < 0:
        bad("--min-count must be >= 0")
    if cfg["threads"] < 1:
        bad("--threads must be >= 1")
    if cfg["nodes"] < 3:
        bad("--nodes must be >= 3")
    if cfg["alpha"] is not None and not 0 <= cfg["alpha"] <= 1:
        bad("--alpha must lie in [0, 1]")
    if cfg["beta"] is not None and not 0 <= cfg["beta"] < 1:
        bad("--beta must lie in [0, 1)")
    unknown = set(cfg["families"]) - set(FAMILIES)
    if unknown:
        bad(f"unknown families {sorted(unknown)}")
    try:
        cfg["trainer"] = TrainerConfig(cfg["step"], cfg["tol"], cfg["max_iters"], cfg["floor"])
    except ValueError as exc:
        bad(str(exc))


def _read_text(path: str | None, stage: str) -> str:
    if not path:
        raise StageError(stage, EXIT_IO, "no input path given")
    try:
        with open(path, encoding="utf-8") as f:
            return f.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise StageError(stage, EXIT_IO, f"cannot read {path}: {exc}")


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        atomic_write(path, text)
    except OSError as exc:
        raise StageError("write", EXIT_IO, f"cannot write {path}: {exc}")


def load_corpus(cfg: dict) -> tuple[StateSpace, TrailCorpus]:
    text = _read_text(cfg["input"], "parse")
    try:
        space, corpus = parse_trails(text, cfg["format"])
    except CorpusError as exc:
        raise StageError("parse", EXIT_DATA, str(exc))
    try:
        space, corpus = preprocess(corpus, cfg["min_count"], not cfg["keep_self_loops"], space)
    except CorpusError as exc:
        raise StageError("preprocess", EXIT_DATA, str(exc))
    if len(corpus) == 0:
        raise StageError("preprocess", EXIT_DATA, "no trails survive preprocessing")
    log.info("corpus: %d states, %d trails, %d transitions", len(space), len(corpus),
             corpus.n_transitions)
    return space, corpus


def _fit(cfg: dict, train: TrailCorpus):
    counts = count_transitions(train, cfg["order"])
    if counts.n_entries(cfg["order"]) == 0:
        raise StageError("count", EXIT_DATA, f"no order-{cfg['order']} transitions in the data")
    alpha = cfg["alpha"]
    try:
        fit = train_family(cfg["family"], counts, cfg["order"], cfg["trainer"], alpha,
                           cfg["beta"], cfg["nodes"], cfg["threads"])
    except ValueError as exc:
        raise StageError("fit", EXIT_DATA, str(exc))
    stalled = [r for r, t in fit.traces.items() if t.stalled]
    if stalled:
        raise StageError("fit", EXIT_NUMERIC, f"trainer stalled at order(s) {stalled}")
    return fit


def cmd_train(cfg: dict) -> int:
    out = cfg["model"] or cfg["output"]
    if not out:
        raise StageError("config", EXIT_DATA, "--output (model path) is required")
    space, corpus = load_corpus(cfg)
    fit = _fit(cfg, corpus)
    model = fit.cascade.members[-1]
    _write(out, dumps_model(model))
    buf = io.StringIO()
    write_states(buf, space)
    _write(out + ".states", buf.getvalue())
    summary = {"family": cfg["family"], "order": cfg["order"], "n_states": len(space),
               "n_trails": len(corpus), "model": out}
    if cfg["family"] == "rhomp":
        trace = fit.traces[cfg["order"]]
        buf = io.StringIO()
        trace.write(buf)
        _write(out + ".trace.tsv", buf.getvalue())
        summary.update(weights=[float(w) for w in model.weights], alpha=fit.alpha,
                       beta=fit.beta, iterations=trace.n_iterations,
                       objective=trace.final_objective, converged=trace.converged)
    print(json.dumps(summary))
    return EXIT_OK


def _load_model_file(path: str):
    text = _read_text(path, "load")
    try:
        return load_model(io.StringIO(text))
    except (ModelFileError, ValueError) as exc:
        raise StageError("load", EXIT_DATA, f"{path}: {exc}")


def _family_of(model) -> str:
    if isinstance(model, RhompModel):
        return "rhomp"
    if isinstance(model, KneserNeyModel):
        return "kneser"
    return "mc"


def cmd_evaluate(cfg: dict) -> int:
    ks = cfg["ks"]
    if cfg["train_cascade"]:
        space, corpus = load_corpus(cfg)
        trials, reports = [], []
        for rep in range(cfg["repetitions"]):
            seed = cfg["seed"] + rep
            try:
                train, test = split_train_test(corpus, cfg["split"], seed)
            except CorpusError as exc:
                raise StageError("split", EXIT_DATA, str(exc))
            fit = _fit(cfg, train)
            try:
                rep_report = evaluate(fit.cascade, test, ks, train.state_counts(), cfg["threads"])
            except ValueError as exc:
                raise StageError("evaluate", EXIT_DATA, str(exc))
            reports.append(rep_report)
            trials.append({"trial": rep, "seed": seed, "alpha": fit.alpha,
                           "records": rep_report.to_records(cfg["family"], cfg["order"])})
            if rep == 0 and cfg.get("buckets"):
                buckets = frequency_buckets(rep_report, cfg["bucket_min_transitions"],
                                            cfg["bucket_min_states"])
                _write(cfg["buckets"], buckets_csv(buckets, cfg["bucket_k"]))
        agg = aggregate_reports(reports)
        summary = [{"family": cfg["family"], "order": cfg["order"], "k": k,
                    "precision": agg["precision_mean"][k], "precision_sd": agg["precision_sd"][k],
                    "mrr": agg["mrr_mean"], "mrr_sd": agg["mrr_sd"],
                    "n_trials": agg["n_trials"]} for k in ks]
        doc = {"trials": trials, "summary": summary}
    else:
        if not cfg["model"]:
            raise StageError("load", EXIT_DATA,
                             "--model files for every cascade order or --train-cascade required")
        paths = [p for p in cfg["model"].split(",") if p]
        models = sorted((_load_model_file(p) for p in paths), key=lambda m: m.order)
        top = models[-1].order
        have = [m.order for m in models]
        if have != list(range(1, top + 1)):
            missing = sorted(set(range(1, top + 1)) - set(have))
            raise StageError("load", EXIT_DATA,
                             f"missing cascade member(s) of order {missing}; pass --train-cascade "
                             "to train them on the fly")
        states_text = _read_text(paths[0] + ".states", "load")
        space = read_states(io.StringIO(states_text))
        text = _read_text(cfg["input"], "parse")
        try:
            _, test = parse_trails(text, cfg["format"], space=space)
            if not cfg["keep_self_loops"]:
                test = TrailCorpus([_collapse_repeats(t) for t in test], test.n_states)
            report = evaluate(Cascade(models), test, ks, threads=cfg["threads"])
        except (CorpusError, ValueError) as exc:
            raise StageError("evaluate", EXIT_DATA, str(exc))
        doc = {"trials": [{"trial": 0,
                           "records": report.to_records(_family_of(models[-1]), top)}]}
    _write(cfg["output"], json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    if not cfg["model"]:
        raise StageError("load", EXIT_DATA, "--model is required")
    model = _load_model_file(cfg["model"])
    if not isinstance(model, RhompModel):
        raise StageError("load", EXIT_DATA, "sampling needs a rhomp model file")
    space = None
    if os.path.exists(cfg["model"] + ".states"):
        space = read_states(io.StringIO(_read_text(cfg["model"] + ".states", "load")))
    rng = np.random.default_rng(cfg["seed"])
    x = stationary_distribution(model).x
    trails = []
    try:
        for _ in range(cfg["n_trails"]):
            warm = _warm_start(model, x, rng)
            trails.append(sample_trail(model, max(cfg["length"], model.order),
                                       int(rng.integers(2**63 - 1)), warm))
    except SamplingError as exc:
        raise StageError("sample", EXIT_DATA, str(exc))
    buf = io.StringIO()
    write_trails(buf, TrailCorpus(trails, model.n_states), space, cfg["format"])
    _write(cfg["output"], buf.getvalue())
    return EXIT_OK


def _warm_start(model: RhompModel, x: np.ndarray, rng: np.random.Generator) -> list[int]:
    """First state from the long-run distribution, then short-history steps."""
    hist = [int(rng.choice(model.n_states, p=x))]
    while len(hist) < model.order:
        r = len(hist)
        w = model.weights[:r] / model.weights[:r].sum()
        slot = int(rng.choice(r, p=w))
        rows, vals = model.matrices[slot].column(hist[-1 - slot])
        if rows.size == 0:
            rows, vals = np.arange(model.n_states), x
        hist.append(int(rng.choice(rows, p=vals / vals.sum())))
    return hist


def cmd_sweep(cfg: dict) -> int:
    space, corpus = load_corpus(cfg)
    try:
        train, test = split_train_test(corpus, cfg["split"], cfg["seed"])
    except CorpusError as exc:
        raise StageError("split", EXIT_DATA, str(exc))
    try:
        reports = order_sweep(train, test, cfg["order"], cfg["families"], cfg["ks"],
                              cfg["trainer"], cfg["alpha"], cfg["beta"], cfg["nodes"],
                              cfg["threads"])
    except ValueError as exc:
        raise StageError("sweep", EXIT_DATA, str(exc))
    lines = ["family,order,k,precision,mrr"]
    for (family, order), rep in reports.items():
        for k in rep.ks:
            lines.append(f"{family},{order},{k},{rep.precision_at_k[k]:.6f},{rep.mrr:.6f}")
    _write(cfg["output"], "\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "sample": cmd_sample,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except StageError as exc:
        print(f"rhomp {args.command}: error in stage '{exc.stage}': {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
