"""``nncertify`` command-line driver.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackBudget, evaluate_attack, empirical_robust_accuracy
from .config import RunConfig, load_config, load_splits
from .dataset import make_binary_problems, parse_pairs, save_dump, subsample
from .errors import ConfigurationError, DataError, NNCertifyError, NumericalError, UsageError
from .evaluation import MethodResult, bench_timing, clean_accuracy, combined_ra, write_report
from .evaluation.report import atomic_write
from .knn import (attack_1nn_witness_stats, build_index, certificate_records, certified_radii,
                  exact_robust_accuracy, margins)
from .net import load_checkpoint, save_checkpoint
from .toy import (grid_points, knn_decision, make_toy2d, net_decision, square_corners,
                  square_violations)
from .trades import (TradesConfig, early_stop_train, hyperparameter_sweep, save_report,
                     standard_train, sweep_table_csv, trades_both_train, trades_train)

log = logging.getLogger("nncertify")

TOY_EPS = 0.05
TOY_HIDDEN = (32, 32)
TOY_EPOCHS = 200
TOY_BATCH = 32


def _workers() -> int:
    raw = os.environ.get("NNCERTIFY_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigurationError(f"NNCERTIFY_THREADS must be an integer, got {raw!r}") from exc


def _map(fn, items):
    """Apply ``fn`` to every item, in worker processes when NNCERTIFY_THREADS > 1.

    Results come back in input order, so outputs do not depend on scheduling.
    """
    items = list(items)
    n = min(_workers(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _fmt(x: float) -> str:
    return repr(float(x))


def _problems(cfg: RunConfig):
    train, test = load_splits(cfg)
    pairs = parse_pairs(cfg.pairs, train.class_names)
    return make_binary_problems(train, test, cfg.test_cap, cfg.seed, pairs, cfg.train_cap)


def _train_eval_set(cfg, problem):
    tr = problem.train
    if cfg.train_eval_cap is not None and cfg.train_eval_cap < len(tr):
        tr = subsample(tr, cfg.train_eval_cap, cfg.seed)
    return tr


# ---------------------------------------------------------------- ingest

def cmd_ingest(cfg: RunConfig) -> int:
    train, test = load_splits(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, data in (("train", train), ("test", test)):
        tmp = out / f"{name}.nnc.tmp"
        save_dump(data, tmp)
        tmp.replace(out / f"{name}.nnc")
        summary[name] = {"examples": len(data), "dims": list(data.dims),
                         "class_counts": {c: int(n) for c, n in zip(data.class_names, data.class_counts())}}
    atomic_write(out / "ingest.json", _json_text(summary))
    print(f"ingested {len(train)} train / {len(test)} test examples into {out}")
    return 0


# ---------------------------------------------------------------- certify

def _certify_problem(args):
    cfg, problem = args
    b_inf, b_l2 = cfg.budgets(problem.train.n_features)
    index = build_index(problem.train)
    files, table = {}, []
    for split in cfg.splits:
        data = problem.train if split == "train" else problem.test
        m = margins(index, data.pixels, data.labels)
        r2, rinf = certified_radii(m, data.labels, index.n_features)
        rows = [[int(i), int(y), int(p), _fmt(ds), _fmt(do), _fmt(a), _fmt(b)]
                for i, y, p, ds, do, a, b in zip(data.ids, data.labels, m.predicted, m.d_same,
                                                  m.d_other, r2, rinf)]
        files[f"certificates_{split}.csv"] = _csv_text(
            ["id", "label", "predicted", "d_same", "d_other", "radius_l2", "radius_linf"], rows)
        records = certificate_records(index, data, ids=data.ids, minimal=cfg.minimal,
                                      box=cfg.geometry_box)
        files[f"certificates_{split}.jsonl"] = "".join(json.dumps(r, sort_keys=True) + "\n"
                                                       for r in records)
        clean = float(np.mean(m.predicted == data.labels))
        for budget, radius in ((b_l2, r2), (b_inf, rinf)):
            cert = float(np.mean((m.predicted == data.labels) & (radius > budget.eps)))
            row = {"problem": problem.name, "split": split, "norm": "inf" if budget.p == math.inf else "2",
                   "eps": budget.eps, "clean": clean, "certified": cert}
            if cfg.exact:
                ex = exact_robust_accuracy(index, data, budget.eps, budget.p, box=cfg.geometry_box)
                row.update(exact=ex.fraction, exact_lower=ex.lower, exact_upper=ex.upper)
            table.append(row)
    return problem.name, files, table


def cmd_certify(cfg: RunConfig) -> int:
    problems = _problems(cfg)
    out = Path(cfg.out) / "certify"
    results = _map(_certify_problem, [(cfg, p) for p in problems])
    table = []
    for name, files, rows in results:
        for fname, text in files.items():
            atomic_write(out / name / fname, text)
        table += rows
    cols = ["problem", "split", "norm", "eps", "clean", "certified", "exact", "exact_lower", "exact_upper"]
    atomic_write(out / "summary.csv",
                 _csv_text(cols, [[r.get(c, "") for c in cols] for r in table]))
    atomic_write(out / "summary.json", _json_text(table))
    for r in table:
        extra = f" exact {100 * r['exact']:.2f}%" if "exact" in r else ""
        print(f"{r['problem']} {r['split']} l{r['norm']} eps={r['eps']:.4g}: "
              f"clean {100 * r['clean']:.2f}% certified {100 * r['certified']:.2f}%{extra}")
    return 0


# ---------------------------------------------------------------- train

def _checkpoint_dir(cfg, problem_name):
    return Path(cfg.out) / "checkpoints" / problem_name


def _train_problem(args):
    cfg, problem = args
    b_inf, b_l2 = cfg.budgets(problem.train.n_features)
    out = _checkpoint_dir(cfg, problem.name)
    done = []
    for method in cfg.methods:
        if method == "1nn":
            continue
        if method == "normal":
            mlp, rep = standard_train(problem, cfg.epochs, cfg.lr, cfg.seed, cfg.batch_size)
        elif method == "early_stop":
            mlp, rep = early_stop_train(problem, cfg.lr, cfg.seed, cfg.batch_size)
        elif method == "trades_recom":
            mlp, rep = trades_train(problem, TradesConfig.recommended(
                b_inf, epochs=cfg.trades_epochs, seed=cfg.seed, batch_size=cfg.batch_size))
        elif method == "trades_both":
            mlp, rep = trades_both_train(problem, cfg.trades_config(b_inf), b_l2)
        else:  # trades_best
            best, rows = hyperparameter_sweep(problem, cfg.trades_config(b_inf), cfg.sweep_grid)
            atomic_write(out / "trades_best_sweep.csv", sweep_table_csv(rows))
            mlp, rep = trades_train(problem, best)
        rep.method = method
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(mlp, out / f"{method}.nncm")
        save_report(rep, out / f"{method}.json")
        done.append((problem.name, method, rep.train_accuracy[-1] if rep.train_accuracy else float("nan")))
    return done


def cmd_train(cfg: RunConfig) -> int:
    problems = _problems(cfg)
    for batch in _map(_train_problem, [(cfg, p) for p in problems]):
        for name, method, acc in batch:
            print(f"{name} {method}: train accuracy {100 * acc:.2f}%")
    return 0


# ---------------------------------------------------------------- evaluate

def _evaluate_problem(args):
    cfg, problem = args
    b_inf, b_l2 = cfg.budgets(problem.train.n_features)
    attack = replace(cfg.attack, seed=cfg.seed)
    train_eval = _train_eval_set(cfg, problem)
    records, missing = [], []
    for method in cfg.methods:
        if method == "1nn":
            index = build_index(problem.train)
            records.append((method, "clean_acc", clean_accuracy(index, problem.test), "exact"))
            for split, data in (("train", train_eval), ("test", problem.test)):
                ra = {}
                for key, budget in (("l2", b_l2), ("linf", b_inf)):
                    res = exact_robust_accuracy(index, data, budget.eps, budget.p, box=cfg.geometry_box)
                    ra[key] = res.fraction
                    records.append((method, f"ra_{key}_{split}", res.fraction, "exact"))
                records.append((method, f"ra_combined_{split}", combined_ra(ra["l2"], ra["linf"]), "mean"))
            continue
        path = _checkpoint_dir(cfg, problem.name) / f"{method}.nncm"
        if not path.exists():
            missing.append(f"{problem.name}/{method}")
            continue
        mlp = load_checkpoint(path)
        records.append((method, "clean_acc", clean_accuracy(mlp, problem.test), "clean"))
        for split, data in (("train", train_eval), ("test", problem.test)):
            ra = {}
            for key, budget in (("l2", b_l2), ("linf", b_inf)):
                outs = evaluate_attack(mlp, data.pixels, data.labels, budget, attack, data.ids)
                ra[key] = empirical_robust_accuracy(outs)
                records.append((method, f"ra_{key}_{split}", ra[key], "empirical"))
            records.append((method, f"ra_combined_{split}", combined_ra(ra["l2"], ra["linf"]), "mean"))
    return problem.name, records, missing


def cmd_evaluate(cfg: RunConfig) -> int:
    problems = _problems(cfg)
    results = {}
    for name, records, missing in _map(_evaluate_problem, [(cfg, p) for p in problems]):
        for m in missing:
            log.warning("checkpoint missing for %s; cell left absent", m)
        for method, metric, value, mode in records:
            results.setdefault(method, MethodResult(method)).set(name, metric, value, mode)
    for method in cfg.methods:
        results.setdefault(method, MethodResult(method))
    ordered = list(results.values())
    paths = write_report(ordered, cfg.out)
    if cfg.figures:
        from .plotting import plot_report
        plot_report(ordered, Path(cfg.out) / "report_linf_test.png")
    print(Path(paths["md"]).read_text(), end="")
    return 0


# ---------------------------------------------------------------- toy2d

def cmd_toy2d(cfg: RunConfig) -> int:
    problem = make_toy2d(cfg.seed, eps=TOY_EPS)
    budget = AttackBudget(math.inf, TOY_EPS)
    index = build_index(problem.train)
    mlp, _ = trades_train(problem, TradesConfig.recommended(budget, epochs=TOY_EPOCHS, hidden=TOY_HIDDEN,
                                                            batch_size=TOY_BATCH, seed=cfg.seed))
    pts = grid_points(200)
    k_lab, k_val = knn_decision(index, pts)
    t_lab, t_val = net_decision(mlp, pts)
    out = Path(cfg.out) / "toy2d"
    atomic_write(out / "grid.csv", _csv_text(
        ["x", "y", "knn_label", "knn_value", "trades_label", "trades_value"],
        [[_fmt(p[0]), _fmt(p[1]), int(a), _fmt(b), int(c), _fmt(d)]
         for p, a, b, c, d in zip(pts, k_lab, k_val, t_lab, t_val)]))
    kv = square_violations(pts, k_lab, problem.train, TOY_EPS)
    tv = square_violations(pts, t_lab, problem.train, TOY_EPS)
    corners = square_corners(problem.train, TOY_EPS)
    atomic_write(out / "squares.csv", _csv_text(
        ["id", "label", "x0", "y0", "x1", "y1", "knn_violations", "trades_violations"],
        [[i, int(y), *map(_fmt, c), int(a), int(b)]
         for i, (y, c, a, b) in enumerate(zip(problem.train.labels, corners, kv, tv))]))
    summary = {"eps": TOY_EPS, "grid": 200, "train_points": len(problem.train),
               "knn_violating_squares": int(np.sum(kv > 0)),
               "trades_violating_squares": int(np.sum(tv > 0))}
    atomic_write(out / "summary.json", _json_text(summary))
    if cfg.figures:
        from .plotting import plot_toy2d
        plot_toy2d(pts, {"TRADES": t_lab, "1NN": k_lab}, problem.train, TOY_EPS, out / "toy2d.png")
    print(f"1NN squares violated: {summary['knn_violating_squares']}, "
          f"TRADES squares violated: {summary['trades_violating_squares']}")
    return 0


# ---------------------------------------------------------------- hist

def cmd_hist(cfg: RunConfig) -> int:
    problems = _problems(cfg)
    total = np.zeros(256, dtype=np.int64)
    bins = np.arange(256) / 255.0
    n_witnesses = 0
    for problem in problems:
        index = build_index(problem.train)
        data = problem.test
        if cfg.hist_examples < len(data):
            data = subsample(data, cfg.hist_examples, cfg.seed)
        bins, counts, res = attack_1nn_witness_stats(index, data, cfg.hist_norm, box=True)
        total += counts
        n_witnesses += sum(r.witness is not None for r in res)
    out = Path(cfg.out) / "hist"
    atomic_write(out / "histogram.csv", _csv_text(
        ["bin_lower", "count"], [[_fmt(b), int(c)] for b, c in zip(bins, total)]))
    # bin k collects |delta| in [k/255, (k+1)/255), so bins 8 and up hold |delta| >= 8/255
    above = int(total[8:].sum())
    frac = above / total.sum() if total.sum() else float("nan")
    atomic_write(out / "summary.json", _json_text({"witnesses": n_witnesses, "pixels": int(total.sum()),
                                                   "fraction_at_least_8_255": frac}))
    if cfg.figures:
        from .plotting import plot_histogram
        plot_histogram(bins, total, out / "histogram.png")
    print(f"{n_witnesses} witnesses, {100 * frac:.2f}% of pixel changes at least 8/255")
    return 0


# ---------------------------------------------------------------- bench

def cmd_bench(cfg: RunConfig) -> int:
    problems = _problems(cfg)
    if not problems:
        raise ConfigurationError("no problem selected")
    problem = problems[0]
    b_inf, _ = cfg.budgets(problem.train.n_features)
    rows = []
    for method in ("trades", "early_stop", "1nn"):
        rec = bench_timing(method, problem, cfg.bench_repeats,
                           trades_config=TradesConfig.recommended(b_inf, epochs=cfg.trades_epochs,
                                                                  seed=cfg.seed),
                           seed=cfg.seed)
        rows.append([rec.method, _fmt(rec.train_seconds), _fmt(rec.inference_seconds), rec.hardware])
        print(f"{rec.method}: train {rec.train_seconds:.4f}s, inference {rec.inference_seconds * 1e6:.1f}us/example")
    atomic_write(Path(cfg.out) / "bench" / "bench.csv",
                 _csv_text(["method", "train_seconds", "inference_seconds", "hardware"], rows))
    return 0


COMMANDS = {"ingest": cmd_ingest, "certify": cmd_certify, "train": cmd_train, "evaluate": cmd_evaluate,
            "toy2d": cmd_toy2d, "hist": cmd_hist, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--eps-inf", type=float, dest="eps_inf")
    common.add_argument("--eps-l2", type=float, dest="eps_l2")
    common.add_argument("--methods", help="comma-separated method list")
    common.add_argument("--pairs", help='class pairs, e.g. "1-7,0-1" or "all"')
    common.add_argument("--figures", action="store_true", default=None,
                        help="also render PNG figures next to the CSV files")
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = argparse.ArgumentParser(prog="nncertify", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        methods = None
        if args.methods is not None:
            methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "eps_inf": args.eps_inf,
                                        "eps_l2": args.eps_l2, "methods": methods, "pairs": args.pairs,
                                        "figures": args.figures})
        return COMMANDS[args.command](cfg)
    except DataError as exc:
        print(f"nncertify: data error: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, UsageError) as exc:
        print(f"nncertify: configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"nncertify: numerical failure: {exc}", file=sys.stderr)
        return 4
    except NNCertifyError as exc:
        print(f"nncertify: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
