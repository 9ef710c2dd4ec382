"""Command line interface.

Subcommands cover the whole workflow: generate a labeled workload, train,
score a trace with a checkpoint, and run the evaluation protocols
(evaluate, ablate, sweep) plus a finite-difference gradient check.  Every
command is deterministic for a fixed (config, seed); reruns produce
byte-identical files.

Exit codes: 0 success, 1 validation failure (bad config, bad trace,
missing file, failed gradient check), 2 runtime or numeric failure
(divergence, non-finite values).  Logging verbosity comes from the
SCHEDGRAPH_LOG environment variable (error, info, or debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import autodiff as ad
from .config import (
    RunConfig,
    build_trace,
    config_json,
    default_config,
    load_config,
)
from .evaluation import (
    ABLATION_ROWS,
    ResultRow,
    ablation_config,
    evaluate_once,
    summarize,
    sweep_scales,
    write_results_csv,
    write_summary_csv,
)
from .training import (
    ModelConfig,
    build_pipeline,
    forward_unit,
    init_params,
    score_slices,
    train,
    write_scores_csv,
    write_train_log,
)
from .workload import (
    ConfigError,
    GenConfig,
    TraceError,
    generate_trace,
    read_trace,
    write_trace,
)

LOG = logging.getLogger("schedgraph")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}


def _setup_logging() -> None:
    raw = os.environ.get("SCHEDGRAPH_LOG", "error").lower()
    level = _LOG_LEVELS.get(raw)
    if level is None:
        level = logging.ERROR
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    LOG.setLevel(level)


def _load(args) -> RunConfig:
    if args.config is not None:
        return load_config(args.config)
    return default_config()


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(config: RunConfig, out: Path, seed: int | None) -> int:
    trace = build_trace(config, seed=seed)
    path = out / "trace.jsonl"
    write_trace(trace, path)
    counts: dict[str, int] = {}
    for task in trace.tasks:
        counts[task.anomaly_label.value] = counts.get(task.anomaly_label.value, 0) + 1
    print(f"wrote {path} ({len(trace.tasks)} tasks)")
    for label in sorted(counts):
        print(f"label {label}: {counts[label]}")
    return 0


def cmd_train(config: RunConfig, trace_path: str | None, out: Path,
              seed: int | None) -> int:
    train_cfg = config.train if seed is None else replace(config.train, seed=seed)
    if trace_path is not None:
        trace = read_trace(trace_path)
    else:
        trace = build_trace(config, seed=seed)
    result = train([trace], config.model, train_cfg)

    ad.save_checkpoint(result.store, out / "model.ckpt")
    best_store = init_params(config.model, train_cfg.seed)
    best_store.load_values(result.best_values)
    ad.save_checkpoint(best_store, out / "model_best.ckpt")
    with open(out / "train_log.csv", "w", encoding="utf-8") as fh:
        write_train_log(result.history, fh)
    split = {"seed": train_cfg.seed, "val_fraction": train_cfg.val_fraction,
             "train": [list(u) for u in result.train_units],
             "val": [list(u) for u in result.val_units]}
    with open(out / "split.json", "w", encoding="utf-8") as fh:
        json.dump(split, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        fh.write(config_json(replace(config, train=train_cfg)))

    final = result.history[-1] if result.history else None
    if final is not None and final.val_auc is not None:
        print(f"trained {len(result.history)} epochs; "
              f"final loss {final.loss_total:.6g}; val AUC {final.val_auc:.4f}")
    elif final is not None:
        print(f"trained {len(result.history)} epochs; "
              f"final loss {final.loss_total:.6g}")
    else:
        print("trained 0 epochs; checkpoint holds initial parameters")
    return 0


def cmd_score(config: RunConfig, checkpoint: str, trace_path: str | None,
              out: Path) -> int:
    values = ad.load_checkpoint(checkpoint)
    if "clf.w" not in values:
        raise ConfigError(f"checkpoint {checkpoint}: missing parameter 'clf.w'")
    actual_d = values["clf.w"].shape[1]
    if actual_d != config.model.d:
        raise ConfigError(
            f"checkpoint dimensionality d={actual_d} does not match "
            f"config d={config.model.d}")
    store = init_params(config.model, seed=0)
    missing = sorted(set(store.names()) - set(values))
    extra = sorted(set(values) - set(store.names()))
    if missing or extra:
        raise ConfigError(
            f"checkpoint {checkpoint}: parameter mismatch "
            f"(missing {missing}, unexpected {extra})")
    store.load_values(values)

    trace = read_trace(trace_path) if trace_path is not None else build_trace(config)
    pipe = build_pipeline(trace, config.model)
    rows = score_slices(store, config.model, pipe)
    path = out / "scores.csv"
    with open(path, "w", encoding="utf-8") as fh:
        write_scores_csv(rows, fh)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def _print_summary(summary: list[dict]) -> None:
    print(f"{'row_or_k':<14}{'n':>3}{'precision':>11}{'recall':>11}"
          f"{'f1':>11}{'auc':>11}{'auc_std':>11}")
    for rec in summary:
        print(f"{rec['row_or_k']:<14}{rec['n_seeds']:>3}"
              f"{rec['precision_mean']:>11.4f}{rec['recall_mean']:>11.4f}"
              f"{rec['f1_mean']:>11.4f}{rec['auc_mean']:>11.4f}"
              f"{rec['auc_std']:>11.4f}")


def _eval_cell(cell) -> ResultRow:
    traces, model_cfg, train_cfg, name, threshold = cell
    return evaluate_once(traces, model_cfg, train_cfg, name, threshold)


def _run_cells(cells, jobs: int) -> list[ResultRow]:
    if jobs <= 1:
        return [_eval_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_eval_cell, cells))


def _protocol_cells(config: RunConfig, mode: str, seeds) -> list:
    traces = [build_trace(config)]
    threshold = config.eval.threshold
    cells = []
    if mode == "evaluate":
        for seed in seeds:
            tc = replace(config.train, seed=seed)
            cells.append((traces, config.model, tc, "full", threshold))
    elif mode == "ablate":
        for row_name in ABLATION_ROWS:
            cfg = ablation_config(config.model, row_name)
            for seed in seeds:
                tc = replace(config.train, seed=seed)
                cells.append((traces, cfg, tc, row_name, threshold))
    elif mode == "sweep":
        for k in config.eval.k_values:
            cfg = replace(config.model, scales=sweep_scales(k), multiscale=True)
            for seed in seeds:
                tc = replace(config.train, seed=seed)
                cells.append((traces, cfg, tc, str(k), threshold))
    else:
        raise ConfigError(f"unknown protocol {mode!r}")
    return cells


def cmd_protocol(config: RunConfig, mode: str, out: Path, seed: int | None,
                 jobs: int) -> int:
    seeds = list(config.eval.seeds) if seed is None else [seed]
    cells = _protocol_cells(config, mode, seeds)
    LOG.info("%s: running %d cells with %d job(s)", mode, len(cells), jobs)
    rows = _run_cells(cells, jobs)
    with open(out / "results.csv", "w", encoding="utf-8") as fh:
        write_results_csv(rows, fh)
    summary = summarize(rows)
    with open(out / "summary.csv", "w", encoding="utf-8") as fh:
        write_summary_csv(summary, fh)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        fh.write(config_json(config))
    _print_summary(summary)
    return 0


def gradcheck_instance(seed: int) -> tuple[ModelConfig, GenConfig]:
    """A small model over a 10-task, two-slice workload."""
    model = ModelConfig(window_len=30.0, stride=30.0, d_task=2, d_res=2,
                        d_time=2, hash_buckets=8, coexist_eps=4.0)
    gen = GenConfig(n_tasks=10, n_nodes=2, horizon=60.0,
                    mean_interarrival=3.0, seed=seed)
    return model, gen


def cmd_gradcheck(seed: int, out: Path | None) -> int:
    model_cfg, gen_cfg = gradcheck_instance(seed)
    trace = generate_trace(gen_cfg)
    pipe = build_pipeline(trace, model_cfg)
    store = init_params(model_cfg, seed)

    def loss_fn():
        outs = [forward_unit(store, model_cfg, pipe, t) for t in pipe.units]
        total = outs[0].loss_total
        for o in outs[1:]:
            total = ad.add(total, o.loss_total)
        return ad.scale(total, 1.0 / len(outs))

    report = ad.check_gradients(loss_fn, store, epsilon=1e-5, tolerance=1e-4)
    status = "PASS" if report.passed else "FAIL"
    print(f"gradcheck seed={seed} slices={len(pipe.units)} "
          f"max_rel_error={report.max_rel_error:.3e} {status}")
    if out is not None:
        payload = {"seed": seed, "epsilon": report.epsilon,
                   "tolerance": report.tolerance,
                   "max_rel_error": report.max_rel_error,
                   "passed": report.passed,
                   "per_param": {k: float(v)
                                 for k, v in sorted(report.per_param.items())}}
        with open(out / "gradcheck.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="schedgraph",
        description="anomaly detection on scheduler execution traces")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_jobs=False):
        p.add_argument("--config", default=None,
                       help="JSON run configuration (defaults apply if omitted)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
        if needs_jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel training cells (default 1)")

    common(sub.add_parser("generate", help="write a labeled synthetic trace"))
    p_train = sub.add_parser("train", help="train a model and save checkpoints")
    common(p_train)
    p_train.add_argument("--trace", default=None,
                         help="trace file (generated from config if omitted)")
    p_score = sub.add_parser("score", help="score a trace with a checkpoint")
    common(p_score)
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("--trace", default=None,
                         help="trace file (generated from config if omitted)")
    common(sub.add_parser("evaluate", help="train and measure across seeds"),
           needs_jobs=True)
    common(sub.add_parser("ablate", help="component toggle grid"),
           needs_jobs=True)
    common(sub.add_parser("sweep", help="neighborhood radius sweep"),
           needs_jobs=True)
    common(sub.add_parser("gradcheck",
                          help="finite-difference check of all gradients"))
    return parser


def _dispatch(args) -> int:
    if args.command == "gradcheck":
        return cmd_gradcheck(args.seed if args.seed is not None else 0,
                             _outdir(args))
    config = _load(args)
    out = _outdir(args)
    if args.command == "generate":
        return cmd_generate(config, out, args.seed)
    if args.command == "train":
        return cmd_train(config, args.trace, out, args.seed)
    if args.command == "score":
        return cmd_score(config, args.checkpoint, args.trace, out)
    if args.command in ("evaluate", "ablate", "sweep"):
        return cmd_protocol(config, args.command, out, args.seed, args.jobs)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage problems; those are validation failures
        # under this tool's exit-code contract.
        return int(exc.code) if exc.code in (0, None) else 1
    try:
        return _dispatch(args)
    except (ConfigError, TraceError, ValueError, FileNotFoundError,
            IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ad.NumericError, ad.ContractError, ArithmeticError,
            RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
