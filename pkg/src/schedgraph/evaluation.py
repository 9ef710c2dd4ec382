"""Metrics and experiment protocols.

Detection quality is measured per task-in-slice occurrence: thresholded
precision/recall/F1 plus a rank-based AUC (average ranks, so ties count
half).  On top of that sit the two comparison protocols: an ablation grid
toggling the model's components, and a sweep over the neighborhood radius
of the multi-scale stack.  Both train fresh models per seed and report
per-seed rows plus mean/std summaries.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from . import multiscale as ms
from .training import ModelConfig, TrainConfig, build_pipeline, forward_unit, train
from .workload import ConfigError, ScheduleTrace

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class MetricsReport:
    """Threshold metrics, counts, ranking quality, and the best
    achievable F1 over all score cutoffs (a diagnostic, not the headline)."""

    precision: float
    recall: float
    f1: float
    auc: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    best_f1: float
    best_f1_threshold: float

    def as_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "auc": self.auc, "threshold": self.threshold, "tp": self.tp,
            "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "best_f1": self.best_f1, "best_f1_threshold": self.best_f1_threshold,
        }


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outscores a random negative.

    Computed from average ranks; tied scores contribute one half.  With no
    positives or no negatives the value is 0.5 by convention.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    rank = 1.0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (rank + rank + (j - i)) / 2.0
        rank += j - i + 1
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_metrics(
    scores, labels, threshold: float = DEFAULT_THRESHOLD
) -> MetricsReport:
    """Score a batch of (score, binary label) pairs at a fixed cutoff."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size != labels.size:
        raise ValueError("scores and labels must have equal length")
    if scores.size == 0:
        raise ValueError("cannot compute metrics on an empty batch")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    labels = labels.astype(np.int64)

    pred = scores >= threshold
    pos = labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    tn = int((~pred & ~pos).sum())
    precision, recall, f1 = _prf(tp, fp, fn)

    # Best-F1 sweep over the distinct scores, descending; strictly better
    # wins so ties settle on the higher cutoff.
    best_f1, best_thr = 0.0, float("inf")
    for cand in np.unique(scores)[::-1]:
        p2 = scores >= cand
        tp2 = int((p2 & pos).sum())
        fp2 = int((p2 & ~pos).sum())
        fn2 = int((~p2 & pos).sum())
        f1_cand = _prf(tp2, fp2, fn2)[2]
        if f1_cand > best_f1:
            best_f1, best_thr = f1_cand, float(cand)

    return MetricsReport(precision=precision, recall=recall, f1=f1,
                         auc=rank_auc(scores, labels), threshold=float(threshold),
                         tp=tp, fp=fp, tn=tn, fn=fn,
                         best_f1=best_f1, best_f1_threshold=best_thr)


# ---------------------------------------------------------------------------
# experiment rows
# ---------------------------------------------------------------------------

RESULTS_COLUMNS = ("run_id", "row_or_k", "seed", "precision", "recall", "f1",
                   "auc", "threshold", "wall_seconds")


@dataclass(frozen=True)
class ResultRow:
    run_id: str
    row_or_k: str
    seed: int
    precision: float
    recall: float
    f1: float
    auc: float
    threshold: float
    wall_seconds: float


def run_fingerprint(*parts) -> str:
    """Stable 12-hex id for one experiment run."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_results_csv(rows: list[ResultRow], fh) -> None:
    fh.write(",".join(RESULTS_COLUMNS) + "\n")
    for r in rows:
        fh.write(",".join([
            r.run_id, r.row_or_k, str(r.seed),
            f"{r.precision:.8g}", f"{r.recall:.8g}", f"{r.f1:.8g}",
            f"{r.auc:.8g}", f"{r.threshold:.8g}", f"{r.wall_seconds:.6g}",
        ]) + "\n")


def read_results_csv(fh) -> list[ResultRow]:
    header = fh.readline().strip().split(",")
    if tuple(header) != RESULTS_COLUMNS:
        raise ValueError(f"unexpected results header: {header}")
    rows = []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        c = line.split(",")
        rows.append(ResultRow(run_id=c[0], row_or_k=c[1], seed=int(c[2]),
                              precision=float(c[3]), recall=float(c[4]),
                              f1=float(c[5]), auc=float(c[6]),
                              threshold=float(c[7]), wall_seconds=float(c[8])))
    return rows


def _held_out_metrics(result, model_cfg, pipes, threshold):
    scores, labels = [], []
    units = result.val_units if result.val_units else result.train_units
    for trace_id, t in units:
        out = forward_unit(result.store, model_cfg, pipes[trace_id], t)
        scores.append(out.scores)
        labels.append(out.labels)
    return compute_metrics(np.concatenate(scores), np.concatenate(labels),
                           threshold=threshold)


def evaluate_once(
    traces: list[ScheduleTrace],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    row_name: str,
    threshold: float = DEFAULT_THRESHOLD,
) -> ResultRow:
    """Train one model and measure it on its held-out slices."""
    t0 = time.perf_counter()
    result = train(traces, model_cfg, train_cfg)
    pipes = [build_pipeline(trace, model_cfg) for trace in traces]
    report = _held_out_metrics(result, model_cfg, pipes, threshold)
    wall = time.perf_counter() - t0
    run_id = run_fingerprint(row_name, train_cfg.seed, model_cfg.__dict__)
    return ResultRow(run_id=run_id, row_or_k=row_name, seed=train_cfg.seed,
                     precision=report.precision, recall=report.recall,
                     f1=report.f1, auc=report.auc, threshold=threshold,
                     wall_seconds=wall)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

# Each row is a knob map over the base config; loss weights of disabled
# components are forced to zero so their terms drop out entirely.
ABLATION_ROWS: dict[str, dict] = {
    "baseline": {"attention": False, "fusion": False, "multiscale": False,
                 "lambda1": 0.0, "lambda2": 0.0, "gamma1": 0.0, "gamma2": 0.0},
    "+graph": {"attention": True, "fusion": True, "multiscale": False,
               "gamma1": 0.0, "gamma2": 0.0},
    "+multiscale": {"attention": False, "fusion": False, "multiscale": True,
                    "lambda1": 0.0, "lambda2": 0.0},
    "+all": {"attention": True, "fusion": True, "multiscale": True},
}


def ablation_config(base: ModelConfig, row_name: str) -> ModelConfig:
    if row_name not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation row {row_name!r}")
    return replace(base, **ABLATION_ROWS[row_name])


def run_ablation(
    traces: list[ScheduleTrace],
    base_model: ModelConfig,
    base_train: TrainConfig,
    seeds: list[int],
    threshold: float = DEFAULT_THRESHOLD,
) -> list[ResultRow]:
    """Per-seed metrics for every ablation row, rows in grid order."""
    if not seeds:
        raise ConfigError("run_ablation: need at least one seed")
    rows = []
    for row_name in ABLATION_ROWS:
        cfg = ablation_config(base_model, row_name)
        for seed in seeds:
            tc = replace(base_train, seed=seed)
            rows.append(evaluate_once(traces, cfg, tc, row_name, threshold))
    return rows


# ---------------------------------------------------------------------------
# neighborhood radius sweep
# ---------------------------------------------------------------------------

def sweep_scales(k: int) -> tuple:
    """Scale list for radius k: hops 1..k plus the whole-graph scale."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    return tuple(range(1, k + 1)) + (ms.GLOBAL,)


def neighborhood_sweep(
    traces: list[ScheduleTrace],
    base_model: ModelConfig,
    base_train: TrainConfig,
    k_values: list[int],
    seeds: list[int],
    threshold: float = DEFAULT_THRESHOLD,
) -> list[ResultRow]:
    """Per-seed metrics for each neighborhood radius in k_values."""
    if not k_values:
        raise ConfigError("neighborhood_sweep: need at least one k")
    if not seeds:
        raise ConfigError("neighborhood_sweep: need at least one seed")
    rows = []
    for k in k_values:
        cfg = replace(base_model, scales=sweep_scales(k), multiscale=True)
        for seed in seeds:
            tc = replace(base_train, seed=seed)
            rows.append(evaluate_once(traces, cfg, tc, str(k), threshold))
    return rows


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("row_or_k", "n_seeds", "precision_mean", "precision_std",
                   "recall_mean", "recall_std", "f1_mean", "f1_std",
                   "auc_mean", "auc_std", "wall_seconds_mean")


def summarize(rows: list[ResultRow]) -> list[dict]:
    """Mean and population std per row label, preserving first-seen order."""
    groups: dict[str, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault(r.row_or_k, []).append(r)
    out = []
    for name, members in groups.items():
        rec = {"row_or_k": name, "n_seeds": len(members)}
        for metric in ("precision", "recall", "f1", "auc"):
            vals = np.array([getattr(m, metric) for m in members])
            rec[f"{metric}_mean"] = float(vals.mean())
            rec[f"{metric}_std"] = float(vals.std())
        rec["wall_seconds_mean"] = float(
            np.mean([m.wall_seconds for m in members]))
        out.append(rec)
    return out


def write_summary_csv(summary: list[dict], fh) -> None:
    fh.write(",".join(SUMMARY_COLUMNS) + "\n")
    for rec in summary:
        cells = [str(rec["row_or_k"]), str(rec["n_seeds"])]
        cells += [f"{rec[c]:.8g}" for c in SUMMARY_COLUMNS[2:]]
        fh.write(",".join(cells) + "\n")
