"""Model assembly and training loop.

The model scores every task occurrence in every time slice: initial node
embeddings feed attention-weighted slice graphs, neighboring slices are
fused, the multi-scale stack produces final embeddings, and a two-class
softmax head yields anomaly probabilities.  Training minimizes cross
entropy plus the structural and multi-scale penalties with Adam and
decoupled weight decay.  Everything is seeded, so reruns are bit-exact.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import graphs as gr
from . import multiscale as ms
from .autodiff import ParamStore, Tensor
from .seeding import rng_for
from .workload import ConfigError, ScheduleTrace, window_slice


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and pipeline settings.

    The three boolean switches select model variants: ``attention`` swaps
    learned edge weights for uniform ones, ``fusion`` blends neighboring
    slices, ``multiscale`` enables the configured scale list (off means a
    single 1-hop scale).  Loss weights of zero disable their terms.
    """

    window_len: float = 30.0
    stride: float = 15.0
    d_task: int = 8
    d_res: int = 8
    d_time: int = 8
    hash_buckets: int = 1024
    n_resource_dims: int = 2
    seq_k: int = 2
    coexist_eps: float | None = None
    tau: float | None = None
    mu: tuple[float, float, float] = (0.25, 0.5, 0.25)
    scales: tuple = ms.DEFAULT_SCALES
    d_a: int | None = None
    lambda1: float = 0.1
    lambda2: float = 0.1
    gamma1: float = 0.1
    gamma2: float = 0.1
    attention: bool = True
    fusion: bool = True
    multiscale: bool = True

    @property
    def d(self) -> int:
        return self.d_task + self.d_res + self.d_time

    @property
    def attn_dim(self) -> int:
        return self.d if self.d_a is None else self.d_a

    @property
    def coexist_window(self) -> float:
        return self.window_len / 10.0 if self.coexist_eps is None else self.coexist_eps

    @property
    def recency_tau(self) -> float:
        return self.window_len if self.tau is None else self.tau

    @property
    def effective_scales(self) -> tuple:
        return ms.validate_scales(self.scales) if self.multiscale else (1,)

    def validate(self) -> None:
        if self.window_len <= 0 or self.stride <= 0:
            raise ConfigError("window_len and stride must be positive")
        if min(self.d_task, self.d_res, self.d_time) < 0 or self.d <= 0:
            raise ConfigError("embedding dims must be non-negative with d > 0")
        if self.hash_buckets < 1:
            raise ConfigError("hash_buckets must be >= 1")
        if self.n_resource_dims < 1:
            raise ConfigError("n_resource_dims must be >= 1")
        if self.recency_tau <= 0:
            raise ConfigError("tau must be positive")
        if self.attn_dim < 1:
            raise ConfigError("d_a must be >= 1")
        for w in (self.lambda1, self.lambda2, self.gamma1, self.gamma2):
            if w < 0:
                raise ConfigError("loss weights must be non-negative")
        gr.validate_fusion_weights(self.mu)
        ms.validate_scales(self.scales)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(config: ModelConfig, seed: int) -> ParamStore:
    """Fresh parameter store; every tensor gets its own derived stream."""
    config.validate()
    d, d_a = config.d, config.attn_dim
    store = ParamStore()

    def add(name, shape, fan_in, fan_out, zero=False):
        if zero:
            store.add(name, np.zeros(shape))
        else:
            store.add(name, _glorot(rng_for(seed, "init", name), fan_in, fan_out, shape))

    table_rng = rng_for(seed, "init", "embed.table")
    store.add("embed.table",
              table_rng.normal(0.0, 0.1, size=(config.hash_buckets, config.d_task)))
    n_res_in = config.n_resource_dims + 1
    add("embed.res", (n_res_in, config.d_res), n_res_in, config.d_res)
    add("embed.time", (3, config.d_time), 3, config.d_time)
    add("attn.wq", (d, d), d, d)
    add("attn.wk", (d, d), d, d)
    for i in range(len(ms.validate_scales(config.scales))):
        add(f"ms.scale{i}", (d, d), d, d)
    add("ms.attn_w", (d_a, d), d, d_a)
    add("ms.attn_b", (d_a,), 0, 0, zero=True)
    add("ms.score_w", (d_a,), d_a, 1)
    add("ms.res_w", (d, d), d, d)
    add("ms.res_b", (d,), 0, 0, zero=True)
    add("clf.w", (2, d), d, 2)
    add("clf.b", (2,), 0, 0, zero=True)
    return store


# ---------------------------------------------------------------------------
# per-trace pipeline
# ---------------------------------------------------------------------------

@dataclass
class TracePipeline:
    """Cached static structure for one trace under one config.

    Tapes are rebuilt every step, but slicing, edge detection, temporal
    biases, raw features, and neighborhood operators never change, so they
    are computed once.  ``units`` lists the non-empty slice indices.
    """

    trace: ScheduleTrace
    config: ModelConfig
    features: gr.TraceFeatures
    slices: list[list[int]]
    graphs: list[gr.SchedGraph | None]
    labels: np.ndarray
    units: list[int]
    operator_cache: dict = field(default_factory=dict)


def build_pipeline(trace: ScheduleTrace, config: ModelConfig) -> TracePipeline:
    config.validate()
    if trace.tasks and len(trace.tasks[0].resource_demand) != config.n_resource_dims:
        raise ConfigError(
            f"trace has {len(trace.tasks[0].resource_demand)} resource dims, "
            f"config expects {config.n_resource_dims}"
        )
    features = gr.TraceFeatures.from_trace(trace)
    slices = window_slice(trace, config.window_len, config.stride)
    rules = gr.EdgeRuleConfig(seq_k=config.seq_k, coexist_eps=config.coexist_window)
    graph_list: list[gr.SchedGraph | None] = []
    for t, members in enumerate(slices):
        if members:
            graph_list.append(
                gr.build_slice_graph(trace, members, t, rules, config.recency_tau))
        else:
            graph_list.append(None)
    units = [t for t, members in enumerate(slices) if members]
    return TracePipeline(trace=trace, config=config, features=features,
                         slices=slices, graphs=graph_list,
                         labels=trace.labels(), units=units)


@dataclass
class UnitOutput:
    """Forward results for one slice graph."""

    slice_index: int
    node_ids: np.ndarray
    labels: np.ndarray
    probs: Tensor       # [n, 2]
    h_final: Tensor
    loss_total: Tensor
    loss_ce: Tensor
    loss_graph: Tensor
    loss_msgsa: Tensor

    @property
    def scores(self) -> np.ndarray:
        return self.probs.data[:, 1].copy()


def _encode_slice(store: ParamStore, config: ModelConfig, pipe: TracePipeline,
                  t: int) -> gr.SchedGraph | None:
    """Embed one slice and attach edge weights."""
    graph = pipe.graphs[t]
    if graph is None:
        return None
    embed = gr.NodeEmbedParams(task_embed_table=store["embed.table"],
                               res_proj=store["embed.res"],
                               time_proj=store["embed.time"])
    h0 = gr.embed_nodes(pipe.features, graph.node_ids, embed)
    if config.attention:
        attn = gr.AttentionParams(W_q=store["attn.wq"], W_k=store["attn.wk"],
                                  tau=config.recency_tau)
        alpha = gr.edge_attention(h0, graph.src, graph.dst, attn, graph.delta)
    else:
        alpha = gr.uniform_edge_weights(graph.src)
    return gr.attach_weights(graph, h0, alpha)


def _operators(pipe: TracePipeline, fused: gr.SchedGraph, scales) -> list[np.ndarray]:
    """Neighborhood operators, cached per slice.

    Fused topology is value-independent (edge drops depend only on the mu
    mask and slice membership), so caching on the slice index is safe.
    """
    key = (fused.slice_index, scales, pipe.config.fusion)
    if key not in pipe.operator_cache:
        pipe.operator_cache[key] = [ms.neighborhood_operator(fused, s) for s in scales]
    return pipe.operator_cache[key]


def forward_unit(
    store: ParamStore,
    config: ModelConfig,
    pipe: TracePipeline,
    t: int,
    dropout_rate: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
) -> UnitOutput:
    """Full forward pass for slice ``t`` with loss terms on the tape."""
    cur = _encode_slice(store, config, pipe, t)
    if cur is None:
        raise ConfigError(f"slice {t} is empty")
    if config.fusion:
        prev = _encode_slice(store, config, pipe, t - 1) if t > 0 else None
        nxt = (_encode_slice(store, config, pipe, t + 1)
               if t + 1 < len(pipe.graphs) else None)
        fused = gr.fuse_slices(prev, cur, nxt, config.mu)
    else:
        fused = cur

    scales = config.effective_scales
    params = ms.MultiScaleParams(
        scale_maps=[store[f"ms.scale{i}"] for i in range(len(scales))],
        W_a=store["ms.attn_w"], b_a=store["ms.attn_b"], w=store["ms.score_w"],
        W_r=store["ms.res_w"], b_r=store["ms.res_b"],
    )
    h0 = fused.h
    operators = _operators(pipe, fused, scales)
    h_scales = ms.stack_scales(h0, operators, params)
    beta = ms.scale_attention(h_scales, params)
    h_fusion = ms.fuse_scales(h_scales, beta)
    if dropout_rate > 0.0:
        if dropout_rng is None:
            raise ad.ContractError("dropout_rate > 0 requires a generator")
        mask = ms.dropout_mask(h_fusion.shape, dropout_rate, dropout_rng)
        h_fusion = ad.mul(h_fusion, ad.constant(mask))
    h_final = ms.global_residual(h_fusion, params)

    n = fused.n_nodes
    logits = ad.add_rowvec(ad.matmul(h_final, ad.transpose(store["clf.w"])),
                           store["clf.b"])
    probs = ad.softmax_row(logits)

    labels = pipe.labels[fused.node_ids]
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.rows_sum(ad.mul(probs, ad.constant(onehot)))
    loss_ce = ad.scale(ad.mean_all(ad.log_floor(picked)), -1.0)

    if config.lambda1 > 0 or config.lambda2 > 0:
        p_hat = gr.neighbor_prior(probs, fused)
        loss_graph = gr.graph_loss(h0, fused, probs, p_hat,
                                   config.lambda1, config.lambda2)
    else:
        loss_graph = ad.constant(0.0)
    loss_msgsa = ms.msgsa_loss(h_scales, h_fusion, h_final, h0,
                               config.gamma1, config.gamma2)
    total = ad.add(ad.add(loss_ce, loss_graph), loss_msgsa)
    return UnitOutput(slice_index=t, node_ids=fused.node_ids, labels=labels,
                      probs=probs, h_final=h_final, loss_total=total,
                      loss_ce=loss_ce, loss_graph=loss_graph,
                      loss_msgsa=loss_msgsa)


def score_slices(store: ParamStore, config: ModelConfig, pipe: TracePipeline,
                 slice_indices=None):
    """Inference rows (task_id, slice, score, label) for the given slices."""
    if slice_indices is None:
        slice_indices = pipe.units
    rows = []
    for t in slice_indices:
        out = forward_unit(store, config, pipe, t)
        for i, task_idx in enumerate(out.node_ids):
            rows.append((int(pipe.trace.tasks[task_idx].task_id), int(t),
                         float(out.probs.data[i, 1]), int(out.labels[i])))
    return rows


SCORE_COLUMNS = ("task_id", "slice", "score", "label")


def write_scores_csv(rows, fh) -> None:
    fh.write(",".join(SCORE_COLUMNS) + "\n")
    for task_id, t, score, label in rows:
        fh.write(f"{task_id},{t},{score:.12g},{label}\n")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive and weight_decay non-negative")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(store: ParamStore) -> AdamState:
    return AdamState(m={k: np.zeros_like(p.data) for k, p in store.items()},
                     v={k: np.zeros_like(p.data) for k, p in store.items()},
                     t=0)


def adam_step(store: ParamStore, state: AdamState, hyper: AdamHyper) -> None:
    """One Adam update from the accumulated grads.

    Weight decay is decoupled and applied to the parameter before the
    moment update, so it never enters the running moments.
    """
    hyper.validate()
    state.t += 1
    b1t = 1.0 - hyper.beta1 ** state.t
    b2t = 1.0 - hyper.beta2 ** state.t
    for name, param in store.items():
        g = param.grad
        if not np.isfinite(g).all():
            raise ad.NumericError(f"non-finite gradient for {name!r}")
        if hyper.weight_decay > 0:
            param.data -= hyper.lr * hyper.weight_decay * param.data
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        param.data -= hyper.lr * (m / b1t) / (np.sqrt(v / b2t) + hyper.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

LOSS_CEILING = 1e8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 300
    weight_decay: float = 1e-5
    dropout: float = 0.3
    eval_every: int = 10
    val_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        AdamHyper(lr=self.lr, weight_decay=self.weight_decay).validate()
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass
class TrainLogRow:
    epoch: int
    loss_total: float
    loss_ce: float
    loss_graph: float
    loss_msgsa: float
    val_precision: float | None = None
    val_recall: float | None = None
    val_f1: float | None = None
    val_auc: float | None = None


TRAIN_LOG_COLUMNS = ("epoch", "loss_total", "loss_ce", "loss_graph", "loss_msgsa",
                     "val_precision", "val_recall", "val_f1", "val_auc")


def write_train_log(rows: list[TrainLogRow], fh) -> None:
    # 12 significant digits so downstream consistency checks can compare
    # against recomputed values well below their 1e-9 tolerance.
    fh.write(",".join(TRAIN_LOG_COLUMNS) + "\n")
    for r in rows:
        cells = [str(r.epoch)]
        cells += [f"{getattr(r, c):.12g}" for c in TRAIN_LOG_COLUMNS[1:5]]
        for c in TRAIN_LOG_COLUMNS[5:]:
            v = getattr(r, c)
            cells.append("" if v is None else f"{v:.12g}")
        fh.write(",".join(cells) + "\n")


def split_units(units: list[tuple[int, int]], val_fraction: float,
                seed: int) -> tuple[list, list]:
    """Seeded shuffle split into train/validation unit lists.

    Keeps at least one training unit; validation may come out empty when
    there are too few units.
    """
    order = list(units)
    rng = rng_for(seed, "split")
    perm = rng.permutation(len(order))
    shuffled = [order[i] for i in perm]
    n_val = int(round(val_fraction * len(order)))
    n_val = min(n_val, len(order) - 1)
    n_val = max(n_val, 0)
    val = sorted(shuffled[:n_val])
    tr = sorted(shuffled[n_val:])
    return tr, val


@dataclass
class TrainResult:
    store: ParamStore
    history: list[TrainLogRow]
    train_units: list[tuple[int, int]]
    val_units: list[tuple[int, int]]
    best_values: dict[str, np.ndarray]
    best_epoch: int
    best_val_auc: float
    wall_seconds: float


def _validate_metrics(store, config, pipes, val_units, threshold=0.5):
    from .evaluation import compute_metrics

    scores, labels = [], []
    for trace_id, t in val_units:
        out = forward_unit(store, config, pipes[trace_id], t)
        scores.append(out.scores)
        labels.append(out.labels)
    report = compute_metrics(np.concatenate(scores), np.concatenate(labels),
                             threshold=threshold)
    return report


def train(
    traces: list[ScheduleTrace],
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> TrainResult:
    """Fit the model on the non-empty slices of the given traces.

    Units are (trace, slice) pairs; each batch's loss is the mean of its
    unit losses.  Validation metrics are computed every ``eval_every``
    epochs and at the last epoch, and the parameters with the best
    validation ranking quality are kept alongside the final ones.
    """
    model_config.validate()
    train_config.validate()
    if not traces:
        raise ConfigError("train: no traces")
    t0 = time.perf_counter()

    pipes = [build_pipeline(trace, model_config) for trace in traces]
    units = [(ti, t) for ti, pipe in enumerate(pipes) for t in pipe.units]
    if not units:
        raise ConfigError("train: no non-empty slices")
    train_units, val_units = split_units(units, train_config.val_fraction,
                                         train_config.seed)

    store = init_params(model_config, train_config.seed)
    state = init_adam(store)
    hyper = AdamHyper(lr=train_config.lr, weight_decay=train_config.weight_decay)

    history: list[TrainLogRow] = []
    best_values = store.copy_values()
    best_epoch = 0
    best_auc = -1.0

    for epoch in range(1, train_config.epochs + 1):
        order = list(train_units)
        perm = rng_for(train_config.seed, "shuffle", epoch).permutation(len(order))
        order = [order[i] for i in perm]

        sums = np.zeros(4)
        n_batches = 0
        for step, lo in enumerate(range(0, len(order), train_config.batch_size)):
            batch = order[lo:lo + train_config.batch_size]
            drop_rng = rng_for(train_config.seed, "dropout", epoch, step)
            outs = [
                forward_unit(store, model_config, pipes[ti], t,
                             dropout_rate=train_config.dropout,
                             dropout_rng=drop_rng)
                for ti, t in batch
            ]
            total = outs[0].loss_total
            for out in outs[1:]:
                total = ad.add(total, out.loss_total)
            total = ad.scale(total, 1.0 / len(outs))
            loss_val = total.item()
            if not np.isfinite(loss_val) or abs(loss_val) > LOSS_CEILING:
                raise ad.NumericError(
                    f"training diverged at epoch {epoch} step {step}: "
                    f"loss={loss_val!r}")
            store.reset_grads()
            ad.backward(total, store)
            adam_step(store, state, hyper)
            comp = np.array([
                loss_val,
                float(np.mean([o.loss_ce.item() for o in outs])),
                float(np.mean([o.loss_graph.item() for o in outs])),
                float(np.mean([o.loss_msgsa.item() for o in outs])),
            ])
            sums += comp
            n_batches += 1

        means = sums / n_batches
        row = TrainLogRow(epoch=epoch, loss_total=means[0], loss_ce=means[1],
                          loss_graph=means[2], loss_msgsa=means[3])
        do_eval = (epoch % train_config.eval_every == 0
                   or epoch == train_config.epochs)
        if do_eval and val_units:
            report = _validate_metrics(store, model_config, pipes, val_units)
            row = replace(row, val_precision=report.precision,
                          val_recall=report.recall, val_f1=report.f1,
                          val_auc=report.auc)
            if report.auc > best_auc:
                best_auc = report.auc
                best_epoch = epoch
                best_values = store.copy_values()
        history.append(row)

    if best_epoch == 0:
        best_values = store.copy_values()
        best_epoch = train_config.epochs
    return TrainResult(store=store, history=history, train_units=train_units,
                       val_units=val_units, best_values=best_values,
                       best_epoch=best_epoch, best_val_auc=best_auc,
                       wall_seconds=time.perf_counter() - t0)
