"""Structure-guided scheduling behavior graphs.

Each time slice of a trace becomes a directed graph whose nodes are task
executions and whose edges capture shared-resource, sequential, and
co-existence relations.  Edge weights come from a scaled dot-product
attention over node embeddings plus a temporal-recency bias, and
neighboring slices are fused by convex blending of edge weights.  The
structural-consistency loss (embedding smoothing + neighbor-prior KL)
lives here too.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .workload import ConfigError, ScheduleTrace, TaskRecord


class EdgeKind(enum.IntEnum):
    """Relation kinds, ordered by deduplication precedence (low wins)."""

    SHARED_RESOURCE = 0
    SEQUENTIAL = 1
    COEXISTENCE = 2

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class EdgeCandidate:
    """Directed edge between two slice-local node indices."""

    src: int
    dst: int
    kind: EdgeKind


@dataclass(frozen=True)
class EdgeRuleConfig:
    """How relations are detected within a slice.

    ``seq_k`` bounds how many successors on the same node get a sequential
    edge; ``coexist_eps`` is the submit-time proximity for co-existence.
    """

    seq_k: int = 2
    coexist_eps: float = 3.0

    def validate(self) -> None:
        if self.seq_k < 0:
            raise ConfigError("seq_k must be >= 0")
        if self.coexist_eps < 0:
            raise ConfigError("coexist_eps must be >= 0")


@dataclass
class SchedGraph:
    """One slice's behavior graph.

    ``node_ids`` are indices into the trace's task tuple; ``src``/``dst``
    are positions into ``node_ids``, sorted by (src, dst) so per-source
    segment ops apply directly.  ``h`` (node embeddings) and ``alpha``
    (per-edge weights) are attached by the encoder and participate in the
    autodiff tape.
    """

    slice_index: int
    node_ids: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    kinds: np.ndarray
    delta: np.ndarray
    h: Tensor | None = None
    alpha: Tensor | None = None

    @property
    def n_nodes(self) -> int:
        return int(self.node_ids.size)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def task_pairs(self):
        """Edge endpoints as trace task indices."""
        return self.node_ids[self.src], self.node_ids[self.dst]


# ---------------------------------------------------------------------------
# node features and embedding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureScaler:
    """Min-max statistics over one trace for priority and time features."""

    priority_lo: float
    priority_hi: float
    time_lo: np.ndarray
    time_hi: np.ndarray

    @classmethod
    def from_trace(cls, trace: ScheduleTrace) -> "FeatureScaler":
        if trace.tasks:
            prios = np.array([t.priority for t in trace.tasks], dtype=np.float64)
            times = np.array(
                [[t.submit_time, t.start_time - t.submit_time, t.duration]
                 for t in trace.tasks]
            )
            return cls(float(prios.min()), float(prios.max()),
                       times.min(axis=0), times.max(axis=0))
        return cls(0.0, 0.0, np.zeros(3), np.zeros(3))

    @staticmethod
    def _scale(x: np.ndarray, lo, hi) -> np.ndarray:
        span = np.where(np.asarray(hi) > np.asarray(lo), np.asarray(hi) - np.asarray(lo), 1.0)
        return np.where(np.asarray(hi) > np.asarray(lo), (x - lo) / span, 0.0)

    def res_features(self, task: TaskRecord) -> np.ndarray:
        prio = self._scale(np.float64(task.priority), self.priority_lo, self.priority_hi)
        return np.concatenate([np.asarray(task.resource_demand, dtype=np.float64),
                               np.atleast_1d(prio)])

    def time_features(self, task: TaskRecord) -> np.ndarray:
        raw = np.array([task.submit_time,
                        task.start_time - task.submit_time,
                        task.duration])
        return self._scale(raw, self.time_lo, self.time_hi)


@dataclass(frozen=True)
class TraceFeatures:
    """Precomputed raw feature matrices for every task of a trace."""

    task_ids: np.ndarray
    res: np.ndarray    # [n, n_dims + 1]
    time: np.ndarray   # [n, 3]

    @classmethod
    def from_trace(cls, trace: ScheduleTrace) -> "TraceFeatures":
        scaler = FeatureScaler.from_trace(trace)
        n = len(trace.tasks)
        n_dims = len(trace.tasks[0].resource_demand) if n else 2
        res = np.zeros((n, n_dims + 1))
        time = np.zeros((n, 3))
        ids = np.zeros(n, dtype=np.int64)
        for i, task in enumerate(trace.tasks):
            ids[i] = task.task_id
            res[i] = scaler.res_features(task)
            time[i] = scaler.time_features(task)
        if not np.isfinite(res).all() or not np.isfinite(time).all():
            raise ad.NumericError("non-finite task feature")
        return cls(task_ids=ids, res=res, time=time)


@dataclass
class NodeEmbedParams:
    """Trainable pieces of the initial node embedding.

    The output dimension is ``d = d_task + d_res + d_time`` where the task
    part is a hashed id lookup and the other two are linear projections of
    the raw feature blocks.
    """

    task_embed_table: Tensor   # [hash_buckets, d_task]
    res_proj: Tensor           # [n_dims + 1, d_res]
    time_proj: Tensor          # [3, d_time]

    @property
    def hash_buckets(self) -> int:
        return self.task_embed_table.shape[0]

    @property
    def d(self) -> int:
        return (self.task_embed_table.shape[1] + self.res_proj.shape[1]
                + self.time_proj.shape[1])


def embed_nodes(
    features: TraceFeatures, task_idx: np.ndarray, params: NodeEmbedParams
) -> Tensor:
    """Initial embeddings for the given trace task indices, [m x d]."""
    task_idx = np.asarray(task_idx, dtype=np.intp)
    buckets = params.hash_buckets
    parts = []
    if params.task_embed_table.shape[1] > 0:
        hashed = features.task_ids[task_idx] % buckets
        parts.append(ad.select_rows(params.task_embed_table, hashed))
    parts.append(ad.matmul(ad.constant(features.res[task_idx]), params.res_proj))
    parts.append(ad.matmul(ad.constant(features.time[task_idx]), params.time_proj))
    return ad.concat(parts, axis=1)


def init_node_embedding(
    record: TaskRecord, params: NodeEmbedParams, scaler: FeatureScaler
) -> Tensor:
    """Embedding of a single task record, as a length-d vector."""
    res = scaler.res_features(record)
    time = scaler.time_features(record)
    if not np.isfinite(res).all() or not np.isfinite(time).all():
        raise ad.NumericError(f"non-finite feature for task {record.task_id}")
    parts = []
    if params.task_embed_table.shape[1] > 0:
        row = np.array([record.task_id % params.hash_buckets], dtype=np.intp)
        parts.append(ad.select_rows(params.task_embed_table, row))
    parts.append(ad.matmul(ad.constant(res[None, :]), params.res_proj))
    parts.append(ad.matmul(ad.constant(time[None, :]), params.time_proj))
    return ad.reshape(ad.concat(parts, axis=1), (params.d,))


# ---------------------------------------------------------------------------
# edge construction
# ---------------------------------------------------------------------------

def build_edges(
    trace: ScheduleTrace, slice_tasks, rules: EdgeRuleConfig
) -> list[EdgeCandidate]:
    """Detect typed edges among the slice's tasks.

    Returns directed candidates with slice-local indices (positions into
    the sorted task-index list).  Duplicate (src, dst) pairs keep the
    highest-precedence kind: shared_resource > sequential > coexistence.
    """
    rules.validate()
    members = sorted(slice_tasks)
    local = {task_idx: pos for pos, task_idx in enumerate(members)}
    tasks = [trace.tasks[i] for i in members]
    best: dict[tuple[int, int], EdgeKind] = {}

    def offer(a: int, b: int, kind: EdgeKind) -> None:
        key = (a, b)
        if key not in best or kind < best[key]:
            best[key] = kind

    by_node: dict[int, list[int]] = {}
    for pos, task in enumerate(tasks):
        by_node.setdefault(task.node_id, []).append(pos)

    # Shared resource: same node, overlapping [start, end); symmetric.
    for group in by_node.values():
        for ia in range(len(group)):
            for ib in range(ia + 1, len(group)):
                a, b = group[ia], group[ib]
                ta, tb = tasks[a], tasks[b]
                if ta.start_time < tb.end_time and tb.start_time < ta.end_time:
                    offer(a, b, EdgeKind.SHARED_RESOURCE)
                    offer(b, a, EdgeKind.SHARED_RESOURCE)

    # Sequential: the next seq_k tasks started on the same node after i ends.
    for group in by_node.values():
        ordered = sorted(group, key=lambda p: (tasks[p].start_time, tasks[p].task_id))
        for a in group:
            succ = [p for p in ordered if tasks[p].start_time >= tasks[a].end_time]
            for b in succ[: rules.seq_k]:
                if b != a:
                    offer(a, b, EdgeKind.SEQUENTIAL)

    # Coexistence: submit times within eps; symmetric, any node.
    by_submit = sorted(range(len(tasks)), key=lambda p: (tasks[p].submit_time,
                                                         tasks[p].task_id))
    left = 0
    for right in range(len(by_submit)):
        b = by_submit[right]
        while tasks[b].submit_time - tasks[by_submit[left]].submit_time > rules.coexist_eps:
            left += 1
        for mid in range(left, right):
            a = by_submit[mid]
            offer(a, b, EdgeKind.COEXISTENCE)
            offer(b, a, EdgeKind.COEXISTENCE)

    return [EdgeCandidate(src, dst, kind)
            for (src, dst), kind in sorted(best.items())]


def temporal_bias(task_i: TaskRecord, task_j: TaskRecord, tau: float) -> float:
    """Recency bias for the attention logit: -|submit gap| / tau."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    return -abs(task_i.submit_time - task_j.submit_time) / tau


def build_slice_graph(
    trace: ScheduleTrace,
    slice_tasks,
    slice_index: int,
    rules: EdgeRuleConfig,
    tau: float,
) -> SchedGraph:
    """Assemble the structural part of one slice's graph (no weights yet)."""
    members = np.array(sorted(slice_tasks), dtype=np.intp)
    edges = build_edges(trace, members, rules)
    src = np.array([e.src for e in edges], dtype=np.intp)
    dst = np.array([e.dst for e in edges], dtype=np.intp)
    kinds = np.array([int(e.kind) for e in edges], dtype=np.int8)
    delta = np.array(
        [temporal_bias(trace.tasks[members[e.src]], trace.tasks[members[e.dst]], tau)
         for e in edges]
    )
    return SchedGraph(slice_index=slice_index, node_ids=members,
                      src=src, dst=dst, kinds=kinds, delta=delta)


# ---------------------------------------------------------------------------
# attention weights
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    W_q: Tensor
    W_k: Tensor
    tau: float

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.W_q.shape != self.W_k.shape or self.W_q.shape[0] != self.W_q.shape[1]:
            raise ad.ShapeError("W_q and W_k must be square and equal-shaped")


def edge_attention(
    h: Tensor, src: np.ndarray, dst: np.ndarray, params: AttentionParams,
    bias: np.ndarray,
) -> Tensor:
    """Per-edge attention weights, softmax-normalized over each source's
    outgoing edges: softmax_j((W_q h_i) . (W_k h_j) / sqrt(d) + bias_ij)."""
    params.validate()
    d = h.shape[1]
    if src.size == 0:
        return ad.constant(np.empty(0))
    q = ad.matmul(h, ad.transpose(params.W_q))
    k = ad.matmul(h, ad.transpose(params.W_k))
    raw = ad.rows_sum(ad.mul(ad.select_rows(q, src), ad.select_rows(k, dst)))
    logits = ad.add(ad.scale(raw, 1.0 / np.sqrt(d)), ad.constant(bias))
    if not np.isfinite(logits.data).all():
        bad = int(np.flatnonzero(~np.isfinite(logits.data))[0])
        raise ad.NumericError(
            f"non-finite attention logit on edge ({int(src[bad])}, {int(dst[bad])})"
        )
    return ad.segment_softmax(logits, src)


def uniform_edge_weights(src: np.ndarray) -> Tensor:
    """Ablation weighting: 1/outdegree per edge (constant, no gradient)."""
    if src.size == 0:
        return ad.constant(np.empty(0))
    counts = np.bincount(src)
    return ad.constant(1.0 / counts[src])


def attach_weights(graph: SchedGraph, h: Tensor, alpha: Tensor) -> SchedGraph:
    return replace(graph, h=h, alpha=alpha)


# ---------------------------------------------------------------------------
# time-slice fusion
# ---------------------------------------------------------------------------

def validate_fusion_weights(mu) -> tuple[float, float, float]:
    mu = tuple(float(m) for m in mu)
    if len(mu) != 3 or any(m < 0 for m in mu):
        raise ConfigError("mu must be three non-negative components")
    if abs(sum(mu) - 1.0) > 1e-9:
        raise ConfigError("mu must sum to 1")
    return mu


def fuse_slices(
    prev: SchedGraph | None, cur: SchedGraph, nxt: SchedGraph | None, mu
) -> SchedGraph:
    """Blend edge weights across (prev, cur, next) onto cur's node set.

    The fused weight of an edge is the mu-weighted mean of the slice
    weights, normalized by the mu mass of slices that contain both
    endpoints; per-source weights are renormalized to sum to 1 afterward.
    Edges whose every providing slice has zero mu are dropped.
    """
    mu = validate_fusion_weights(mu)
    if cur.h is None or cur.alpha is None:
        raise ad.ContractError("fuse_slices: cur must carry embeddings and weights")
    slices = [(mu[0], prev), (mu[1], cur), (mu[2], nxt)]
    present = [(m, g) for m, g in slices if g is not None]
    if all(m == 0.0 for m, _ in present):
        raise ConfigError("fuse_slices: all fusion weights masked to zero")

    cur_nodes = set(int(x) for x in cur.node_ids)
    pos_in_cur = {int(task): i for i, task in enumerate(cur.node_ids)}

    # Union of slice edges keyed by (task_src, task_dst), restricted to
    # cur's node set; remember each provider's edge position.
    union: dict[tuple[int, int], dict] = {}
    for s_idx, (m, g) in enumerate(present):
        ts, td = g.task_pairs()
        for e in range(g.n_edges):
            a, b = int(ts[e]), int(td[e])
            if a in cur_nodes and b in cur_nodes:
                entry = union.setdefault((a, b), {"kind": int(g.kinds[e]),
                                                  "providers": {}})
                entry["providers"][s_idx] = e
                entry["kind"] = min(entry["kind"], int(g.kinds[e]))

    # Membership mass per slice for denominator.
    member_mass = []
    for m, g in present:
        member_mass.append((m, set(int(x) for x in g.node_ids)))

    keys, kinds, denoms = [], [], []
    provider_rows: list[dict[int, int]] = []
    for key in sorted(union, key=lambda ab: (pos_in_cur[ab[0]], pos_in_cur[ab[1]])):
        entry = union[key]
        provided_mass = sum(present[s][0] for s in entry["providers"])
        if provided_mass == 0.0:
            continue
        a, b = key
        denom = sum(m for m, nodes in member_mass if a in nodes and b in nodes)
        keys.append(key)
        kinds.append(entry["kind"])
        denoms.append(denom)
        provider_rows.append(entry["providers"])

    n_edges = len(keys)
    src = np.array([pos_in_cur[a] for a, _ in keys], dtype=np.intp)
    dst = np.array([pos_in_cur[b] for _, b in keys], dtype=np.intp)
    if n_edges == 0:
        return SchedGraph(slice_index=cur.slice_index, node_ids=cur.node_ids.copy(),
                          src=src, dst=dst, kinds=np.array(kinds, dtype=np.int8),
                          delta=np.empty(0), h=cur.h,
                          alpha=ad.constant(np.empty(0)))

    # Differentiable blend: gather from each slice's (zero-padded) alpha.
    blended = None
    for s_idx, (m, g) in enumerate(present):
        if m == 0.0:
            continue
        idx = np.array(
            [prov.get(s_idx, g.n_edges) for prov in provider_rows], dtype=np.intp
        )
        padded = ad.concat([g.alpha, ad.constant(np.zeros(1))], axis=0)
        contrib = ad.scale(ad.select_rows(padded, idx), m)
        blended = contrib if blended is None else ad.add(blended, contrib)
    weights = ad.mul(blended, ad.constant(1.0 / np.array(denoms)))

    # Per-source renormalization back onto the simplex.
    sums = ad.segment_sum(weights, src, cur.n_nodes)
    alpha = ad.div(weights, ad.select_rows(sums, src))

    cur_slot = next(i for i, (_, g) in enumerate(present) if g is cur)
    delta = np.array([float(cur.delta[provider_rows[e][cur_slot]])
                      if cur_slot in provider_rows[e] else 0.0
                      for e in range(n_edges)])
    return SchedGraph(slice_index=cur.slice_index, node_ids=cur.node_ids.copy(),
                      src=src, dst=dst, kinds=np.array(kinds, dtype=np.int8),
                      delta=delta, h=cur.h, alpha=alpha)


# ---------------------------------------------------------------------------
# neighbor prior and structural loss
# ---------------------------------------------------------------------------

def _check_distributions(p: Tensor, what: str) -> None:
    if p.data.ndim != 2:
        raise ad.ShapeError(f"{what}: expected 2-d distributions")
    if p.data.size == 0:
        return
    if (p.data < 0).any() or np.abs(p.data.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError(f"{what}: rows must be distributions summing to 1")


def neighbor_prior(p: Tensor, graph: SchedGraph) -> Tensor:
    """Attention-weighted average of neighbor distributions.

    Isolated nodes (no outgoing edges) keep their own distribution.
    """
    _check_distributions(p, "neighbor_prior")
    if graph.alpha is None:
        raise ad.ContractError("neighbor_prior: graph has no edge weights")
    n = graph.n_nodes
    if graph.n_edges == 0:
        return p
    alpha_col = ad.reshape(graph.alpha, (graph.n_edges, 1))
    messages = ad.mul(ad.select_rows(p, graph.dst), alpha_col)
    agg = ad.segment_sum(messages, graph.src, n)
    isolated = np.ones((n, 1))
    isolated[np.unique(graph.src)] = 0.0
    return ad.add(agg, ad.mul(p, ad.constant(isolated)))


def graph_loss(
    h: Tensor, graph: SchedGraph, p: Tensor, p_hat: Tensor,
    lambda1: float, lambda2: float,
) -> Tensor:
    """Structural smoothing plus neighbor-prior KL:
    lambda1 * sum_e alpha_e ||h_src - h_dst||^2 + lambda2 * sum_i KL(p_i || p_hat_i).
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError("loss weights must be non-negative")
    _check_distributions(p, "graph_loss p")
    total = None
    if lambda1 > 0 and graph.n_edges > 0:
        if graph.alpha is None:
            raise ad.ContractError("graph_loss: graph has no edge weights")
        diff = ad.sub(ad.select_rows(h, graph.src), ad.select_rows(h, graph.dst))
        per_edge = ad.rows_sum(ad.mul(diff, diff))
        total = ad.scale(ad.dot(per_edge, graph.alpha), lambda1)
    if lambda2 > 0:
        kl = ad.scale(ad.kl_div(p, p_hat), lambda2)
        total = kl if total is None else ad.add(total, kl)
    if total is None:
        total = ad.constant(0.0)
    return total


# ---------------------------------------------------------------------------
# debug dump
# ---------------------------------------------------------------------------

def write_graph_jsonl(graphs: list[SchedGraph], fh) -> None:
    """Line-delimited dump of nodes and weighted edges for analysis."""
    for g in graphs:
        for local, task_idx in enumerate(g.node_ids):
            fh.write(json.dumps({
                "kind": "node", "slice": g.slice_index,
                "index": local, "task_index": int(task_idx),
            }) + "\n")
        alpha = g.alpha.data if g.alpha is not None else np.full(g.n_edges, np.nan)
        for e in range(g.n_edges):
            fh.write(json.dumps({
                "kind": "edge", "slice": g.slice_index,
                "src": int(g.src[e]), "dst": int(g.dst[e]),
                "edge_kind": EdgeKind(int(g.kinds[e])).label,
                "alpha": float(alpha[e]),
            }) + "\n")
