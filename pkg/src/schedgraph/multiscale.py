"""Multi-scale neighborhood aggregation over a slice graph.

Node embeddings are averaged over k-hop balls of growing radius (with a
whole-graph scale as the widest ball), each pass going through its own
linear map and tanh.  A small attention network scores the scales per
node, the scores fuse the per-scale representations, and a graph-level
residual is added back.  Two penalties keep the scales coherent: scale
representations should stay near the fusion, and the final embedding
should stay near the input one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import SchedGraph
from .workload import ConfigError

GLOBAL = "global"

DEFAULT_SCALES: tuple = (1, 2, GLOBAL)


def validate_scales(scales) -> tuple:
    scales = tuple(scales)
    if not scales:
        raise ConfigError("need at least one scale")
    for s in scales:
        if s == GLOBAL:
            continue
        if not isinstance(s, int) or isinstance(s, bool) or s < 1:
            raise ConfigError(f"scale must be a positive hop count or '{GLOBAL}', got {s!r}")
    return scales


def _adjacency(graph: SchedGraph) -> list[list[int]]:
    """Undirected neighbor lists over the graph's edges."""
    adj: list[set[int]] = [set() for _ in range(graph.n_nodes)]
    for a, b in zip(graph.src, graph.dst):
        if a != b:
            adj[a].add(int(b))
            adj[b].add(int(a))
    return [sorted(s) for s in adj]


def khop_neighborhood(graph: SchedGraph, node: int, k) -> np.ndarray:
    """Nodes within k hops of ``node`` (self included), sorted.

    ``k`` may be the module's GLOBAL sentinel, meaning every node.
    """
    if not 0 <= node < graph.n_nodes:
        raise IndexError(f"node {node} out of range")
    if k == GLOBAL:
        return np.arange(graph.n_nodes, dtype=np.intp)
    if not isinstance(k, int) or k < 1:
        raise ConfigError(f"hop count must be >= 1, got {k!r}")
    adj = _adjacency(graph)
    seen = {node}
    frontier = [node]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        if not nxt:
            break
        frontier = nxt
    return np.array(sorted(seen), dtype=np.intp)


def neighborhood_operator(graph: SchedGraph, scale) -> np.ndarray:
    """Row-stochastic averaging matrix M with M[i, j] = 1/|ball(i)| for
    j inside node i's ball at the given scale."""
    n = graph.n_nodes
    if n == 0:
        raise ad.ShapeError("neighborhood_operator: empty graph")
    if scale == GLOBAL:
        return np.full((n, n), 1.0 / n)
    M = np.zeros((n, n))
    adj = _adjacency(graph)
    for i in range(n):
        seen = {i}
        frontier = [i]
        for _ in range(scale):
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            if not nxt:
                break
            frontier = nxt
        M[i, list(seen)] = 1.0 / len(seen)
    return M


@dataclass
class MultiScaleParams:
    """Trainable tensors for the scale stack.

    ``scale_maps`` has one [d x d] matrix per configured scale, applied in
    order (each scale consumes the previous scale's output).
    """

    scale_maps: list[Tensor]
    W_a: Tensor   # [d_a, d]
    b_a: Tensor   # [d_a]
    w: Tensor     # [d_a]
    W_r: Tensor   # [d, d]
    b_r: Tensor   # [d]

    @property
    def n_scales(self) -> int:
        return len(self.scale_maps)


def scale_aggregate(h_prev: Tensor, operator: np.ndarray, weight: Tensor) -> Tensor:
    """One stack step: tanh(W . mean over the neighborhood of h_prev)."""
    pooled = ad.matmul(ad.constant(operator), h_prev)
    return ad.tanh(ad.matmul(pooled, ad.transpose(weight)))


def stack_scales(
    h0: Tensor, operators: list[np.ndarray], params: MultiScaleParams
) -> list[Tensor]:
    """Sequentially aggregated representations, one per scale."""
    if len(operators) != params.n_scales:
        raise ad.ShapeError("one neighborhood operator per scale map required")
    outs = []
    h = h0
    for op, weight in zip(operators, params.scale_maps):
        h = scale_aggregate(h, op, weight)
        outs.append(h)
    return outs


def scale_attention(h_scales: list[Tensor], params: MultiScaleParams) -> Tensor:
    """Per-node softmax over scales: beta = softmax_k(w . tanh(W_a h_k + b_a))."""
    if not h_scales:
        raise ad.ShapeError("scale_attention: no scales")
    d_a = params.w.shape[0]
    cols = []
    for h_k in h_scales:
        hidden = ad.tanh(ad.add_rowvec(ad.matmul(h_k, ad.transpose(params.W_a)),
                                       params.b_a))
        cols.append(ad.matmul(hidden, ad.reshape(params.w, (d_a, 1))))
    return ad.softmax_row(ad.concat(cols, axis=1))


def fuse_scales(h_scales: list[Tensor], beta: Tensor) -> Tensor:
    """Attention-weighted sum of the per-scale representations."""
    if beta.shape[1] != len(h_scales):
        raise ad.ShapeError("beta columns must match scale count")
    fused = None
    for k, h_k in enumerate(h_scales):
        term = ad.mul(h_k, ad.select_cols(beta, np.array([k], dtype=np.intp)))
        fused = term if fused is None else ad.add(fused, term)
    return fused


def dropout_mask(shape: tuple, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-scaling dropout mask; rate 0 gives all ones."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def global_residual(h_fusion: Tensor, params: MultiScaleParams) -> Tensor:
    """Add a graph-level readout back to every node:
    h_final = h_fusion + W_r mean_i(h_fusion) + b_r."""
    d = h_fusion.shape[1]
    g = ad.mean_rows(h_fusion)
    shift = ad.add(ad.matmul(g, ad.transpose(params.W_r)),
                   ad.reshape(params.b_r, (1, d)))
    return ad.add_rowvec(h_fusion, ad.reshape(shift, (d,)))


def msgsa_loss(
    h_scales: list[Tensor], h_fusion: Tensor, h_final: Tensor, h0: Tensor,
    gamma1: float, gamma2: float,
) -> Tensor:
    """Scale coherence plus embedding drift:
    gamma1 * sum_k ||h_k - h_fusion||^2 + gamma2 * ||h_final - h0||^2."""
    if gamma1 < 0 or gamma2 < 0:
        raise ConfigError("loss weights must be non-negative")
    total = None
    if gamma1 > 0:
        for h_k in h_scales:
            term = ad.sum_sq(ad.sub(h_k, h_fusion))
            total = term if total is None else ad.add(total, term)
        total = ad.scale(total, gamma1)
    if gamma2 > 0:
        drift = ad.scale(ad.sum_sq(ad.sub(h_final, h0)), gamma2)
        total = drift if total is None else ad.add(total, drift)
    if total is None:
        total = ad.constant(0.0)
    return total


def write_embeddings_csv(rows, d: int, fh) -> None:
    """Embedding dump: one line per node with its final vector.

    ``rows`` yields (task_id, slice_index, label, vector).
    """
    header = ["task_id", "slice", "label"] + [f"h{i}" for i in range(d)]
    fh.write(",".join(header) + "\n")
    for task_id, slice_index, label, vec in rows:
        cells = [str(int(task_id)), str(int(slice_index)), str(int(label))]
        cells += [f"{float(v):.10g}" for v in np.asarray(vec).ravel()]
        fh.write(",".join(cells) + "\n")
