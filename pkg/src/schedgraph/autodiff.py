"""Dense float64 tensors with taped reverse-mode gradients.

Every operation records its inputs and a backward closure on the implicit
tape (the DAG of ``Tensor`` nodes), so calling :func:`backward` on a scalar
loss populates exact gradients for all leaf tensors it depends on.  A
:class:`ParamStore` keeps named trainable leaves plus persistent gradient
slots, and :func:`check_gradients` verifies the analytic gradients against
central finite differences.

All values are float64, row-major, and checked for NaN/Inf after each
public operation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KL_FLOOR = 1e-12
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NumericError(ArithmeticError):
    """An op produced (or was handed) a non-finite value."""


class ContractError(RuntimeError):
    """An API contract was violated (non-scalar loss, missing backward, ...)."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if data.size and not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A float64 array node in the computation DAG.

    Leaf tensors (no parents) are inputs: either constants or named
    parameters owned by a :class:`ParamStore`.  Non-leaf tensors remember
    the op that produced them and how to push gradients to their parents.
    """

    __slots__ = ("data", "grad", "op", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, op="leaf"):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # Small conveniences for composing losses; everything routes through
    # the module-level ops so the tape sees every step.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def constant(data) -> Tensor:
    """Wrap raw data as a leaf tensor (no gradient of interest)."""
    return Tensor(data)


# ---------------------------------------------------------------------------
# op suite
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    _check_finite(out_data, "matmul")

    def _bw(u):
        return u @ b.data.T, a.data.T @ u

    return Tensor(out_data, (a, b), _bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")

    def _bw(u):
        return (u.T,)

    return Tensor(a.data.T, (a,), _bw, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def _bw(u):
        return (u.reshape(old),)

    return Tensor(a.data.reshape(shape), (a,), _bw, "reshape")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")

    def _bw(u):
        return u, u

    return Tensor(a.data + b.data, (a, b), _bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")

    def _bw(u):
        return u, -u

    return Tensor(a.data - b.data, (a, b), _bw, "sub")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def _bw(u):
        return (u * c,)

    return Tensor(a.data * c, (a,), _bw, "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a column vector broadcast over ``a``."""
    col_broadcast = (
        a.data.ndim == 2
        and b.data.ndim == 2
        and b.shape == (a.shape[0], 1)
        and a.shape[1] != 1
    )
    if not col_broadcast and a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    out_data = a.data * b.data
    _check_finite(out_data, "mul")

    def _bw(u):
        ga = u * b.data
        gb = u * a.data
        if col_broadcast:
            gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return Tensor(out_data, (a, b), _bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient; same broadcasting rules as :func:`mul`."""
    col_broadcast = (
        a.data.ndim == 2
        and b.data.ndim == 2
        and b.shape == (a.shape[0], 1)
        and a.shape[1] != 1
    )
    if not col_broadcast and a.shape != b.shape:
        raise ShapeError(f"div: {a.shape} vs {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    _check_finite(out_data, "div")

    def _bw(u):
        ga = u / b.data
        gb = -u * a.data / (b.data * b.data)
        if col_broadcast:
            gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return Tensor(out_data, (a, b), _bw, "div")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def _bw(u):
        return (u * (1.0 - out_data * out_data),)

    return Tensor(out_data, (a,), _bw, "tanh")


def log_floor(a: Tensor) -> Tensor:
    """Natural log with the normative additive floor: ln(x + 1e-12)."""
    shifted = a.data + LOG_FLOOR
    if shifted.size and (shifted <= 0.0).any():
        raise NumericError("log_floor: argument <= -1e-12")
    out_data = np.log(shifted)

    def _bw(u):
        return (u / shifted,)

    return Tensor(out_data, (a,), _bw, "log_floor")


def softmax_row(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_row: expected 2-d, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True) if a.data.size else a.data
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True) if a.data.size else e
    _check_finite(out_data, "softmax_row")

    def _bw(u):
        inner = (u * out_data).sum(axis=1, keepdims=True)
        return (out_data * (u - inner),)

    return Tensor(out_data, (a,), _bw, "softmax_row")


def segment_softmax(logits: Tensor, segments: np.ndarray) -> Tensor:
    """Softmax within contiguous groups of a 1-d logit vector.

    ``segments`` must be a sorted integer array; equal values form one
    group (here: edges grouped by source node).  Uses per-group
    max-subtraction.
    """
    if logits.data.ndim != 1:
        raise ShapeError(f"segment_softmax: expected 1-d, got {logits.shape}")
    segments = np.asarray(segments)
    if segments.shape != logits.shape:
        raise ShapeError("segment_softmax: segment ids must align with logits")
    n = logits.data.size
    if n == 0:
        return Tensor(
            np.empty(0), (logits,), lambda u: (np.empty(0),), "segment_softmax"
        )
    if (np.diff(segments) < 0).any():
        raise ShapeError("segment_softmax: segments must be sorted")
    starts = np.concatenate(([0], np.flatnonzero(np.diff(segments)) + 1))
    group_of = np.cumsum(np.concatenate(([0], np.diff(segments) != 0)))
    gmax = np.maximum.reduceat(logits.data, starts)
    e = np.exp(logits.data - gmax[group_of])
    gsum = np.add.reduceat(e, starts)
    out_data = e / gsum[group_of]
    _check_finite(out_data, "segment_softmax")

    def _bw(u):
        inner = np.add.reduceat(u * out_data, starts)
        return (out_data * (u - inner[group_of]),)

    return Tensor(out_data, (logits,), _bw, "segment_softmax")


def segment_sum(values: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Scatter-add rows (or scalars) of ``values`` into ``num_segments`` slots."""
    segments = np.asarray(segments)
    if segments.ndim != 1 or segments.shape[0] != values.shape[0]:
        raise ShapeError("segment_sum: one segment id per row required")
    if values.data.ndim == 1:
        out_data = np.bincount(
            segments, weights=values.data, minlength=num_segments
        ).astype(np.float64)
    elif values.data.ndim == 2:
        out_data = np.zeros((num_segments, values.shape[1]))
        np.add.at(out_data, segments, values.data)
    else:
        raise ShapeError(f"segment_sum: expected 1-d or 2-d, got {values.shape}")

    def _bw(u):
        return (u[segments],)

    return Tensor(out_data, (values,), _bw, "segment_sum")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows, keeping a [1 x d] shape."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows: expected 2-d, got {a.shape}")
    n = a.shape[0]
    if n == 0:
        raise ShapeError("mean_rows: empty input")
    out_data = a.data.mean(axis=0, keepdims=True)

    def _bw(u):
        return (np.broadcast_to(u / n, a.shape).copy(),)

    return Tensor(out_data, (a,), _bw, "mean_rows")


def rows_sum(a: Tensor) -> Tensor:
    """Per-row sum of a 2-d tensor, as a 1-d vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"rows_sum: expected 2-d, got {a.shape}")

    def _bw(u):
        return (np.broadcast_to(u[:, None], a.shape).copy(),)

    return Tensor(a.data.sum(axis=1), (a,), _bw, "rows_sum")


def mean_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("mean_all: empty input")
    n = a.data.size

    def _bw(u):
        return (np.full(a.shape, float(u) / n),)

    return Tensor(a.data.mean(), (a,), _bw, "mean_all")


def sum_sq(a: Tensor) -> Tensor:
    """Sum of squared entries, as a scalar."""

    def _bw(u):
        return (2.0 * float(u) * a.data,)

    return Tensor(np.square(a.data).sum(), (a,), _bw, "sum_sq")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: {a.shape} vs {b.shape}")
    out_data = np.dot(a.data, b.data)
    _check_finite(np.asarray(out_data), "dot")

    def _bw(u):
        return float(u) * b.data, float(u) * a.data

    return Tensor(out_data, (a, b), _bw, "dot")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Total KL(p || q) over matching rows, with the 1e-12 additive floor
    inside both log arguments."""
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: {p.shape} vs {q.shape}")
    pf = p.data + KL_FLOOR
    qf = q.data + KL_FLOOR
    if p.data.size and ((pf <= 0.0).any() or (qf <= 0.0).any()):
        raise NumericError("kl_div: negative probability mass")
    log_ratio = np.log(pf) - np.log(qf)
    out_data = np.sum(p.data * log_ratio)
    _check_finite(np.asarray(out_data), "kl_div")

    def _bw(u):
        gp = float(u) * (log_ratio + p.data / pf)
        gq = -float(u) * (p.data / qf)
        return gp, gq

    return Tensor(out_data, (p, q), _bw, "kl_div")


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bw(u):
        slicer = [slice(None)] * u.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(u[tuple(slicer)])
        return tuple(grads)

    return Tensor(out_data, tuple(parts), _bw, "concat")


def select_rows(a: Tensor, idx) -> Tensor:
    """Gather rows (2-d) or entries (1-d) by index; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("select_rows: index must be 1-d")
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"select_rows: expected 1-d or 2-d, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("select_rows: index out of range")
    out_data = a.data[idx]

    def _bw(u):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, u)
        return (ga,)

    return Tensor(out_data, (a,), _bw, "select_rows")


def select_cols(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"select_cols: expected 2-d, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError("select_cols: index out of range")
    out_data = a.data[:, idx]

    def _bw(u):
        ga = np.zeros_like(a.data.T)
        np.add.at(ga, idx, u.T)
        return (ga.T,)

    return Tensor(out_data, (a,), _bw, "select_cols")


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a 1-d vector to every row of a 2-d tensor."""
    if a.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != a.shape[1]:
        raise ShapeError(f"add_rowvec: {a.shape} + {v.shape}")

    def _bw(u):
        return u, u.sum(axis=0)

    return Tensor(a.data + v.data[None, :], (a, v), _bw, "add_rowvec")


# ---------------------------------------------------------------------------
# parameters and backward pass
# ---------------------------------------------------------------------------

class ParamStore:
    """Named registry of trainable leaf tensors with persistent grad slots.

    Gradients accumulate across :func:`backward` calls until
    :meth:`reset_grads` zeroes them; that is what makes multi-graph
    batches a plain sequence of backward calls.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.grads_live = False

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def reset_grads(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0
        self.grads_live = False

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            t = self._params[k]
            if t.data.shape != np.asarray(v).shape:
                raise ShapeError(f"load_values: shape mismatch for {k!r}")
            t.data[...] = v


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, store: ParamStore | None = None) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into leaf grads.

    Intermediate gradients are kept in a transient map, so re-running a
    fresh forward graph and calling backward again accumulates only at
    the leaves (the documented behavior for gradient accumulation).
    """
    if loss.data.shape not in ((), (1,)):
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        u = grads.pop(id(node), None)
        if u is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += u
            continue
        for parent, g in zip(node._parents, node._backward(u)):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    if store is not None:
        store.grads_live = True


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter max relative error of analytic vs numeric gradients.

    Relative error is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``
    per coordinate, reduced to the per-parameter max.
    """

    tolerance: float
    epsilon: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_gradients(
    loss_fn,
    store: ParamStore,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    params: list[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    ``loss_fn`` takes no arguments, reads current values from ``store``,
    and returns a scalar Tensor.  It must be deterministic (disable
    dropout); two baseline evaluations are compared bit-for-bit to catch
    violations.
    """
    if epsilon <= 0:
        raise ContractError("check_gradients: epsilon must be positive")
    base_a = loss_fn().item()
    base_b = loss_fn().item()
    if base_a != base_b:
        raise ContractError(
            "check_gradients: loss_fn is not deterministic "
            f"({base_a!r} != {base_b!r})"
        )

    store.reset_grads()
    backward(loss_fn(), store)
    analytic = {k: t.grad.copy() for k, t in store.items()}

    names = params if params is not None else store.names()
    report = GradCheckReport(tolerance=tolerance, epsilon=epsilon)
    for name in names:
        t = store[name]
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = loss_fn().item()
            flat[i] = orig - epsilon
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)
        a = analytic[name].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        rel = np.abs(a - numeric) / denom
        report.per_param[name] = float(rel.max()) if rel.size else 0.0
    return report


# ---------------------------------------------------------------------------
# checkpoint archive
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(store: ParamStore, path) -> None:
    """Write a named-tensor archive: version byte, then per tensor a text
    header line ``name dim0,dim1,...`` followed by a little-endian f64
    payload."""
    with open(path, "wb") as fh:
        fh.write(bytes([CHECKPOINT_VERSION]))
        for name, t in sorted(store.items()):
            dims = ",".join(str(d) for d in t.data.shape)
            fh.write(f"{name} {dims}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a named-tensor archive back into a name -> array mapping."""
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        version = fh.read(1)
        if not version:
            raise ContractError(f"checkpoint {path}: empty file")
        if version[0] != CHECKPOINT_VERSION:
            raise ContractError(
                f"checkpoint {path}: unsupported version {version[0]}"
            )
        while True:
            header = fh.readline()
            if not header:
                break
            try:
                name, dims = header.decode("ascii").rstrip("\n").split(" ")
            except ValueError as exc:
                raise ContractError(f"checkpoint {path}: bad header {header!r}") from exc
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise ContractError(f"checkpoint {path}: truncated payload for {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return tensors
