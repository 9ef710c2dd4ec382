"""Scheduling trace data model, synthetic workload generation, disturbance
injection, and the JSON Lines trace format.

A trace is an ordered collection of task executions placed onto resource
nodes by a greedy first-fit policy, so contention and queueing delays
arise naturally.  Disturbance injectors mutate a window of tasks and set
ground-truth anomaly labels, leaving everything else byte-identical.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import rng_for


class TraceError(Exception):
    """Base class for trace-level failures."""


class ParseError(TraceError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class InvariantError(TraceError):
    """A record violates a trace invariant."""


class NodeRefError(TraceError):
    """A task references a node_id that does not exist in the trace."""


class ConfigError(ValueError):
    """Invalid generation or disturbance configuration."""


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class AnomalyLabel(str, enum.Enum):
    NONE = "none"
    STRUCTURAL_SHIFT = "structural_shift"
    RESOURCE_CHANGE = "resource_change"
    TASK_DELAY = "task_delay"


@dataclass(frozen=True)
class TaskRecord:
    """One scheduled task execution."""

    task_id: int
    submit_time: float
    start_time: float
    end_time: float
    resource_demand: tuple[float, ...]
    priority: int
    stage: int
    node_id: int
    outcome: Outcome = Outcome.SUCCESS
    anomaly_label: AnomalyLabel = AnomalyLabel.NONE

    def validate(self) -> None:
        if not (0.0 <= self.submit_time <= self.start_time <= self.end_time):
            raise InvariantError(
                f"task {self.task_id}: requires 0 <= submit <= start <= end, got "
                f"({self.submit_time}, {self.start_time}, {self.end_time})"
            )
        for d in self.resource_demand:
            if not (0.0 <= d <= 1.0):
                raise InvariantError(
                    f"task {self.task_id}: demand component {d} outside [0, 1]"
                )
        if self.priority < 0:
            raise InvariantError(f"task {self.task_id}: negative priority")

    @property
    def duration(self) -> float:
        return self.end_time - self.start_time

    @property
    def is_anomalous(self) -> bool:
        return self.anomaly_label is not AnomalyLabel.NONE


@dataclass(frozen=True)
class ResourceNode:
    node_id: int
    capacity: tuple[float, ...]

    def validate(self) -> None:
        if any(c <= 0 for c in self.capacity):
            raise InvariantError(f"node {self.node_id}: non-positive capacity")


@dataclass(frozen=True)
class ScheduleTrace:
    """Tasks sorted by (submit_time, task_id) plus the node inventory."""

    tasks: tuple[TaskRecord, ...]
    nodes: tuple[ResourceNode, ...]
    horizon: float
    seed: int

    def validate(self) -> None:
        node_ids = {n.node_id for n in self.nodes}
        if len(node_ids) != len(self.nodes):
            raise InvariantError("duplicate node_id")
        seen: set[int] = set()
        prev_key = (-math.inf, -1)
        for t in self.tasks:
            t.validate()
            if t.task_id in seen:
                raise InvariantError(f"duplicate task_id {t.task_id}")
            seen.add(t.task_id)
            key = (t.submit_time, t.task_id)
            if key < prev_key:
                raise InvariantError("tasks not sorted by (submit_time, task_id)")
            prev_key = key
            if t.node_id not in node_ids:
                raise NodeRefError(
                    f"task {t.task_id} references unknown node {t.node_id}"
                )
        for n in self.nodes:
            n.validate()

    def labels(self) -> np.ndarray:
        """Binary anomaly labels aligned with task order."""
        return np.array([1 if t.is_anomalous else 0 for t in self.tasks], dtype=np.int64)


@dataclass(frozen=True)
class DisturbanceSpec:
    """One injected anomaly window."""

    kind: AnomalyLabel
    onset: float
    duration: float
    magnitude: float
    affected_fraction: float

    def validate(self, horizon: float) -> None:
        if self.kind is AnomalyLabel.NONE:
            raise ConfigError("disturbance kind must not be 'none'")
        if self.onset < 0 or self.duration < 0:
            raise ConfigError("disturbance onset/duration must be non-negative")
        if self.onset + self.duration > horizon:
            raise ConfigError(
                f"disturbance window [{self.onset}, {self.onset + self.duration}] "
                f"exceeds horizon {horizon}"
            )
        if self.magnitude <= 0:
            raise ConfigError("disturbance magnitude must be positive")
        if not (0.0 < self.affected_fraction <= 1.0):
            raise ConfigError("affected_fraction must be in (0, 1]")


@dataclass(frozen=True)
class GenConfig:
    """Synthetic workload settings.

    Beyond the core knobs, the service-time and priority distributions are
    fixed, documented choices: durations are exponential with mean
    ``mean_duration``, demands uniform in [0.05, 0.95] per dimension,
    priorities uniform over ``priority_levels``, stages uniform over
    ``n_stages``, and outcomes fail independently with ``failure_rate``.
    """

    n_tasks: int
    n_nodes: int
    horizon: float
    mean_interarrival: float
    seed: int
    mean_duration: float = 5.0
    n_resource_dims: int = 2
    priority_levels: int = 5
    n_stages: int = 4
    failure_rate: float = 0.02

    def validate(self) -> None:
        if self.n_tasks < 0:
            raise ConfigError("n_tasks must be >= 0")
        if self.n_nodes < 1:
            raise ConfigError("n_nodes must be >= 1")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.mean_interarrival <= 0:
            raise ConfigError("mean_interarrival must be positive")
        if self.mean_duration <= 0:
            raise ConfigError("mean_duration must be positive")
        if self.n_resource_dims < 1:
            raise ConfigError("n_resource_dims must be >= 1")
        if not (0.0 <= self.failure_rate < 1.0):
            raise ConfigError("failure_rate must be in [0, 1)")


def generate_trace(config: GenConfig) -> ScheduleTrace:
    """Synthesize a clean labeled-'none' trace, deterministic per seed.

    Placement is greedy first-fit: each task starts at the earliest time at
    or after its submission when the lowest-numbered node has spare
    capacity for its full demand vector in every dimension.
    """
    config.validate()
    rng = rng_for(config.seed, "trace")

    arrivals = np.cumsum(rng.exponential(config.mean_interarrival, size=config.n_tasks))
    durations = rng.exponential(config.mean_duration, size=config.n_tasks)
    demands = rng.uniform(0.05, 0.95, size=(config.n_tasks, config.n_resource_dims))
    priorities = rng.integers(0, config.priority_levels, size=config.n_tasks)
    stages = rng.integers(0, config.n_stages, size=config.n_tasks)
    failures = rng.random(config.n_tasks) < config.failure_rate

    nodes = tuple(
        ResourceNode(node_id=i, capacity=(1.0,) * config.n_resource_dims)
        for i in range(config.n_nodes)
    )

    # Running occupancy per node: list of (end_time, demand vector).
    running: list[list[tuple[float, np.ndarray]]] = [[] for _ in nodes]
    tasks: list[TaskRecord] = []
    for i in range(config.n_tasks):
        submit = float(arrivals[i])
        demand = demands[i]
        start = _first_fit_start(running, demand, submit)
        end = start + float(durations[i])
        node_idx = _fitting_node(running, demand, start)
        running[node_idx].append((end, demand))
        tasks.append(
            TaskRecord(
                task_id=i,
                submit_time=submit,
                start_time=start,
                end_time=end,
                resource_demand=tuple(float(d) for d in demand),
                priority=int(priorities[i]),
                stage=int(stages[i]),
                node_id=nodes[node_idx].node_id,
                outcome=Outcome.FAILURE if failures[i] else Outcome.SUCCESS,
                anomaly_label=AnomalyLabel.NONE,
            )
        )

    tasks.sort(key=lambda t: (t.submit_time, t.task_id))
    trace = ScheduleTrace(tasks=tuple(tasks), nodes=nodes, horizon=config.horizon,
                          seed=config.seed)
    trace.validate()
    return trace


def _used_at(running: list[tuple[float, np.ndarray]], t: float) -> np.ndarray:
    if not running:
        return np.zeros(0)
    live = [d for end, d in running if end > t]
    if not live:
        return np.zeros_like(running[0][1])
    return np.sum(live, axis=0)


def _fits(running: list[tuple[float, np.ndarray]], demand: np.ndarray, t: float) -> bool:
    used = _used_at(running, t)
    if used.size == 0:
        return True
    return bool(np.all(used + demand <= 1.0 + 1e-12))


def _fitting_node(running, demand, t) -> int:
    for idx, node_running in enumerate(running):
        if _fits(node_running, demand, t):
            return idx
    raise RuntimeError("first-fit invariant broken: no node fits at chosen start")


def _first_fit_start(running, demand, submit: float) -> float:
    if any(_fits(node_running, demand, submit) for node_running in running):
        return submit
    # Retry at each completion event after the submit time, in order.
    ends = sorted({end for node_running in running for end, _ in node_running
                   if end > submit})
    for t in ends:
        if any(_fits(node_running, demand, t) for node_running in running):
            return t
    raise RuntimeError("first-fit invariant broken: no completion frees capacity")


def inject_disturbance(
    trace: ScheduleTrace, spec: DisturbanceSpec, seed: int
) -> ScheduleTrace:
    """Return a new trace with one disturbance window applied.

    Tasks whose submit_time falls in [onset, onset + duration) are selected
    independently with probability ``affected_fraction``; selected tasks
    are mutated per the disturbance kind and labeled.  Unselected tasks
    are returned untouched.
    """
    spec.validate(trace.horizon)
    rng = rng_for(seed, "inject", spec.kind.value, spec.onset)

    lo, hi = spec.onset, spec.onset + spec.duration
    in_window = [i for i, t in enumerate(trace.tasks) if lo <= t.submit_time < hi]
    picks = rng.random(len(in_window)) < spec.affected_fraction
    affected = [i for i, hit in zip(in_window, picks) if hit]
    if not affected:
        return trace

    new_tasks = list(trace.tasks)
    if spec.kind is AnomalyLabel.TASK_DELAY:
        for i in affected:
            t = new_tasks[i]
            delta = spec.magnitude * t.duration
            new_tasks[i] = replace(
                t,
                start_time=t.start_time + delta,
                end_time=t.end_time + delta,
                anomaly_label=AnomalyLabel.TASK_DELAY,
            )
    elif spec.kind is AnomalyLabel.RESOURCE_CHANGE:
        for i in affected:
            t = new_tasks[i]
            bumped = tuple(
                min(1.0, d * (1.0 + spec.magnitude)) for d in t.resource_demand
            )
            new_tasks[i] = replace(
                t, resource_demand=bumped, anomaly_label=AnomalyLabel.RESOURCE_CHANGE
            )
    elif spec.kind is AnomalyLabel.STRUCTURAL_SHIFT:
        if len(trace.nodes) < 2:
            raise ConfigError("structural_shift needs at least two nodes")
        node_ids = [n.node_id for n in trace.nodes]
        # Permute the start offsets (start - submit) among affected tasks so
        # the start order scrambles while submit <= start stays true.
        offsets = [new_tasks[i].start_time - new_tasks[i].submit_time for i in affected]
        perm = rng.permutation(len(affected))
        for slot, i in enumerate(affected):
            t = new_tasks[i]
            others = [n for n in node_ids if n != t.node_id]
            new_node = others[int(rng.integers(0, len(others)))]
            new_start = t.submit_time + offsets[int(perm[slot])]
            new_tasks[i] = replace(
                t,
                node_id=new_node,
                start_time=new_start,
                end_time=new_start + t.duration,
                anomaly_label=AnomalyLabel.STRUCTURAL_SHIFT,
            )
    else:  # pragma: no cover - validate() rejects NONE
        raise ConfigError(f"unsupported disturbance kind {spec.kind}")

    out = replace(trace, tasks=tuple(new_tasks))
    out.validate()
    return out


def apply_disturbances(
    trace: ScheduleTrace, specs: list[DisturbanceSpec], seed: int
) -> ScheduleTrace:
    """Apply a list of disturbance windows in order."""
    for k, spec in enumerate(specs):
        trace = inject_disturbance(trace, spec, seed=(seed + k))
    return trace


# ---------------------------------------------------------------------------
# trace format (JSON Lines)
# ---------------------------------------------------------------------------

_TASK_FIELDS = {
    "kind", "task_id", "submit_time", "start_time", "end_time", "demand",
    "priority", "stage", "node_id", "outcome", "anomaly_label",
}


def serialize_trace(trace: ScheduleTrace) -> str:
    """Render a trace in the line-delimited format; first line is the meta
    header, then one task object per line."""
    lines = [json.dumps({
        "kind": "meta",
        "seed": trace.seed,
        "horizon": trace.horizon,
        "nodes": [
            {"node_id": n.node_id, "capacity": list(n.capacity)} for n in trace.nodes
        ],
    }, sort_keys=False)]
    for t in trace.tasks:
        lines.append(json.dumps({
            "kind": "task",
            "task_id": t.task_id,
            "submit_time": t.submit_time,
            "start_time": t.start_time,
            "end_time": t.end_time,
            "demand": list(t.resource_demand),
            "priority": t.priority,
            "stage": t.stage,
            "node_id": t.node_id,
            "outcome": t.outcome.value,
            "anomaly_label": t.anomaly_label.value,
        }, sort_keys=False))
    return "\n".join(lines) + "\n"


def write_trace(trace: ScheduleTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_trace(trace))


def parse_trace(source) -> ScheduleTrace:
    """Parse the line-delimited trace format from a string, bytes, or an
    iterable of lines.  Tasks are re-sorted by (submit_time, task_id)."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = [ln.rstrip("\n") for ln in source]

    meta = None
    tasks: list[TaskRecord] = []
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(rec, dict) or "kind" not in rec:
            raise ParseError(line_no, "record must be an object with a 'kind' field")
        kind = rec["kind"]
        if kind == "meta":
            if meta is not None:
                raise ParseError(line_no, "duplicate meta header")
            meta = _parse_meta(rec, line_no)
        elif kind == "task":
            if meta is None:
                raise ParseError(line_no, "task record before meta header")
            tasks.append(_parse_task(rec, line_no))
        else:
            raise ParseError(line_no, f"unknown record kind {kind!r}")

    if meta is None:
        if tasks:
            raise ParseError(1, "missing meta header")
        # Empty input: the empty trace with no nodes.
        return ScheduleTrace(tasks=(), nodes=(), horizon=1.0, seed=0)

    seed, horizon, nodes = meta
    tasks.sort(key=lambda t: (t.submit_time, t.task_id))
    trace = ScheduleTrace(tasks=tuple(tasks), nodes=nodes, horizon=horizon, seed=seed)
    trace.validate()
    return trace


def read_trace(path) -> ScheduleTrace:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh)


def _parse_meta(rec: dict, line_no: int):
    try:
        seed = int(rec["seed"])
        horizon = float(rec["horizon"])
        nodes = tuple(
            ResourceNode(node_id=int(n["node_id"]),
                         capacity=tuple(float(c) for c in n["capacity"]))
            for n in rec["nodes"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(line_no, f"bad meta header: {exc}") from exc
    return seed, horizon, nodes


def _parse_task(rec: dict, line_no: int) -> TaskRecord:
    unknown = set(rec) - _TASK_FIELDS
    if unknown:
        raise ParseError(line_no, f"unknown task fields {sorted(unknown)}")
    try:
        task = TaskRecord(
            task_id=int(rec["task_id"]),
            submit_time=float(rec["submit_time"]),
            start_time=float(rec["start_time"]),
            end_time=float(rec["end_time"]),
            resource_demand=tuple(float(d) for d in rec["demand"]),
            priority=int(rec["priority"]),
            stage=int(rec["stage"]),
            node_id=int(rec["node_id"]),
            outcome=Outcome(rec["outcome"]),
            anomaly_label=AnomalyLabel(rec["anomaly_label"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(line_no, f"bad task record: {exc}") from exc
    try:
        task.validate()
    except InvariantError as exc:
        raise InvariantError(f"line {line_no}: {exc}") from exc
    return task


# ---------------------------------------------------------------------------
# time slicing
# ---------------------------------------------------------------------------

class CoverageWarning(UserWarning):
    """Some tasks fall outside every window (stride > window_len gap)."""


def window_slice(
    trace: ScheduleTrace, window_len: float, stride: float
) -> list[list[int]]:
    """Task-index sets per sliding window over submit times.

    Slice t covers submit times in [t*stride, t*stride + window_len); one
    slice per stride step until the horizon is covered.  Warns if any task
    escapes all windows (possible when stride > window_len).
    """
    if window_len <= 0 or stride <= 0:
        raise ConfigError("window_len and stride must be positive")
    n_slices = max(1, math.ceil(trace.horizon / stride))
    if trace.tasks:
        last_submit = max(t.submit_time for t in trace.tasks)
        n_slices = max(n_slices, math.floor(last_submit / stride) + 1)
    slices: list[list[int]] = []
    covered: set[int] = set()
    for t in range(n_slices):
        lo = t * stride
        hi = lo + window_len
        members = [i for i, task in enumerate(trace.tasks)
                   if lo <= task.submit_time < hi]
        covered.update(members)
        slices.append(members)
    missing = len(trace.tasks) - len(covered)
    if missing:
        warnings.warn(
            f"{missing} task(s) fall outside every window "
            f"(window_len={window_len}, stride={stride})",
            CoverageWarning,
            stacklevel=2,
        )
    return slices
