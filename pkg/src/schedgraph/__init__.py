"""Anomaly detection for scheduler execution traces.

Traces are sliced into time windows, each window becomes an
attention-weighted behavior graph, neighboring windows are fused, and a
multi-scale aggregation stack turns node embeddings into per-task anomaly
scores.  The package ships a workload generator with labeled disturbance
injection, a small autodiff kernel, a deterministic trainer, evaluation
protocols, a scikit-learn style estimator, and a CLI.
"""

from .autodiff import (
    GradCheckReport,
    NumericError,
    ParamStore,
    ShapeError,
    Tensor,
    check_gradients,
    load_checkpoint,
    save_checkpoint,
)
from .config import (
    CONFIG_VERSION,
    EvalConfig,
    RunConfig,
    benchmark_config,
    build_trace,
    default_config,
    load_config,
    parse_config,
)
from .estimator import ScheduleAnomalyDetector
from .evaluation import (
    ABLATION_ROWS,
    MetricsReport,
    ResultRow,
    compute_metrics,
    neighborhood_sweep,
    rank_auc,
    run_ablation,
    summarize,
    sweep_scales,
)
from .graphs import (
    EdgeCandidate,
    EdgeKind,
    EdgeRuleConfig,
    SchedGraph,
    build_edges,
    edge_attention,
    fuse_slices,
    graph_loss,
    neighbor_prior,
    temporal_bias,
)
from .multiscale import (
    GLOBAL,
    MultiScaleParams,
    fuse_scales,
    global_residual,
    khop_neighborhood,
    msgsa_loss,
    scale_attention,
)
from .seeding import derive_seed, rng_for
from .training import (
    AdamHyper,
    AdamState,
    ModelConfig,
    TrainConfig,
    TrainResult,
    adam_step,
    build_pipeline,
    forward_unit,
    init_params,
    train,
)
from .workload import (
    AnomalyLabel,
    CoverageWarning,
    DisturbanceSpec,
    GenConfig,
    InvariantError,
    Outcome,
    ParseError,
    ResourceNode,
    ScheduleTrace,
    TaskRecord,
    TraceError,
    apply_disturbances,
    generate_trace,
    inject_disturbance,
    parse_trace,
    read_trace,
    serialize_trace,
    window_slice,
    write_trace,
)

__version__ = "0.1.0"
