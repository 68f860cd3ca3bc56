"""Field-aware attention for tabular click prediction.

Submodules cover the numeric tape, field schemas and embeddings, the three
attention variants, the basis-composed projection generator, the full model,
synthetic interaction benchmarks, and scaling / bound diagnostics.
"""

from .analysis import (
    BoundInputs,
    ScalingPoint,
    SweepReport,
    TrainSettings,
    eval_bound,
    export_interaction_matrix,
    fit_power_law,
    interaction_recovery_stats,
    run_scaling_sweep,
    run_training,
)
from .datagen import (
    LabeledDataset,
    SyntheticSpec,
    auc,
    default_benchmark_spec,
    generate_synthetic,
    read_dataset,
    solve_bias,
    write_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    FieldAttnError,
    InternalError,
    ResourceLimitError,
)
from .fields import (
    FieldSchema,
    FieldSpec,
    build_schema,
    embed_batch,
    init_embeddings,
    load_schema,
    save_schema,
)
from .model import (
    ModelConfig,
    ModelParams,
    count_params,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    loss_bce,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "BoundInputs",
    "ConfigError",
    "DataError",
    "DomainError",
    "FieldAttnError",
    "FieldSchema",
    "FieldSpec",
    "InternalError",
    "LabeledDataset",
    "ModelConfig",
    "ModelParams",
    "ResourceLimitError",
    "ScalingPoint",
    "SweepReport",
    "SyntheticSpec",
    "TrainSettings",
    "auc",
    "build_schema",
    "count_params",
    "default_benchmark_spec",
    "embed_batch",
    "eval_bound",
    "export_interaction_matrix",
    "fit_power_law",
    "forward",
    "generate_synthetic",
    "gradient_check",
    "init_embeddings",
    "init_params",
    "interaction_recovery_stats",
    "load_checkpoint",
    "load_schema",
    "loss_bce",
    "read_dataset",
    "run_scaling_sweep",
    "run_training",
    "save_checkpoint",
    "save_schema",
    "solve_bias",
    "write_dataset",
    "__version__",
]
