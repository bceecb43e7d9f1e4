"""Tensor-completion surrogate modeling for discrete design spaces."""

from .core import (
    Axis,
    DenseTensor,
    DesignSpace,
    Normalizer,
    ObservationSet,
    build_design_space,
    encode_observations,
    invert_normalization,
)
from .cpd import (
    CPDModel,
    FactorSet,
    SmoothnessConfig,
    grad_masked_loss,
    init_factors,
    masked_mse,
    predict_entry,
    reconstruct_full,
    smoothness_penalty,
)
from .errors import (
    CapacityError,
    ContractError,
    DegenerateDataError,
    DivergenceError,
    SchemaError,
    SplitError,
    StratumExhaustedError,
    TenfitError,
)
from .harness import (
    RegionErrorGrid,
    RegionSpec,
    SamplingPlan,
    biased_split,
    ood_sweep,
    per_cell_errors,
    run_experiment,
    run_sweep,
    uniform_split,
)
from .metrics import (
    FactorComparison,
    MetricsReport,
    component_expression_export,
    fms,
    normalized_components,
    regression_metrics,
)
from .modelio import load_dataset, load_model, save_model, write_dataset
from .neural import (
    ConvHead,
    EmbeddingBank,
    NeuralModel,
    costco_fit,
    neural_forward,
    neural_grad,
)
from .optim import AdamState, TrainConfig, TrainReport, adam_step, fit, predict_set

__version__ = "0.1.0"

__all__ = [
    "Axis",
    "DenseTensor",
    "DesignSpace",
    "Normalizer",
    "ObservationSet",
    "build_design_space",
    "encode_observations",
    "invert_normalization",
    "CPDModel",
    "FactorSet",
    "SmoothnessConfig",
    "grad_masked_loss",
    "init_factors",
    "masked_mse",
    "predict_entry",
    "reconstruct_full",
    "smoothness_penalty",
    "CapacityError",
    "ContractError",
    "DegenerateDataError",
    "DivergenceError",
    "SchemaError",
    "SplitError",
    "StratumExhaustedError",
    "TenfitError",
    "RegionErrorGrid",
    "RegionSpec",
    "SamplingPlan",
    "biased_split",
    "ood_sweep",
    "per_cell_errors",
    "run_experiment",
    "run_sweep",
    "uniform_split",
    "FactorComparison",
    "MetricsReport",
    "component_expression_export",
    "fms",
    "normalized_components",
    "regression_metrics",
    "load_dataset",
    "load_model",
    "save_model",
    "write_dataset",
    "ConvHead",
    "EmbeddingBank",
    "NeuralModel",
    "costco_fit",
    "neural_forward",
    "neural_grad",
    "AdamState",
    "TrainConfig",
    "TrainReport",
    "adam_step",
    "fit",
    "predict_set",
]
