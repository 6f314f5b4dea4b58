"""Gray-box choke-flow modeling toolkit.

A mechanistic multiphase choke model and its hybrid variant (neural-network
flow-area function), with regularized MAP parameter estimation, multi-restart
training statistics, and identifiability diagnostics.
"""

from .data import Dataset, SyntheticConfig, generate_mismatch_synthetic, generate_synthetic
from .estimation import (
    FitConfig,
    FitResult,
    PriorSpec,
    RegularizationConfig,
    SensitivityReport,
    map_objective,
    metrics,
    mle_objective,
    sensitivity_matrix,
    train,
)
from .physics import (
    AreaSpec,
    ChokeInput,
    FluidComposition,
    FluidConstants,
    PhysicalParams,
    mm_param_gradient,
    mm_predict,
)

__version__ = "0.1.0"

__all__ = [
    "AreaSpec",
    "ChokeInput",
    "Dataset",
    "FitConfig",
    "FitResult",
    "FluidComposition",
    "FluidConstants",
    "PhysicalParams",
    "PriorSpec",
    "RegularizationConfig",
    "SensitivityReport",
    "SyntheticConfig",
    "generate_mismatch_synthetic",
    "generate_synthetic",
    "map_objective",
    "metrics",
    "mle_objective",
    "mm_param_gradient",
    "mm_predict",
    "sensitivity_matrix",
    "train",
    "__version__",
]
