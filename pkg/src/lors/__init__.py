"""Low-rank residual structure (LORS) for stacked layers, on a small numpy autodiff core."""

from .autodiff import ContractError, DimensionError, Tensor, backward, grad_check
from .budget import BudgetQuery, count_lors, count_model, table_report
from .decoder import MixerDecoder, StackConfig, build_stack
from .encoder import AllocationPlan, Encoder, EncoderConfig, parameter_fraction
from .params import AdaptiveLorsParam, StaticLorsParam, adaptive_fused_weight, static_fused_weight
from .training import AdamW, TrainConfig, compare_runs, make_task, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AdaptiveLorsParam",
    "AllocationPlan",
    "BudgetQuery",
    "ContractError",
    "DimensionError",
    "Encoder",
    "EncoderConfig",
    "MixerDecoder",
    "StackConfig",
    "StaticLorsParam",
    "Tensor",
    "TrainConfig",
    "adaptive_fused_weight",
    "backward",
    "build_stack",
    "compare_runs",
    "count_lors",
    "count_model",
    "grad_check",
    "make_task",
    "parameter_fraction",
    "static_fused_weight",
    "table_report",
    "train",
]
