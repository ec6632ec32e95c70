"""Post-training quantization toolkit for selective state-space language models."""

from .archive import Tensor, load_archive, save_archive
from .harness import (
    FidelityReport,
    QuantConfig,
    TokenCorpus,
    build_hooks,
    evaluate_fidelity,
    make_outlier_model,
    run_grid,
)
from .kernels import backend
from .model import (
    HookSet,
    MambaBlockWeights,
    MambaModel,
    ModelConfig,
    TapPoint,
    block_forward,
    discretize,
    load_model,
    model_forward,
    save_model,
    selective_scan,
)
from .quant import (
    QuantizedTensor,
    QuantScheme,
    dequantize,
    fake_quant,
    int_matmul,
    quantize_per_channel,
    quantize_per_tensor,
)
from .smoothing import SmoothingFactors, apply_smoothing, compute_smoothing
from .stats import ChannelStats, OutlierReport, detect_outliers, merge, record, zero_outlier_hook

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "load_archive",
    "save_archive",
    "FidelityReport",
    "QuantConfig",
    "TokenCorpus",
    "build_hooks",
    "evaluate_fidelity",
    "make_outlier_model",
    "run_grid",
    "backend",
    "HookSet",
    "MambaBlockWeights",
    "MambaModel",
    "ModelConfig",
    "TapPoint",
    "block_forward",
    "discretize",
    "load_model",
    "model_forward",
    "save_model",
    "selective_scan",
    "QuantizedTensor",
    "QuantScheme",
    "dequantize",
    "fake_quant",
    "int_matmul",
    "quantize_per_channel",
    "quantize_per_tensor",
    "SmoothingFactors",
    "apply_smoothing",
    "compute_smoothing",
    "ChannelStats",
    "OutlierReport",
    "detect_outliers",
    "merge",
    "record",
    "zero_outlier_hook",
]
