"""Numerical simulation of 4/8-bit quantized attention with smoothing and FP22 accumulation."""

from .attention import (
    AttentionConfig,
    accumulate_pv,
    attention_oracle,
    attention_sage2,
    attention_tiled_fp,
)
from .errors import (
    BadMagicError,
    ConfigError,
    DimensionOverflowError,
    QuantizationError,
    TensorFileError,
    TruncatedFileError,
)
from .formats import (
    E4M3,
    E5M2,
    FP16,
    FP22,
    INT4,
    INT8,
    LowPrecisionFormat,
    cast_fp8,
    cast_fp16,
    decode_fp8,
    get_format,
    round_to_int,
    truncate_to_fp22,
)
from .metrics import AccuracyReport, aggregate, cos_sim, evaluate, rel_l1, rmse
from .quantize import (
    Granularity,
    GranularityKind,
    QuantizedTensor,
    compute_scales,
    dequantize,
    group_assign_per_thread,
    quantize,
    quantize_p_static,
)
from .smooth import (
    SmoothingState,
    baseline_hadamard,
    baseline_smoothquant,
    compute_delta_s,
    hadamard_rotation,
    smooth_k,
    smooth_q,
    smooth_v,
)
from .synth import GenSpec, OutlierSpec, gen_qkv, load_tensor, save_tensor

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
