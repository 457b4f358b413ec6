"""Latent KV-cache compression toolkit.

Low-rank factorization of key/value projections with grouped
granularities, Fisher-information rank allocation, Hadamard-fused
per-token quantization, an exact attention reference engine, and
analytic memory/compute accounting.
"""

from .accounting import ModelPreset, kv_cache_bytes, recon_macs, total_memory_breakdown, weight_ratio
from .attention import (
    AttentionConfig,
    FusedWeights,
    LatentKVCache,
    LayerKV,
    LayerWeights,
    ModelWeights,
    build_fused,
    palu_decode,
    palu_decode_step_norope,
    palu_decode_step_quantized,
    palu_decode_step_rope,
    palu_prefill,
    reference_decode,
    rope_apply,
)
from .core import Matrix, SvdResult, cholesky, hadamard, matmul, random_matrix, svd
from .decompose import (
    CalibrationSet,
    DecomposedLayer,
    Granularity,
    decompose,
    frobenius_error,
    reconstruct,
)
from .errors import GoldenMismatchError, NumericalError, PaluError, ValidationError
from .quant import (
    QuantizedLatent,
    QuantParams,
    RotatedLayer,
    dequantize,
    fuse_hadamard,
    outlier_metric,
    quantize,
)
from .ranks import FisherScore, RankPlan, allocate, estimate_fisher, plan_report

__version__ = "0.1.0"
