"""Double Sparsity sparse-attention decode engine (desk scale, numpy)."""

from .attention import (
    SparsityConfig,
    TopkResult,
    approx_scores,
    argtopk,
    ds_decode,
    full_attention,
    truncated_attention_oracle,
)
from .calibration import (
    CalibrationStats,
    accumulate_stats,
    calibrate_model,
    overlap_ratio,
    select_channels,
)
from .channels import ChannelSet
from .estimators import DoubleSparsityAttention, OutlierChannelCalibrator
from .label_cache import (
    KvCacheHead,
    LabelCacheHead,
    append_token,
    build_label_cache,
    quantize_row_4bit,
)
from .model import ModelConfig, ToyModel, decode_step, init_weights, layer_cosine_similarity, prefill
from .offload import OffloadState, offload_decode_step
from .sweep import SweepResult, run_sparsity_sweep
from .tensor import Int4Array, load_tensors, make_rng, randn, save_tensors
from .traffic import TrafficLedger, charge_ds_decode, charge_full_attention, label_ablation_report

__version__ = "0.1.0"
