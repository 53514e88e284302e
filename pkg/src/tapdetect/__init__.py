"""Attention-pooled detection heads over frozen vision-encoder token features.

The package trains and evaluates a small tunable-attention-pooling head (and a
cls-only linear baseline) on token features exported to the TFRB binary
format, entirely on CPU with exact, finite-difference-audited gradients.
"""

__version__ = "0.1.0"

from .featurestore import (
    Batch,
    FeatureDataset,
    TokenFeatureRecord,
    batch_iter,
    make_record,
    read_feature_file,
    write_feature_file,
)
from .optim import AdamWHyper, OptimizerState, adamw_step, init_state, lr_at
from .synth import SynthConfig, generate_planted_dataset, oracle_score
from .tap import (
    LinearProbeConfig,
    LinearProbeParams,
    TapConfig,
    TapParams,
    attention_pool,
    init_linear_probe,
    init_params,
    load_checkpoint,
    residual_mlp,
    save_checkpoint,
    tap_backward,
    tap_forward,
)
from .train import (
    MetricsReport,
    TrainConfig,
    bce_with_logit,
    compare_cls_only,
    evaluate,
    train,
)

__all__ = [
    "__version__",
    "AdamWHyper", "Batch", "FeatureDataset", "LinearProbeConfig",
    "LinearProbeParams", "MetricsReport", "OptimizerState", "SynthConfig",
    "TapConfig", "TapParams", "TokenFeatureRecord", "TrainConfig",
    "adamw_step", "attention_pool", "batch_iter", "bce_with_logit",
    "compare_cls_only", "evaluate", "generate_planted_dataset",
    "init_linear_probe", "init_params", "init_state", "load_checkpoint",
    "lr_at", "make_record", "oracle_score", "read_feature_file",
    "residual_mlp", "save_checkpoint", "tap_backward", "tap_forward",
    "train", "write_feature_file",
]
