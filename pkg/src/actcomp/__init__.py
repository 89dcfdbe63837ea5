"""Error-bounded lossy compression of CNN activations with adaptive
error-bound control, plus the desk-scale training engine that validates the
compression-error-to-gradient propagation model end to end."""

from .codec import (
    CodecParams,
    CompressedActivation,
    CompressionReport,
    compress,
    decompress,
)
from .controller import (
    AdaptiveController,
    CompressionPlan,
    ControllerConfig,
    LayerTrainingStats,
    assess_gradient_tolerance,
    choose_batch_size,
    collect_layer_stats,
    plan_compression,
    update_interval,
)
from .errorprop import (
    DistributionDiagnostics,
    GradientErrorModel,
    calibrate_a,
    estimate_eb,
    inject_uniform_error,
    measure_gradient_error,
    predict_sigma,
)
from .tensor import (
    ErrorReport,
    Tensor,
    TensorStats,
    compare,
    compute_stats,
    make_tensor,
    read_tensor,
    write_tensor,
)
from .training import TrainResult, TrainSettings, TrainingRecord, train

__version__ = "0.1.0"

__all__ = [
    "AdaptiveController",
    "CodecParams",
    "CompressedActivation",
    "CompressionPlan",
    "CompressionReport",
    "ControllerConfig",
    "DistributionDiagnostics",
    "ErrorReport",
    "GradientErrorModel",
    "LayerTrainingStats",
    "Tensor",
    "TensorStats",
    "TrainResult",
    "TrainSettings",
    "TrainingRecord",
    "assess_gradient_tolerance",
    "calibrate_a",
    "choose_batch_size",
    "collect_layer_stats",
    "compare",
    "compress",
    "compute_stats",
    "decompress",
    "estimate_eb",
    "inject_uniform_error",
    "make_tensor",
    "measure_gradient_error",
    "plan_compression",
    "predict_sigma",
    "read_tensor",
    "train",
    "update_interval",
    "write_tensor",
]
