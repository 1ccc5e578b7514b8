"""Dilated fully convolutional segmentation network."""

from .engine import AllocationLedger, activation_bound_bytes, forward, forward_reference
from .ops import (
    argmax_mask,
    batchnorm_stats,
    conv_input_grad,
    conv_weight_grad,
    dilated_conv3d,
    layernorm_pf,
    relu,
)
from .spec import (
    DECREASING,
    INCREASING,
    MINDGRAB,
    ConvLayerSpec,
    DilationSchedule,
    NetworkSpec,
    build_network,
    count_params,
    preset,
    preset_names,
)
from .weights import (
    LayerWeights,
    WeightStore,
    init_weights,
    load_weights,
    read_model,
    save_weights,
    write_model,
)

__all__ = [
    "AllocationLedger", "activation_bound_bytes", "forward", "forward_reference",
    "argmax_mask", "batchnorm_stats", "conv_input_grad", "conv_weight_grad", "dilated_conv3d",
    "layernorm_pf", "relu",
    "DECREASING", "INCREASING", "MINDGRAB", "ConvLayerSpec", "DilationSchedule", "NetworkSpec",
    "build_network", "count_params", "preset", "preset_names",
    "LayerWeights", "WeightStore", "init_weights", "load_weights", "read_model", "save_weights",
    "write_model",
]
