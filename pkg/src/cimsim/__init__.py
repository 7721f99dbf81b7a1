"""Bit-scalable compute-in-memory convolution simulator.

Quantized DNN convolution on fixed-size crossbar arrays with learnable
scale factors at layer, array, or column granularity for both weights and
partial sums, an exact integer reference path, dequantization cost
accounting, log-normal device-variation injection, and a desk-scale
quantization-aware-training loop.
"""

from .bitsplit import SplitPlanes, recombine, shift_add, split
from .cim_conv import (
    CimLayerConfig,
    CimTrace,
    calibrate_layer,
    dequantize_fused,
    forward,
    layerwise_weight_path,
    quantize_psums,
    reference_forward,
)
from .cost_model import OverheadReport, dequant_mults, report, scale_storage
from .data import Dataset, load_cifar10_binary, synthetic_blobs
from .quantizer import (
    Granularity,
    QuantSpec,
    ScaleTensor,
    calibrate_scales,
    dequantize,
    init_scales,
    input_grad_ste,
    quantize,
    scale_grad,
)
from .tiler import ArrayShape, TilingPlan, column_index, im2col_reference, map_weights, plan_tiling
from .trainer import TrainSchedule, ToyModel, evaluate, forward_backward, train
from .variation import VariationLevel, VariationSpec, apply_variation, sample_theta, variation_sweep

__version__ = "0.1.0"
