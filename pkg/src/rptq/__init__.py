"""Reorder-based post-training quantization toolkit.

Calibrates per-channel activation ranges, clusters channels by range
signature, fuses the resulting reorder into layer-norm placement and linear
weights, quantizes activations and weights per cluster, and models the
memory footprint of the quantized configurations.
"""

from .calibration import (ChannelStats, QKJointStats, collect_qk_stats,
                          collect_stats, merge_qk_stats, merge_stats)
from .config import BitConfig, parse_mode
from .errors import DegenerateDataError, ValidationError
from .fusion import (LayerNormOp, LayerWiring, LinearWeights, check_alignment,
                     fuse_linear, layernorm_forward, linear_forward)
from .memory import MemoryEstimate, ModelShape, estimate, load_shapes, sweep
from .qlinear import (ClusteredQuantLinear, forward_dequant, forward_integer,
                      quantize_activations, quantize_weights_gptq,
                      quantize_weights_rtn)
from .quant import QuantParams, dequantize, minmax_params, quantize
from .reorder import (ReorderPlan, build_reorder, identity_plan, kmeans,
                      kmeans_full, plan_reorder, plan_uniform_groups)
from .tensor import (IntTensor, Tensor, load_tensor, permute_last_axis,
                     save_tensor)
from .testkit import (ChannelProfile, brute_force_gptq, brute_force_partition,
                      gen_activations)
from .transformer import (ClusterCounts, DecoderLayerPlan, KVCache,
                          QuantizedModel, ToyDims, ToyModel, build_toy_model,
                          calibrate_model, fused_layer_forward, plan_layer,
                          quantize_model, reference_layer_forward,
                          reference_model_forward, run_layer, run_model)

__all__ = [name for name in dir() if not name.startswith("_")]
