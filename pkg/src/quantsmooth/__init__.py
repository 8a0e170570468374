"""Low-bit post-training quantization with Hadamard rotation and channel smoothing,
calibrated on a toy multi-frame transformer."""
from .calibrate import CalibConfig, calibrate_blockwise
from .config import TOOL_VERSION as __version__, RunConfig
from .model import (
    ToyModelConfig,
    build_model,
    forward,
    gen_pool,
    gen_scene,
    model_quant_loss,
    quantize_model,
)
from .qlinear import QuantScheme, build_quant_linear, forward_quantized, forward_simulated
from .quantizer import Granularity, Mode, QuantSpec, dequantize, quantize, quantize_tensor
from .rotation import apply_rotation, hadamard_matrix, random_rotation
from .sampling import noise_scores, select_nfds, select_random
from .smoothing import SmoothScale, compute_smooth_scale
from .tensor import make_rng

__all__ = [
    "CalibConfig", "calibrate_blockwise", "RunConfig",
    "ToyModelConfig", "build_model", "forward", "gen_pool", "gen_scene", "model_quant_loss", "quantize_model",
    "QuantScheme", "build_quant_linear", "forward_quantized", "forward_simulated",
    "Granularity", "Mode", "QuantSpec", "dequantize", "quantize", "quantize_tensor",
    "apply_rotation", "hadamard_matrix", "random_rotation",
    "noise_scores", "select_nfds", "select_random",
    "SmoothScale", "compute_smooth_scale", "make_rng",
]
