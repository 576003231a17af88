"""Integer-only vision-transformer segmentation with post-training calibration."""

from .calib import CalibrationPlan, calibrate, convert_weights, freeze
from .container import load_checkpoint, save_checkpoint
from .intkernels import GeluConfig, ShiftmaxConfig
from .model import TOY_CONFIGS, Checkpoint, ModelConfig, TraceMeters, forward, quantize_image, traffic_report
from .qcore import DyadicScale, QuantizedTensor, dequantize, quantize, to_dyadic
from .reference import Variant, fp32_forward

__version__ = "0.1.0"
