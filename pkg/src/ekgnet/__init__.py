"""EKGNet: a tiny ECG beat classifier, its data pipeline, and an analog datapath model."""

__version__ = "0.1.0"

from .model import ModelParams, NoiseModel, forward, predict  # noqa: E402
from .quant import QuantizedModel, build_codebook, decode, finetune, quantize  # noqa: E402
from .analog import AnalogNetwork, MacConfig, analog_forward, characterize_mac  # noqa: E402

__all__ = [
    "ModelParams", "NoiseModel", "forward", "predict", "QuantizedModel", "build_codebook",
    "decode", "finetune", "quantize", "AnalogNetwork", "MacConfig", "analog_forward",
    "characterize_mac",
]
