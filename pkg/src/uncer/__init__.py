"""Uncertainty estimation and reduction for multichannel EEG decoders."""

from .adf import InputNoise, MomentTensor, adf_forward, lift
from .decoder import DecoderConfig, DecoderModel, build_decoder, forward, train
from .estimator import UncerClassifier
from .rng import RngStream
from .uncertainty import UncertaintyConfig, UncertaintyReport, decompose, estimate, mc_dropout_sample

__version__ = "0.1.0"

__all__ = [
    "DecoderConfig", "DecoderModel", "InputNoise", "MomentTensor", "RngStream", "UncerClassifier",
    "UncertaintyConfig", "UncertaintyReport", "adf_forward", "build_decoder", "decompose", "estimate", "forward",
    "lift", "mc_dropout_sample", "train",
]
