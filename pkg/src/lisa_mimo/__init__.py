"""MIMO detection lab: learned iterative search (LISA) and classical baselines."""

from .channel import ChannelConfig, ChannelSample, generate_batch, generate_sample, make_rng, sample_batch
from .classic import mld_detect, mmse_detect, sphere_detect, zf_detect, zfdf_detect
from .linalg import QLFactors, complex_to_real, ql_decompose, residual_metric, rotate_observation
from .lisa import LisaModel, TrainConfig, detect, init_model, lisa_forward, lisa_parameter_count, train
from .modem import Constellation, bit_error_rate, make_constellation, slice_to_alphabet

__version__ = "0.1.0"

__all__ = [
    "ChannelConfig", "ChannelSample", "Constellation", "LisaModel", "QLFactors", "TrainConfig",
    "bit_error_rate", "complex_to_real", "detect", "generate_batch", "generate_sample",
    "init_model", "lisa_forward", "lisa_parameter_count", "make_constellation", "make_rng",
    "mld_detect", "mmse_detect", "ql_decompose", "residual_metric", "rotate_observation",
    "sample_batch", "slice_to_alphabet", "sphere_detect", "train", "zf_detect", "zfdf_detect",
]
