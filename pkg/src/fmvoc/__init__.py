"""Flow Matching vocoder toolkit.

Stage 1 trains a multi-resolution STFT generator with a Flow Matching
objective; stage 2 unrolls it into a 1-, 2- or 4-step generator and fine-tunes
it adversarially.
"""

from .backbone import Generator, ModelConfig, param_count
from .dsp import ConfigError, InputError, SpectralConfig, istft, make_filterbank, stft
from .flow import LossKind, LossMode, euler_sample_endpoint, euler_sample_velocity, fm_loss, uniform_schedule
from .gan import DiscriminatorBank, NStepGenerator
from .train import TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DiscriminatorBank",
    "Generator",
    "InputError",
    "LossKind",
    "LossMode",
    "ModelConfig",
    "NStepGenerator",
    "SpectralConfig",
    "TrainConfig",
    "euler_sample_endpoint",
    "euler_sample_velocity",
    "fm_loss",
    "istft",
    "load_checkpoint",
    "make_filterbank",
    "param_count",
    "save_checkpoint",
    "stft",
    "uniform_schedule",
]
