"""Speech-to-singing conversion: log-mel features, a melody-conditioned
encoder/decoder generator trained with a BEGAN discriminator, and
Griffin-Lim resynthesis."""

from .dsp import DSPConfig, LogMelSpectrogram, Waveform, griffin_lim, log_mel, mel_invert
from .melody import F0Track, MelodyContour, contour_from_f0, estimate_f0
from .net import Discriminator, Generator, ModelConfig, build_models
from .train import TrainConfig, Trainer, train_loop

__version__ = "0.1.0"

__all__ = [
    "DSPConfig", "LogMelSpectrogram", "Waveform", "griffin_lim", "log_mel", "mel_invert",
    "F0Track", "MelodyContour", "contour_from_f0", "estimate_f0",
    "Discriminator", "Generator", "ModelConfig", "build_models",
    "TrainConfig", "Trainer", "train_loop",
]
