"""Speech bandwidth extension (8 kHz to 24 kHz) with a mel-conditioned WaveNet."""

from .audio_io import AudioBuffer, read_wav, write_wav
from .dsp import DegradationMode, DegradationSpec, MelConfig, MelSpectrogram, degrade, log_mel, resample
from .wavenet import WaveNet, WaveNetConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "DegradationMode",
    "DegradationSpec",
    "MelConfig",
    "MelSpectrogram",
    "WaveNet",
    "WaveNetConfig",
    "degrade",
    "load_checkpoint",
    "log_mel",
    "read_wav",
    "resample",
    "save_checkpoint",
    "write_wav",
]
