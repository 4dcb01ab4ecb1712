"""Latent-constrained transformer for masked PPG-to-ABP waveform conversion."""

from .model import LSCT, ModelConfig, load_checkpoint, save_checkpoint
from .signal import SignalSegment, StftConfig, Spectrogram, istft, stft, synth_pair
from .train import TrainConfig, fit

__all__ = ["LSCT", "ModelConfig", "TrainConfig", "SignalSegment", "StftConfig", "Spectrogram",
           "fit", "istft", "stft", "synth_pair", "load_checkpoint", "save_checkpoint"]

__version__ = "0.1.0"
