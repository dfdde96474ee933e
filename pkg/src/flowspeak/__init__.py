"""Zero-shot multi-speaker text-to-speech with a speaker-conditional flow decoder."""

from .audio import (SPEAKER_ENCODER_MEL, TTS_MEL, MelConfig, MelSpectrogram, Waveform,
                    mel_spectrogram, read_wav, resample, trim_silence, write_wav)
from .config import ExperimentConfig, load_config
from .mas import Alignment, mas
from .model import ModelConfig, SCGlowTTS, tts_loss
from .speaker import SpeakerEmbedding, SpeakerEncoder, secs
from .synthesis import Synthesizer, SynthesisRequest, griffin_lim, voice_convert
from .text import Phonemizer, SymbolVocabulary
from .train import TrainConfig, TTSTrainer, export_gta

__version__ = "0.1.0"

__all__ = [
    "SPEAKER_ENCODER_MEL", "TTS_MEL", "MelConfig", "MelSpectrogram", "Waveform",
    "mel_spectrogram", "read_wav", "resample", "trim_silence", "write_wav",
    "ExperimentConfig", "load_config", "Alignment", "mas", "ModelConfig", "SCGlowTTS",
    "tts_loss", "SpeakerEmbedding", "SpeakerEncoder", "secs", "Synthesizer",
    "SynthesisRequest", "griffin_lim", "voice_convert", "Phonemizer", "SymbolVocabulary",
    "TrainConfig", "TTSTrainer", "export_gta",
]
