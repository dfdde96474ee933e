"""Inference: text-to-mel, zero-shot voice conversion and waveform rendering."""

from __future__ import annotations

import json
import logging
import shutil
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import (SPEAKER_ENCODER_MEL, TTS_MEL, MelConfig, MelSpectrogram, Waveform,
                    mel_filterbank, read_wav, save_mel, stft, istft)
from .data import audio_features
from .model import SCGlowTTS
from .speaker import SpeakerEmbedding, SpeakerEncoder
from .text import Phonemizer, SymbolVocabulary, TextError, encode_symbols, intersperse_blank

logger = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    pass


class VocoderError(RuntimeError):
    pass


class VocoderConfigError(VocoderError):
    pass


@dataclass
class SynthesisRequest:
    text: str
    reference_audio: str | None = None
    embedding: SpeakerEmbedding | None = None
    noise_scale: float = 0.333
    length_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_scale < 0:
            raise SynthesisError("noise_scale must be >= 0")
        if self.length_scale <= 0:
            raise SynthesisError("length_scale must be > 0")
        if self.reference_audio is None and self.embedding is None:
            raise SynthesisError("need reference_audio or a precomputed embedding")


def _as_tensor(spk, dtype) -> torch.Tensor:
    v = spk.vector if isinstance(spk, SpeakerEmbedding) else np.asarray(spk)
    return torch.as_tensor(v, dtype=dtype).reshape(1, -1)


def synthesize_ids(model: SCGlowTTS, ids, spk, noise_scale=0.333, length_scale=1.0,
                   seed: int = 0, mel_cfg: MelConfig = TTS_MEL, durations=None) -> MelSpectrogram:
    dtype = next(model.parameters()).dtype
    model.eval()
    ids_t = torch.as_tensor(np.asarray(ids), dtype=torch.long).reshape(1, -1)
    gen = torch.Generator().manual_seed(seed)
    if durations is not None:
        durations = torch.as_tensor(np.asarray(durations), dtype=torch.long).reshape(1, -1)
    mel, mask, _ = model.infer(ids_t, _as_tensor(spk, dtype), noise_scale=noise_scale,
                               length_scale=length_scale, generator=gen, durations=durations)
    n = int(mask.sum())
    return MelSpectrogram(mel[0, :, :n].T.float().numpy(), mel_cfg)


def synthesize_mel(req: SynthesisRequest, model: SCGlowTTS, vocab: SymbolVocabulary,
                   phonemizer: Phonemizer | None = None, speaker_encoder: SpeakerEncoder | None = None,
                   mel_cfg: MelConfig = TTS_MEL) -> MelSpectrogram:
    """Phonemize, intersperse blanks, predict durations and invert the flow."""
    phonemizer = phonemizer or Phonemizer()
    phonemes = phonemizer(req.text)
    if not phonemes:
        raise TextError(f"phonemization of {req.text!r} is empty")
    seq = intersperse_blank(encode_symbols(phonemes, vocab), vocab)
    spk = req.embedding
    if spk is None:
        if speaker_encoder is None:
            raise SynthesisError("reference audio given but no speaker encoder loaded")
        spk = reference_embedding(req.reference_audio, speaker_encoder)
    return synthesize_ids(model, seq.ids, spk, req.noise_scale, req.length_scale, req.seed, mel_cfg)


def reference_embedding(path, speaker_encoder: SpeakerEncoder) -> SpeakerEmbedding:
    """Embed one reference utterance through the speaker-encoder mel preset."""
    mel = audio_features(path, SPEAKER_ENCODER_MEL)
    return speaker_encoder.embed_utterance(mel, source_id=str(path))


def voice_convert(mel_src: MelSpectrogram, spk_src, spk_tgt, model: SCGlowTTS,
                  latent_noise: float = 0.0, seed: int = 0) -> MelSpectrogram:
    """Re-render ``mel_src`` with the target speaker: forward with source, inverse with target.

    ``latent_noise`` optionally perturbs the latent before inversion.
    """
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(mel_src.values.T, dtype=dtype).unsqueeze(0)
        state = model.decoder(x, None, _as_tensor(spk_src, dtype))
        z = state.z
        if latent_noise > 0:
            gen = torch.Generator().manual_seed(seed)
            z = z + latent_noise * torch.randn(z.shape, generator=gen, dtype=dtype)
        out = model.decoder.inverse(z, state.mask, _as_tensor(spk_tgt, dtype))
    return MelSpectrogram(out[0].T.float().numpy(), mel_src.config, truncated=state.truncated)


def mel_to_linear(mel: MelSpectrogram) -> np.ndarray:
    """Approximate STFT magnitude via the filterbank pseudo-inverse, clamped at 0."""
    fb = mel_filterbank(mel.config)
    mel_energy = np.exp(mel.values.astype(np.float64))
    return np.maximum(mel_energy @ np.linalg.pinv(fb.T), 0.0)


def griffin_lim(mel: MelSpectrogram, iterations: int = 60, cfg: MelConfig | None = None,
                seed: int = 0) -> Waveform:
    """Iterative phase reconstruction. Output has ``frames * hop_length`` samples."""
    if iterations < 1:
        raise VocoderError("griffin_lim needs at least one iteration")
    cfg = cfg or mel.config
    mag = mel_to_linear(MelSpectrogram(mel.values, cfg))
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    n_frames = mag.shape[0]
    inner_len = cfg.hop_length * (n_frames - 1)
    if inner_len <= cfg.n_fft // 2:
        raise VocoderError(f"mel too short for Griffin-Lim ({n_frames} frames)")
    for _ in range(iterations):
        x = istft(mag * angles, cfg.hop_length, cfg.win_length, inner_len)
        spec = stft(x, cfg.n_fft, cfg.hop_length, cfg.win_length)
        angles = np.exp(1j * np.angle(spec))
    x = istft(mag * angles, cfg.hop_length, cfg.win_length, n_frames * cfg.hop_length)
    return Waveform(np.clip(x, -1.0, 1.0).astype(np.float32), cfg.sample_rate)


class GriffinLimVocoder:
    name = "griffin_lim"

    def __init__(self, iterations: int = 60, seed: int = 0):
        self.iterations = iterations
        self.seed = seed

    def __call__(self, mel: MelSpectrogram) -> Waveform:
        return griffin_lim(mel, self.iterations, seed=self.seed)


class ExternalVocoder:
    """File-based adapter to a vocoder living in another process.

    The command is invoked as ``command <mel.bin> <out.wav>``; the mel binary
    has a ``.json`` sidecar. The adapter prints the path of the WAV it wrote
    on its last stdout line (``out.wav`` is assumed if it prints nothing).
    """

    name = "external"

    def __init__(self, command, timeout: float = 60.0, workdir=None):
        import shlex

        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command or shutil.which(self.command[0]) is None:
            raise VocoderConfigError(f"external vocoder not found: {self.command[:1]}")
        self.timeout = timeout
        self.workdir = Path(workdir) if workdir else None
        self._lock = threading.Lock()
        self._counter = 0

    def __call__(self, mel: MelSpectrogram) -> Waveform:
        with self._lock:
            self._counter += 1
            tmp = Path(tempfile.mkdtemp(prefix="vocode_", dir=self.workdir))
            mel_path = save_mel(tmp / f"request_{self._counter:05d}.mel", mel)
            out_wav = tmp / f"response_{self._counter:05d}.wav"
            try:
                proc = subprocess.run(self.command + [str(mel_path), str(out_wav)],
                                      capture_output=True, text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as exc:
                raise VocoderError(f"external vocoder timed out after {self.timeout}s") from exc
            if proc.returncode != 0:
                raise VocoderError(
                    f"external vocoder exited with {proc.returncode}: {proc.stderr.strip()[-2000:]}"
                )
            lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
            wav_path = Path(lines[-1].strip()) if lines else out_wav
            if not wav_path.exists():
                raise VocoderError(f"external vocoder reported missing file {wav_path}")
            return read_wav(wav_path)


def make_vocoder(kind: str = "griffin_lim", **kwargs):
    if kind == "griffin_lim":
        return GriffinLimVocoder(**kwargs)
    if kind == "external":
        return ExternalVocoder(**kwargs)
    raise VocoderConfigError(f"unknown vocoder {kind!r}")


def vocode(mel: MelSpectrogram, vocoder=None) -> Waveform:
    return (vocoder or GriffinLimVocoder())(mel)


class Synthesizer:
    """Bundles a loaded model with its frontend, speaker encoder and vocoder."""

    def __init__(self, model: SCGlowTTS, vocab: SymbolVocabulary, phonemizer=None,
                 speaker_encoder: SpeakerEncoder | None = None, vocoder=None,
                 mel_cfg: MelConfig = TTS_MEL):
        self.model = model.eval()
        self.vocab = vocab
        self.phonemizer = phonemizer or Phonemizer()
        self.speaker_encoder = speaker_encoder
        self.vocoder = vocoder or GriffinLimVocoder()
        self.mel_cfg = mel_cfg

    def embedding(self, reference_audio) -> SpeakerEmbedding:
        if self.speaker_encoder is None:
            raise SynthesisError("no speaker encoder loaded")
        return reference_embedding(reference_audio, self.speaker_encoder)

    def mel(self, req: SynthesisRequest) -> MelSpectrogram:
        return synthesize_mel(req, self.model, self.vocab, self.phonemizer, self.speaker_encoder, self.mel_cfg)

    def __call__(self, req: SynthesisRequest) -> Waveform:
        return self.vocoder(self.mel(req))


def write_request_sidecar(path, mel: MelSpectrogram) -> dict:
    save_mel(path, mel)
    return json.loads(Path(path).with_suffix(".json").read_text())
