"""scikit-learn style wrappers for the stateless frontend and the speaker encoder.

The TTS model itself does not fit the estimator shape (sequence-to-sequence,
multi-output, checkpointed training); use :mod:`flowspeak.train` for it.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .audio import MelConfig, Waveform, mel_spectrogram, resample
from .speaker import SpeakerTrainConfig, SpeakerTrainer


class LogMelExtractor(TransformerMixin, BaseEstimator):
    """Waveforms in, list of ``(T, n_mels)`` log-mel arrays out. Stateless."""

    def __init__(self, sample_rate=22050, n_fft=1024, win_length=1024, hop_length=256,
                 n_mels=80, fmin=0.0, fmax=None):
        self.sample_rate = sample_rate
        self.n_fft = n_fft
        self.win_length = win_length
        self.hop_length = hop_length
        self.n_mels = n_mels
        self.fmin = fmin
        self.fmax = fmax

    def mel_config(self) -> MelConfig:
        return MelConfig(self.sample_rate, self.n_fft, self.win_length, self.hop_length,
                         self.n_mels, self.fmin, self.fmax)

    def fit(self, X, y=None):
        self.mel_config_ = self.mel_config()
        return self

    def transform(self, X: Sequence[Waveform]) -> list[np.ndarray]:
        cfg = self.mel_config()
        return [mel_spectrogram(resample(w, cfg.sample_rate), cfg).values for w in X]


class SpeakerEmbedder(TransformerMixin, BaseEstimator):
    """Fits the speaker encoder on labelled mels; transforms mels to unit vectors."""

    def __init__(self, hidden=768, n_layers=3, embed_dim=256, n_mels=80, speakers_per_batch=64,
                 utterances_per_speaker=10, crop_frames=160, lr=1e-4, max_steps=1000,
                 min_frames=40, seed=0):
        self.hidden = hidden
        self.n_layers = n_layers
        self.embed_dim = embed_dim
        self.n_mels = n_mels
        self.speakers_per_batch = speakers_per_batch
        self.utterances_per_speaker = utterances_per_speaker
        self.crop_frames = crop_frames
        self.lr = lr
        self.max_steps = max_steps
        self.min_frames = min_frames
        self.seed = seed

    def fit(self, X: Sequence[np.ndarray], y: Sequence[str]):
        if len(X) != len(y):
            raise ValueError(f"{len(X)} mels but {len(y)} labels")
        corpus: dict[str, list[np.ndarray]] = {}
        for mel, label in zip(X, y):
            corpus.setdefault(str(label), []).append(np.asarray(mel))
        cfg = SpeakerTrainConfig(
            speakers_per_batch=self.speakers_per_batch,
            utterances_per_speaker=self.utterances_per_speaker,
            crop_frames=self.crop_frames, lr=self.lr, max_steps=self.max_steps, seed=self.seed,
            hidden=self.hidden, n_layers=self.n_layers, embed_dim=self.embed_dim,
            n_mels=self.n_mels, min_frames=self.min_frames,
        )
        trainer = SpeakerTrainer(corpus, cfg).fit()
        self.encoder_ = trainer.encoder.eval()
        self.classes_ = np.asarray(trainer.speakers)
        self.loss_history_ = list(trainer.history)
        return self

    def transform(self, X: Sequence[np.ndarray]) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        return np.stack([self.encoder_.embed_utterance(np.asarray(m)).vector for m in X])
