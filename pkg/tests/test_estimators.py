import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from flowspeak.audio import Waveform
from flowspeak.estimators import LogMelExtractor, SpeakerEmbedder


def test_log_mel_extractor_resamples_and_is_clonable():
    ext = LogMelExtractor(sample_rate=16000, n_mels=40)
    waves = [Waveform(np.random.default_rng(0).normal(0, 0.1, 22050), 22050)]
    out = ext.fit_transform(waves)
    assert out[0].shape == (1 + 16000 // 256, 40)
    c = clone(ext)
    assert c.get_params() == ext.get_params()


def test_speaker_embedder_fit_transform():
    rng = np.random.default_rng(0)
    X = [rng.normal(k, 1.0, size=(20, 6)).astype(np.float32) for k in range(3) for _ in range(4)]
    y = [f"s{k}" for k in range(3) for _ in range(4)]
    est = SpeakerEmbedder(hidden=8, n_layers=1, embed_dim=5, n_mels=6, speakers_per_batch=3,
                          utterances_per_speaker=3, crop_frames=10, lr=1e-3, max_steps=3, min_frames=4)
    with pytest.raises(NotFittedError):
        est.transform(X)
    emb = est.fit(X, y).transform(X)
    assert emb.shape == (12, 5)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0)
    assert list(est.classes_) == ["s0", "s1", "s2"] and len(est.loss_history_) == 3
    with pytest.raises(ValueError):
        est.fit(X, y[:-1])
