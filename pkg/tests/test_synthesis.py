import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from flowspeak.audio import TTS_MEL, MelConfig, MelSpectrogram, Waveform, load_mel, mel_spectrogram
from flowspeak.speaker import SpeakerEmbedding
from flowspeak.synthesis import (ExternalVocoder, GriffinLimVocoder, Synthesizer, SynthesisError,
                                 SynthesisRequest, VocoderConfigError, VocoderError, griffin_lim,
                                 make_vocoder, synthesize_ids, voice_convert, write_request_sidecar)
from flowspeak.text import Phonemizer
from conftest import tiny_model, tiny_vocab

STUB = [sys.executable, str(Path(__file__).parent / "data" / "stub_vocoder.py")]
MEL8 = MelConfig(n_mels=8)

# log-mel L1 after 60 Griffin-Lim iterations on 220/440/1000 Hz sines measured <= 0.31;
# two different sines differ by about 1.96, so 0.4 separates reconstruction from mismatch
GRIFFIN_LIM_L1 = 0.4


def sine(freq, seconds=1.0, sr=22050):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(0.3 * np.sin(2 * np.pi * freq * t), sr)


@pytest.mark.parametrize("freq", [220.0, 440.0, 1000.0])
def test_griffin_lim_reconstructs_sines(freq):
    mel = mel_spectrogram(sine(freq), TTS_MEL)
    wav = griffin_lim(mel, 60)
    assert len(wav) == mel.frames * TTS_MEL.hop_length
    again = mel_spectrogram(wav, TTS_MEL)
    n = min(mel.frames, again.frames)
    assert np.abs(mel.values[:n] - again.values[:n]).mean() < GRIFFIN_LIM_L1


def test_griffin_lim_is_seeded_and_validates():
    mel = mel_spectrogram(sine(440.0, 0.3), TTS_MEL)
    assert np.array_equal(GriffinLimVocoder(5, seed=1)(mel).samples, GriffinLimVocoder(5, seed=1)(mel).samples)
    with pytest.raises(VocoderError):
        griffin_lim(mel, 0)
    with pytest.raises(VocoderError):
        griffin_lim(MelSpectrogram(mel.values[:2], TTS_MEL), 5)


def test_external_vocoder_round_trip(tmp_path):
    voc = ExternalVocoder(STUB, workdir=tmp_path)
    mel = MelSpectrogram(np.zeros((10, 80), np.float32), TTS_MEL)
    wav = voc(mel)
    assert len(wav) == 10 * 256 and wav.sample_rate == 22050
    assert make_vocoder("external", command=STUB).name == "external"


def test_external_vocoder_failures(tmp_path):
    with pytest.raises(VocoderConfigError):
        ExternalVocoder(["/nonexistent/vocoder-bin"])
    with pytest.raises(VocoderConfigError):
        make_vocoder("wavenet")
    voc = ExternalVocoder(STUB + ["--"], workdir=tmp_path)
    voc.command = STUB + ["fail"]
    mel = MelSpectrogram(np.zeros((4, 80), np.float32), TTS_MEL)
    with pytest.raises(VocoderError, match="4"):
        voc(mel)


def test_mel_sidecar_round_trip(tmp_path):
    mel = MelSpectrogram(np.random.default_rng(0).normal(size=(7, 80)).astype(np.float32), TTS_MEL)
    meta = write_request_sidecar(tmp_path / "m.mel", mel)
    assert meta == {"frames": 7, "n_mels": 80, "sample_rate": 22050, "hop_length": 256}
    assert np.array_equal(load_mel(tmp_path / "m.mel").values, mel.values)


def test_request_validation():
    emb = SpeakerEmbedding.normalized([1.0, 0.0])
    with pytest.raises(SynthesisError):
        SynthesisRequest("hi")
    with pytest.raises(SynthesisError):
        SynthesisRequest("hi", embedding=emb, noise_scale=-1)
    with pytest.raises(SynthesisError):
        SynthesisRequest("hi", embedding=emb, length_scale=0)


def test_synthesize_ids_length_and_seed():
    model = tiny_model().eval()
    spk = SpeakerEmbedding.normalized([1.0, 2.0, 3.0, 4.0])
    ids = [1, 5, 1, 6, 1, 7, 1]
    d = [1, 2, 3, 1, 2, 2, 2]
    mel = synthesize_ids(model, ids, spk, seed=3, mel_cfg=MEL8, durations=d)
    assert mel.frames == 2 * (sum(d) // 2) == 12
    again = synthesize_ids(model, ids, spk, seed=3, mel_cfg=MEL8, durations=d)
    other = synthesize_ids(model, ids, spk, seed=4, mel_cfg=MEL8, durations=d)
    assert np.array_equal(mel.values, again.values)
    assert not np.array_equal(mel.values, other.values)
    odd = synthesize_ids(model, ids, spk, mel_cfg=MEL8, durations=[1, 1, 1, 1, 1, 1, 1])
    assert odd.frames == 6


def test_synthesizer_end_to_end_with_embedding():
    model = tiny_model().eval()
    synth = Synthesizer(model, tiny_vocab(), Phonemizer(), vocoder=lambda m: Waveform(np.zeros(m.frames * 256), 22050),
                        mel_cfg=MEL8)
    req = SynthesisRequest("abc", embedding=SpeakerEmbedding.normalized([1.0, 0.0, 0.0, 0.0]))
    mel = synth.mel(req)
    assert mel.frames % 2 == 0 and mel.values.shape[1] == 8
    assert len(synth(req)) == mel.frames * 256
    with pytest.raises(SynthesisError):
        synth.mel(SynthesisRequest("abc", reference_audio="x.wav"))


def test_voice_convert_same_speaker_is_identity():
    model = tiny_model().eval()
    model.decoder.randomize_coupling_outputs_(0.3, torch.Generator().manual_seed(0))
    mel = MelSpectrogram(np.random.default_rng(0).normal(size=(9, 8)).astype(np.float32), MEL8)
    spk = SpeakerEmbedding.normalized([1.0, 1.0, 0.0, 0.0])
    out = voice_convert(mel, spk, spk, model)
    assert out.truncated and out.frames == 8
    assert np.allclose(out.values, mel.values[:8], atol=1e-5)
    other = voice_convert(mel, spk, SpeakerEmbedding.normalized([0.0, 0.0, 1.0, 1.0]), model)
    assert not np.allclose(other.values, out.values)
