"""Deterministic synthetic corpora for smoke tests and desk-scale runs.

Two generators:

* tone-pattern utterances, where each text symbol is rendered as a harmonic
  tone of a fixed pitch, so text and audio are trivially alignable;
* multi-speaker vowel-like utterances whose spectral envelope (formants)
  identifies the speaker, with per-utterance pitch and level jitter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, write_wav

TONE_ALPHABET = "abcdefgh"


@dataclass(frozen=True)
class Timbre:
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    f0_scale: float = 1.0

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        env = np.full_like(freqs, 0.02, dtype=np.float64)
        for f, bw in zip(self.formants, self.bandwidths):
            env += np.exp(-0.5 * ((freqs - f) / bw) ** 2)
        return env


NEUTRAL = Timbre((500.0, 1500.0, 2500.0), (150.0, 200.0, 250.0))


def random_timbre(rng: np.random.Generator) -> Timbre:
    f1 = rng.uniform(300, 900)
    f2 = rng.uniform(1000, 2200)
    f3 = rng.uniform(2300, 3600)
    bws = tuple(rng.uniform(80, 250, size=3))
    return Timbre((f1, f2, f3), bws, float(rng.uniform(0.7, 1.4)))


def harmonic_tone(f0: float, n_samples: int, sr: int, timbre: Timbre, amp: float = 0.3,
                  phase_rng: np.random.Generator | None = None) -> np.ndarray:
    t = np.arange(n_samples) / sr
    n_harm = max(1, int((sr / 2 - 100) // f0))
    harmonics = f0 * np.arange(1, n_harm + 1)
    weights = timbre.envelope(harmonics)
    phases = phase_rng.uniform(0, 2 * np.pi, n_harm) if phase_rng is not None else np.zeros(n_harm)
    x = (weights[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t[None, :] + phases[:, None])).sum(0)
    x *= amp / max(np.abs(x).max(), 1e-9)
    # short raised-cosine ramps avoid clicks at segment edges
    ramp = min(n_samples // 8, int(0.005 * sr))
    if ramp > 0:
        win = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        x[:ramp] *= win
        x[-ramp:] *= win[::-1]
    return x


def symbol_pitch(symbol: str) -> float:
    k = TONE_ALPHABET.index(symbol)
    return 150.0 * 2 ** (k / 4)


def tone_pattern(text: str, sr: int = 22050, seconds_per_symbol: float = 0.1,
                 timbre: Timbre = NEUTRAL) -> Waveform:
    """Render ``text`` (letters from ``TONE_ALPHABET``) as consecutive tones."""
    n = int(round(seconds_per_symbol * sr))
    parts = [harmonic_tone(symbol_pitch(ch) * timbre.f0_scale, n, sr, timbre) for ch in text]
    return Waveform(np.concatenate(parts).astype(np.float32), sr)


TOY_TEXTS = ("abcd", "dcba", "aceg", "hgfe", "bdfh")


def toy_tts_corpus(texts=TOY_TEXTS, n_speakers: int = 1, sr: int = 22050,
                   seconds_per_symbol: float = 0.1, seed: int = 0) -> list[dict]:
    """Tone-pattern utterances; speaker ``k`` gets its own timbre."""
    rng = np.random.default_rng(seed)
    timbres = [NEUTRAL] + [random_timbre(rng) for _ in range(n_speakers - 1)]
    items = []
    for k, timbre in enumerate(timbres):
        for i, text in enumerate(texts):
            items.append({
                "utt_id": f"spk{k}_{i:03d}",
                "speaker_id": f"spk{k}",
                "text": text,
                "waveform": tone_pattern(text, sr, seconds_per_symbol, timbre),
            })
    return items


def speaker_corpus(n_speakers: int = 8, n_utterances: int = 12, seconds: float = 1.2,
                   sr: int = 16000, seed: int = 0) -> dict[str, list[Waveform]]:
    """Vowel-like utterances; the formant envelope is fixed per speaker.

    Each utterance is a few syllables with jittered pitch, level and a little
    noise, so only the envelope is a reliable speaker cue.
    """
    rng = np.random.default_rng(seed)
    corpus = {}
    for s in range(n_speakers):
        timbre = random_timbre(rng)
        utts = []
        for _ in range(n_utterances):
            n_syll = int(rng.integers(3, 6))
            lengths = rng.dirichlet(np.ones(n_syll)) * seconds * sr
            lengths = np.maximum(lengths.astype(int), int(0.08 * sr))
            parts = []
            for n in lengths:
                f0 = 120.0 * timbre.f0_scale * rng.uniform(0.85, 1.15)
                parts.append(harmonic_tone(f0, int(n), sr, timbre, amp=rng.uniform(0.2, 0.5),
                                           phase_rng=rng))
            x = np.concatenate(parts)
            x += rng.normal(0, 0.003, len(x))
            utts.append(Waveform(np.clip(x, -1, 1).astype(np.float32), sr))
        corpus[f"spk{s}"] = utts
    return corpus


def write_dataset(root, items, val_every: int = 0) -> Path:
    """Write WAVs and a JSON-lines manifest; returns the manifest path.

    Every ``val_every``-th item goes to the validation split.
    """
    root = Path(root)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with manifest.open("w") as f:
        for i, item in enumerate(items):
            wav = root / "wavs" / f"{item['utt_id']}.wav"
            write_wav(wav, item["waveform"])
            split = "val" if val_every and (i + 1) % val_every == 0 else "train"
            f.write(json.dumps({
                "audio_path": str(wav.relative_to(root)),
                "text": item["text"],
                "speaker_id": item["speaker_id"],
                "split": item.get("split", split),
            }) + "\n")
    return manifest
