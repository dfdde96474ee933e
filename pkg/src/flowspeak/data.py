"""Dataset manifests, feature extraction with an optional on-disk cache, batching."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .audio import (SPEAKER_ENCODER_MEL, TTS_MEL, MelConfig, Waveform, mel_spectrogram,
                    read_wav, resample, trim_silence)
from .model import TTSBatch
from .speaker import SpeakerEmbedding, SpeakerEncoder
from .text import Phonemizer, SymbolVocabulary, encode_symbols, intersperse_blank

logger = logging.getLogger(__name__)

CACHE_ENV = "FLOWSPEAK_CACHE"


class DataError(ValueError):
    pass


@dataclass
class Utterance:
    utt_id: str
    ids: np.ndarray  # symbol ids, blanks included
    mel: np.ndarray  # (T, n_mels)
    spk: np.ndarray  # (spk_dim,)
    audio_path: str = ""
    speaker_id: str = ""
    split: str = "train"
    text: str = ""


def read_manifest(path) -> list[dict]:
    """JSON-lines records ``{audio_path, text, speaker_id, split}``.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    records = []
    with path.open() as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = {"audio_path", "text", "speaker_id", "split"} - rec.keys()
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            audio = Path(rec["audio_path"])
            if not audio.is_absolute():
                audio = path.parent / audio
            rec["audio_path"] = str(audio)
            rec.setdefault("utt_id", audio.stem)
            records.append(rec)
    return records


def _cache_dir() -> Path | None:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else None


def _cache_key(audio_path: str, cfg: MelConfig, trim: bool) -> str:
    st = Path(audio_path).stat()
    payload = json.dumps([str(Path(audio_path).resolve()), st.st_mtime_ns, st.st_size,
                          cfg.to_dict(), trim], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def load_audio(path, target_rate: int, trim: bool = True) -> Waveform:
    w = resample(read_wav(path), target_rate)
    if trim:
        trimmed = trim_silence(w)
        if trimmed.is_empty:
            raise DataError(f"{path}: audio is entirely silent")
        w = trimmed
    return w


def audio_features(path, cfg: MelConfig = TTS_MEL, trim: bool = True) -> np.ndarray:
    """Log-mel ``(T, n_mels)`` of a WAV file, cached under ``$FLOWSPEAK_CACHE`` if set."""
    cache = _cache_dir()
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        f = cache / f"{_cache_key(str(path), cfg, trim)}.npy"
        if f.exists():
            return np.load(f)
    mel = mel_spectrogram(load_audio(path, cfg.sample_rate, trim), cfg).values
    if cache is not None:
        np.save(f, mel)
    return mel


def embed_audio(path, encoder: SpeakerEncoder, cfg: MelConfig = SPEAKER_ENCODER_MEL) -> SpeakerEmbedding:
    mel = audio_features(path, cfg)
    return encoder.embed_utterance(mel, source_id=str(path))


def build_vocabulary(records: Iterable[dict], phonemizer: Phonemizer) -> SymbolVocabulary:
    return SymbolVocabulary.build(phonemizer(r["text"]) for r in records)


def text_ids(text: str, vocab: SymbolVocabulary, phonemizer: Phonemizer, add_blank=True) -> np.ndarray:
    seq = encode_symbols(phonemizer(text), vocab)
    if add_blank:
        seq = intersperse_blank(seq, vocab)
    return np.asarray(seq.ids, dtype=np.int64)


def prepare_utterances(
    records: Sequence[dict],
    vocab: SymbolVocabulary,
    phonemizer: Phonemizer,
    speaker_encoder: SpeakerEncoder | None = None,
    speaker_table: dict[str, np.ndarray] | None = None,
    mel_cfg: MelConfig = TTS_MEL,
    add_blank: bool = True,
) -> list[Utterance]:
    """Turn manifest records into model-ready utterances.

    Speaker vectors come from ``speaker_table`` (keyed by speaker id) when it
    has an entry, otherwise from ``speaker_encoder`` run on the utterance.
    """
    out = []
    for rec in records:
        if speaker_table is not None and rec["speaker_id"] in speaker_table:
            spk = np.asarray(speaker_table[rec["speaker_id"]], dtype=np.float32)
        elif speaker_encoder is not None:
            spk = embed_audio(rec["audio_path"], speaker_encoder).vector.astype(np.float32)
        else:
            raise DataError(f"no speaker embedding source for {rec['utt_id']}")
        out.append(Utterance(
            utt_id=rec["utt_id"],
            ids=text_ids(rec["text"], vocab, phonemizer, add_blank),
            mel=audio_features(rec["audio_path"], mel_cfg),
            spk=spk,
            audio_path=rec["audio_path"],
            speaker_id=rec["speaker_id"],
            split=rec["split"],
            text=rec["text"],
        ))
    return out


def collate(utts: Sequence[Utterance], dtype=torch.float32) -> TTSBatch:
    """Zero-padded batch; mels become ``(B, n_mels, T)``."""
    n = len(utts)
    t_text = max(len(u.ids) for u in utts)
    t_mel = max(len(u.mel) for u in utts)
    n_mels = utts[0].mel.shape[1]
    ids = torch.zeros(n, t_text, dtype=torch.long)
    mels = torch.zeros(n, n_mels, t_mel, dtype=dtype)
    for i, u in enumerate(utts):
        ids[i, : len(u.ids)] = torch.as_tensor(u.ids)
        mels[i, :, : len(u.mel)] = torch.as_tensor(u.mel.T, dtype=dtype)
    return TTSBatch(
        ids=ids,
        id_lengths=torch.tensor([len(u.ids) for u in utts]),
        mels=mels,
        mel_lengths=torch.tensor([len(u.mel) for u in utts]),
        spk=torch.as_tensor(np.stack([u.spk for u in utts]), dtype=dtype),
        utt_ids=[u.utt_id for u in utts],
    )
