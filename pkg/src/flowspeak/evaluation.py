"""Objective evaluation: speaker-similarity (SECS) reports and real-time factor."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .audio import SPEAKER_ENCODER_MEL, Waveform, mel_spectrogram, resample
from .data import audio_features
from .speaker import SpeakerEmbedding, SpeakerEncoder, secs

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("model", "vocoder", "rtf_cpu", "rtf_gpu", "secs", "mos", "sim_mos")

SECS_NOTE = (
    "SECS computed with this package's own speaker encoder; values are comparable "
    "across runs of this package only, not with numbers obtained from other encoders."
)

# Published reference values, carried as context rows only; never asserted.
REFERENCE_ROWS = (
    {"model": "Ground Truth (reference)", "vocoder": "-", "rtf_cpu": None, "rtf_gpu": None,
     "secs": 0.9236, "mos": 4.12, "sim_mos": 4.127},
    {"model": "SC-GlowTTS-Trans (reference)", "vocoder": "HiFi-GAN", "rtf_cpu": 0.3612,
     "rtf_gpu": 0.1557, "secs": 0.7641, "mos": 3.65, "sim_mos": 3.905},
    {"model": "SC-GlowTTS-Trans (reference)", "vocoder": "HiFi-GAN-FT", "rtf_cpu": None,
     "rtf_gpu": None, "secs": 0.8046, "mos": 3.78, "sim_mos": 3.999},
)


class ProtocolError(ValueError):
    pass


@dataclass
class EvalProtocol:
    """Test speakers, one reference utterance each, and a sentence pool.

    Sentences are shuffled with ``seed`` and dealt ``per_speaker`` to each
    speaker in turn. ``longer_than_words`` drops sentences with that many words
    or fewer.
    """

    test_speakers: list[str]
    references: dict[str, str]
    sentences: list[str]
    per_speaker: int = 5
    seed: int = 0
    longer_than_words: int = 0
    ground_truth: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        missing = [s for s in self.test_speakers if s not in self.references]
        if missing:
            raise ProtocolError(f"no reference utterance for speakers {missing}")
        extra = set(self.references) - set(self.test_speakers)
        if extra:
            raise ProtocolError(f"references for unknown speakers {sorted(extra)}")
        if not self.sentences:
            raise ProtocolError("sentence list is empty")

    def eligible_sentences(self) -> list[str]:
        out = [s for s in self.sentences if len(s.split()) > self.longer_than_words]
        if not out:
            raise ProtocolError(f"no sentence has more than {self.longer_than_words} words")
        return out

    def assignments(self) -> list[tuple[str, int, str]]:
        """``(speaker, index, sentence)`` triples, deterministic in ``seed``."""
        pool = self.eligible_sentences()
        order = np.random.default_rng(self.seed).permutation(len(pool))
        out = []
        k = 0
        for spk in self.test_speakers:
            for i in range(self.per_speaker):
                out.append((spk, i, pool[order[k % len(pool)]]))
                k += 1
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, ensure_ascii=False))

    @classmethod
    def load(cls, path) -> "EvalProtocol":
        return cls(**json.loads(Path(path).read_text()))


def embed_waveform(w: Waveform, encoder: SpeakerEncoder) -> SpeakerEmbedding:
    w16 = resample(w, SPEAKER_ENCODER_MEL.sample_rate)
    return encoder.embed_utterance(mel_spectrogram(w16, SPEAKER_ENCODER_MEL))


@dataclass
class SecsReport:
    rows: list[dict]
    per_speaker: dict[str, float]
    mean: float
    ground_truth: float | None = None
    model: str = ""
    vocoder: str = ""
    note: str = SECS_NOTE

    def to_dict(self) -> dict:
        return asdict(self)


def secs_report(
    synthesize: Callable[[str, SpeakerEmbedding], Waveform],
    protocol: EvalProtocol,
    speaker_encoder: SpeakerEncoder,
    model_name: str = "",
    vocoder_name: str = "",
) -> SecsReport:
    """SECS between each synthesized sentence and its speaker's reference.

    ``synthesize(text, reference_embedding)`` returns a waveform. The
    ground-truth row compares ``protocol.ground_truth`` recordings with the
    same references.
    """
    refs = {}
    for spk in protocol.test_speakers:
        path = protocol.references[spk]
        if not Path(path).exists():
            raise ProtocolError(f"reference audio for {spk} not found: {path}")
        refs[spk] = speaker_encoder.embed_utterance(audio_features(path, SPEAKER_ENCODER_MEL), path)
    rows = []
    for spk, idx, text in protocol.assignments():
        wav = synthesize(text, refs[spk])
        score = secs(embed_waveform(wav, speaker_encoder), refs[spk])
        rows.append({"speaker": spk, "index": idx, "text": text, "secs": score})
    per_speaker = {
        spk: float(np.mean([r["secs"] for r in rows if r["speaker"] == spk]))
        for spk in protocol.test_speakers
    }
    gt_scores = []
    for spk, paths in protocol.ground_truth.items():
        for p in paths:
            emb = speaker_encoder.embed_utterance(audio_features(p, SPEAKER_ENCODER_MEL), p)
            gt_scores.append(secs(emb, refs[spk]))
    return SecsReport(
        rows=rows,
        per_speaker=per_speaker,
        mean=float(np.mean([r["secs"] for r in rows])),
        ground_truth=float(np.mean(gt_scores)) if gt_scores else None,
        model=model_name,
        vocoder=vocoder_name,
    )


@dataclass
class RtfReport:
    runs: list[dict]
    per_sentence: dict[int, float]
    mean: float
    std: float
    flagged: list[int] = field(default_factory=list)
    model: str = ""
    vocoder: str = ""
    device: str = "cpu"

    def table_row(self, secs_value: float | None = None) -> dict:
        row = dict.fromkeys(TABLE_COLUMNS)
        row.update(model=self.model, vocoder=self.vocoder, secs=secs_value)
        row["rtf_cpu" if self.device == "cpu" else "rtf_gpu"] = self.mean
        return row

    def to_dict(self) -> dict:
        return asdict(self)


def measure_rtf(
    synthesize: Callable[[str], Waveform],
    sentences: Sequence[str],
    repeats: int = 10,
    warmup: int = 3,
    model_name: str = "",
    vocoder_name: str = "",
    clock: Callable[[], float] = time.perf_counter,
) -> RtfReport:
    """Time ``synthesize`` (text in, waveform out) ``repeats`` times per sentence.

    Warmup calls are not recorded. Torch is pinned to one thread while
    timing. Runs returning empty audio are excluded and flagged.
    """
    if not sentences:
        raise ProtocolError("no sentences to time")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    runs, flagged = [], []
    try:
        for i in range(warmup):
            synthesize(sentences[i % len(sentences)])
        for r in range(repeats):
            for k, text in enumerate(sentences):
                t0 = clock()
                wav = synthesize(text)
                wall = clock() - t0
                audio_s = len(wav.samples) / wav.sample_rate
                if audio_s <= 0:
                    flagged.append(k)
                    logger.warning("sentence %d produced no audio; excluded", k)
                    continue
                runs.append({"sentence": k, "repeat": r, "wall_s": wall,
                             "audio_s": audio_s, "rtf": wall / audio_s})
    finally:
        torch.set_num_threads(prev_threads)
    if not runs:
        raise ProtocolError("every run produced empty audio")
    rtfs = [x["rtf"] for x in runs]
    per_sentence = {
        k: float(np.mean([x["rtf"] for x in runs if x["sentence"] == k]))
        for k in sorted({x["sentence"] for x in runs})
    }
    return RtfReport(
        runs=runs,
        per_sentence=per_sentence,
        mean=float(np.mean(rtfs)),
        std=float(statistics.pstdev(rtfs)),
        flagged=sorted(set(flagged)),
        model=model_name,
        vocoder=vocoder_name,
    )


def write_table(rows: Sequence[dict], out_dir, name: str = "table", include_reference: bool = True,
                extra: dict | None = None) -> tuple[Path, Path]:
    """Write a results table as CSV and JSON with fixed columns.

    Published reference rows are appended (marked ``context``) when
    ``include_reference`` is set; externally collected MOS columns stay empty
    unless supplied.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    measured = [{**dict.fromkeys(TABLE_COLUMNS), **r, "kind": "measured"} for r in rows]
    context = [{**r, "kind": "context"} for r in REFERENCE_ROWS] if include_reference else []
    all_rows = measured + context
    csv_path = out_dir / f"{name}.csv"
    with csv_path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=[*TABLE_COLUMNS, "kind"], extrasaction="ignore")
        writer.writeheader()
        for r in all_rows:
            writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
    json_path = out_dir / f"{name}.json"
    payload = {"columns": [*TABLE_COLUMNS, "kind"], "rows": all_rows, "note": SECS_NOTE}
    if extra:
        payload.update(extra)
    json_path.write_text(json.dumps(payload, indent=1))
    return csv_path, json_path
