"""Command-line driver. Exit codes: 0 success, 1 user error, 2 internal error."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .audio import AudioError, save_mel, write_wav
from .config import ConfigError, ExperimentConfig
from .data import DataError, audio_features, build_vocabulary, prepare_utterances, read_manifest
from .evaluation import EvalProtocol, ProtocolError, measure_rtf, secs_report, write_table
from .mas import AlignmentError
from .model import ModelError
from .speaker import (SpeakerEmbedding, SpeakerError, load_speaker_encoder, save_speaker_encoder,
                      train_speaker_encoder)
from .synthesis import (SynthesisError, SynthesisRequest, Synthesizer, VocoderError, make_vocoder,
                        voice_convert)
from .text import Phonemizer, TextError
from .train import TrainError, export_gta, fine_tune_few_speakers, load_checkpoint, train_tts

logger = logging.getLogger("flowspeak")

USER_ERRORS = (ConfigError, DataError, AudioError, TextError, TrainError, SpeakerError, ModelError,
               SynthesisError, VocoderError, ProtocolError, AlignmentError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="config file path or preset name")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. train.batch_size=8 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowspeak", description="Zero-shot multi-speaker flow TTS.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate-config", help="validate and print the resolved config")
    _common(p)

    p = sub.add_parser("make-toy-data", help="write the synthetic tone corpora")
    _common(p)
    p.add_argument("--out", default="toy_data")

    p = sub.add_parser("train-spk", help="train the speaker encoder")
    _common(p)

    p = sub.add_parser("train-tts", help="train the TTS model")
    _common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("fine-tune", help="warm-start from a checkpoint and train on a new corpus")
    _common(p)
    p.add_argument("--from", dest="base", default=None, help="base checkpoint (else train.fine_tune_from)")

    p = sub.add_parser("export-gta", help="teacher-forced mel export for vocoder adaptation")
    _common(p)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="synthesize text in the voice of a reference utterance")
    _common(p)
    p.add_argument("--text", required=True)
    p.add_argument("--ref", required=True, help="reference WAV of the target speaker")
    p.add_argument("--out", required=True, help="output WAV path")

    p = sub.add_parser("convert", help="zero-shot voice conversion")
    _common(p)
    p.add_argument("--src", required=True, help="source WAV")
    p.add_argument("--ref", required=True, help="reference WAV of the target speaker")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-secs", help="speaker-similarity report over an evaluation protocol")
    _common(p)
    p.add_argument("--protocol", default=None, help="protocol JSON (else eval.protocol)")

    p = sub.add_parser("bench-rtf", help="real-time-factor benchmark")
    _common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--sentences", required=True, help="text file, one sentence per line")
    return parser


def _run_dir(cfg: ExperimentConfig) -> Path:
    run = Path(cfg.paths.run_dir)
    for sub in ("checkpoints", "gta", "reports"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    config_mod.write_resolved(cfg, run)
    return run


def _phonemizer(cfg: ExperimentConfig) -> Phonemizer:
    t = cfg.text
    return Phonemizer(t.phonemizer_command, t.language, t.fallback)


def _require(value, what: str):
    if not value:
        raise ConfigError(f"{what} is not set", "/" + what.replace(".", "/"))
    return value


def _speaker_encoder_path(cfg: ExperimentConfig) -> Path:
    """``paths.speaker_encoder``, else the file ``train-spk`` writes in the run directory."""
    if cfg.paths.speaker_encoder:
        return Path(cfg.paths.speaker_encoder)
    default = Path(cfg.paths.run_dir) / "checkpoints" / "speaker_encoder.pt"
    return Path(_require(default if default.exists() else None, "paths.speaker_encoder"))


def _checkpoint_path(cfg: ExperimentConfig) -> Path:
    """``paths.checkpoint``, else the newest ``tts_*.pt`` in the run directory."""
    if cfg.paths.checkpoint:
        return Path(cfg.paths.checkpoint)
    found = sorted((Path(cfg.paths.run_dir) / "checkpoints").glob("tts_*.pt"))
    return Path(_require(found[-1] if found else None, "paths.checkpoint"))


def _speaker_encoder(cfg: ExperimentConfig):
    path = _speaker_encoder_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"speaker encoder checkpoint not found: {path}")
    enc = load_speaker_encoder(path)
    if enc.embed_dim != cfg.model.spk_dim:
        raise ConfigError(f"speaker encoder emits {enc.embed_dim}-dim vectors, model expects "
                          f"{cfg.model.spk_dim}", "/model/spk_dim")
    return enc


def _records(cfg: ExperimentConfig, key: str = "manifest") -> list[dict]:
    path = Path(_require(getattr(cfg.paths, key), f"paths.{key}"))
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return read_manifest(path)


def _split(utts):
    train = [u for u in utts if u.split == "train"]
    val = [u for u in utts if u.split in ("val", "validation", "dev")]
    return train, val


def _synthesizer(cfg: ExperimentConfig):
    ckpt = _checkpoint_path(cfg)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, vocab, _, _ = load_checkpoint(ckpt)
    s = cfg.synthesis
    if s.vocoder == "external":
        vocoder = make_vocoder("external", command=s.vocoder_command, timeout=s.vocoder_timeout)
    else:
        vocoder = make_vocoder("griffin_lim", iterations=s.griffin_lim_iterations, seed=cfg.seeds()["noise"])
    return Synthesizer(model, vocab, _phonemizer(cfg), _speaker_encoder(cfg), vocoder, cfg.frontend.tts.build())


def cmd_validate_config(cfg, args) -> int:
    print(json.dumps(cfg.resolved(), indent=1))
    return 0


def cmd_make_toy_data(cfg, args) -> int:
    from .synthetic import speaker_corpus, toy_tts_corpus, write_dataset

    out = Path(args.out)
    tts = write_dataset(out / "tts", toy_tts_corpus(n_speakers=2, seed=cfg.seed), val_every=5)
    corpus = speaker_corpus(seed=cfg.seed)
    items = [{"utt_id": f"{spk}_{i:03d}", "speaker_id": spk, "text": "-", "waveform": w}
             for spk, ws in corpus.items() for i, w in enumerate(ws)]
    spk = write_dataset(out / "spk", items)
    print(tts)
    print(spk)
    return 0


def cmd_train_spk(cfg, args) -> int:
    run = _run_dir(cfg)
    mel_cfg = cfg.frontend.speaker.build()
    corpus: dict[str, list[np.ndarray]] = {}
    for rec in _records(cfg, "speaker_manifest"):
        corpus.setdefault(rec["speaker_id"], []).append(audio_features(rec["audio_path"], mel_cfg))
    scfg = cfg.speaker_train_config()
    trainer = train_speaker_encoder(corpus, scfg, checkpoint_dir=run / "checkpoints")
    out = save_speaker_encoder(run / "checkpoints" / "speaker_encoder.pt", trainer.encoder, scfg,
                               trainer.step, trainer.speakers)
    print(out)
    return 0


def _tts_data(cfg, vocab=None):
    phon = _phonemizer(cfg)
    records = _records(cfg)
    vocab = vocab or build_vocabulary(records, phon)
    utts = prepare_utterances(records, vocab, phon, _speaker_encoder(cfg),
                              mel_cfg=cfg.frontend.tts.build(), add_blank=cfg.text.add_blank)
    return vocab, records, utts


def cmd_train_tts(cfg, args) -> int:
    run = _run_dir(cfg)
    torch.manual_seed(cfg.seeds()["init"])
    if cfg.train.fine_tune_from:
        return cmd_fine_tune(cfg, argparse.Namespace(base=cfg.train.fine_tune_from))
    vocab, _, utts = _tts_data(cfg)
    train, val = _split(utts)
    trainer = train_tts(cfg.build_model_config(len(vocab)), vocab, train, val, cfg.train_config(),
                        run, resume_from=args.resume)
    print(trainer.checkpoint_path())
    return 0


def cmd_fine_tune(cfg, args) -> int:
    run = _run_dir(cfg)
    base = Path(_require(args.base or cfg.train.fine_tune_from, "train.fine_tune_from"))
    if not base.exists():
        raise FileNotFoundError(f"base checkpoint not found: {base}")
    _, base_vocab, _, _ = load_checkpoint(base)
    phon = _phonemizer(cfg)
    records = _records(cfg)
    symbols = {s for r in records for s in phon(r["text"])}
    from .train import check_vocabulary

    check_vocabulary(base_vocab, symbols)
    _, _, utts = _tts_data(cfg, base_vocab)
    train, val = _split(utts)
    tcfg = cfg.train_config()
    tcfg.fine_tune_from = str(base)
    trainer = fine_tune_few_speakers(base, tcfg, train, val, run, symbols=symbols)
    print(trainer.checkpoint_path())
    return 0


def cmd_export_gta(cfg, args) -> int:
    run = _run_dir(cfg)
    ckpt = _checkpoint_path(cfg)
    model, vocab, _, _ = load_checkpoint(ckpt)
    _, _, utts = _tts_data(cfg, vocab)
    seed = cfg.seeds()["noise"] if args.seed is None else args.seed
    manifest = export_gta(model, utts, run / "gta", cfg.synthesis.gta_noise_scale, seed,
                          cfg.frontend.tts.build())
    print(manifest)
    return 0


def cmd_synth(cfg, args) -> int:
    _run_dir(cfg)
    synth = _synthesizer(cfg)
    req = SynthesisRequest(args.text, reference_audio=args.ref, noise_scale=cfg.synthesis.noise_scale,
                           length_scale=cfg.synthesis.length_scale, seed=cfg.seeds()["noise"])
    mel = synth.mel(req)
    wav = synth.vocoder(mel)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, wav)
    save_mel(out.with_suffix(".mel"), mel)
    print(out)
    return 0


def cmd_convert(cfg, args) -> int:
    _run_dir(cfg)
    synth = _synthesizer(cfg)
    mel_cfg = cfg.frontend.tts.build()
    from .audio import MelSpectrogram

    src_mel = MelSpectrogram(audio_features(args.src, mel_cfg), mel_cfg)
    spk_src = synth.embedding(args.src)
    spk_tgt = synth.embedding(args.ref)
    mel = voice_convert(src_mel, spk_src, spk_tgt, synth.model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, synth.vocoder(mel))
    save_mel(out.with_suffix(".mel"), mel)
    print(out)
    return 0


def cmd_eval_secs(cfg, args) -> int:
    run = _run_dir(cfg)
    path = Path(_require(args.protocol or cfg.eval.protocol, "eval.protocol"))
    if not path.exists():
        raise FileNotFoundError(f"protocol not found: {path}")
    protocol = EvalProtocol.load(path)
    synth = _synthesizer(cfg)
    s = cfg.synthesis

    def render(text: str, emb: SpeakerEmbedding):
        return synth(SynthesisRequest(text, embedding=emb, noise_scale=s.noise_scale,
                                      length_scale=s.length_scale, seed=cfg.seeds()["noise"]))

    report = secs_report(render, protocol, synth.speaker_encoder, cfg.name, s.vocoder)
    (run / "reports" / "secs.json").write_text(json.dumps(report.to_dict(), indent=1))
    row = {"model": cfg.name, "vocoder": s.vocoder, "secs": report.mean}
    write_table([row], run / "reports", "secs_table",
                extra={"ground_truth_secs": report.ground_truth})
    print(f"SECS mean {report.mean:.4f} over {len(report.rows)} sentences")
    return 0


def cmd_bench_rtf(cfg, args) -> int:
    run = _run_dir(cfg)
    sentences = [ln.strip() for ln in Path(args.sentences).read_text().splitlines() if ln.strip()]
    synth = _synthesizer(cfg)
    emb = synth.embedding(args.ref)
    s = cfg.synthesis

    def render(text: str):
        return synth(SynthesisRequest(text, embedding=emb, noise_scale=s.noise_scale,
                                      length_scale=s.length_scale, seed=cfg.seeds()["noise"]))

    report = measure_rtf(render, sentences, cfg.eval.rtf_repeats, cfg.eval.rtf_warmup, cfg.name, s.vocoder)
    (run / "reports" / "rtf.json").write_text(json.dumps(report.to_dict(), indent=1))
    write_table([report.table_row()], run / "reports", "rtf_table")
    print(f"RTF {report.mean:.4f} +- {report.std:.4f}")
    return 0


COMMANDS = {
    "validate-config": cmd_validate_config,
    "make-toy-data": cmd_make_toy_data,
    "train-spk": cmd_train_spk,
    "train-tts": cmd_train_tts,
    "fine-tune": cmd_fine_tune,
    "export-gta": cmd_export_gta,
    "synth": cmd_synth,
    "convert": cmd_convert,
    "eval-secs": cmd_eval_secs,
    "bench-rtf": cmd_bench_rtf,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
