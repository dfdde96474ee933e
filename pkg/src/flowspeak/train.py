"""TTS training loop, checkpoints, few-speaker fine-tuning and GTA export."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import mas as mas_mod
from .audio import TTS_MEL, MelConfig, MelSpectrogram, save_mel
from .data import Utterance, collate
from .model import ModelConfig, SCGlowTTS, tts_loss
from .optim import RAdam, noam_lr
from .text import SymbolVocabulary

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainError(RuntimeError):
    pass


class VocabularyMismatchError(TrainError):
    def __init__(self, missing):
        super().__init__(
            f"fine-tuning data uses {len(missing)} symbols absent from the base checkpoint "
            f"vocabulary: {sorted(missing)[:20]}; remap them or rebuild the base model"
        )
        self.missing = set(missing)


@dataclass
class TrainConfig:
    encoder_variant: str = "trans"
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 400
    max_steps: int = 2000
    seed: int = 0
    precision: str = "float32"
    grad_clip: float = 5.0
    checkpoint_every: int = 500
    validate_every: int = 500
    keep_checkpoints: int = 3
    fine_tune_from: str | None = None

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise TrainError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.precision not in DTYPES:
            raise TrainError(f"precision must be one of {sorted(DTYPES)}")

    def to_dict(self):
        return asdict(self)


def save_checkpoint(path, model: SCGlowTTS, vocab: SymbolVocabulary, step: int = 0,
                    config: dict | None = None, optimizer=None, extra: dict | None = None) -> Path:
    """Weights blob (``.pt``) plus JSON metadata next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"model": model.state_dict(), "torch_rng": torch.get_rng_state()}
    if optimizer is not None:
        blob["optimizer"] = optimizer.state_dict()
    if extra:
        blob.update(extra)
    torch.save(blob, path)
    meta = {
        "step": step,
        "config": config or {},
        "model": model.cfg.to_dict(),
        "vocab": vocab.to_dict(),
        "vocab_hash": vocab.fingerprint(),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return path


def load_checkpoint(path, dtype=torch.float32):
    """Returns ``(model, vocab, meta, blob)``; the model is in eval mode."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    vocab = SymbolVocabulary.from_dict(meta["vocab"])
    if vocab.fingerprint() != meta["vocab_hash"]:
        raise TrainError(f"{path}: vocabulary hash mismatch")
    model = SCGlowTTS(ModelConfig(**meta["model"])).to(dtype)
    blob = torch.load(path, weights_only=False)
    model.load_state_dict(blob["model"])
    model.eval()
    return model, vocab, meta, blob


@dataclass
class TTSTrainer:
    """Single-writer training loop.

    Batch order is a pure function of ``(seed, epoch)``, so resuming from a
    checkpoint replays exactly the batches an uninterrupted run would see.
    """

    model: SCGlowTTS
    vocab: SymbolVocabulary
    train_set: Sequence[Utterance]
    val_set: Sequence[Utterance]
    cfg: TrainConfig
    run_dir: Path | None = None
    step: int = 0
    history: list = field(default_factory=list)
    best_val: float = float("inf")

    def __post_init__(self):
        if not self.train_set:
            raise TrainError("empty training set")
        self.dtype = DTYPES[self.cfg.precision]
        self.model.to(self.dtype)
        params = list(self.model.named_parameters())
        self.optimizer = RAdam([p for _, p in params], lr=self.cfg.base_lr)
        self.optimizer.param_names = {id(p): n for n, p in params}
        if self.run_dir is not None:
            self.run_dir = Path(self.run_dir)
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    def batch_for_step(self, step: int) -> list[Utterance]:
        n = len(self.train_set)
        bs = min(self.cfg.batch_size, n)
        per_epoch = max(1, n // bs)
        epoch, k = divmod(step, per_epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(n)
        return [self.train_set[i] for i in order[k * bs : (k + 1) * bs]]

    def train_step(self) -> dict:
        self.model.train()
        batch = collate(self.batch_for_step(self.step), self.dtype)
        lr = noam_lr(self.step + 1, self.cfg.base_lr, self.cfg.warmup_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad()
        losses = tts_loss(batch, self.model)
        losses.total.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        record = {"step": self.step, "lr": lr, **losses.as_floats()}
        self.history.append(record)
        return record

    @torch.no_grad()
    def validate(self, utts: Sequence[Utterance] | None = None) -> dict:
        utts = self.val_set if utts is None else utts
        if not utts:
            return {}
        self.model.eval()
        totals = {"nll": 0.0, "dur": 0.0, "total": 0.0}
        bs = self.cfg.batch_size
        n = 0
        for i in range(0, len(utts), bs):
            chunk = utts[i : i + bs]
            losses = tts_loss(collate(chunk, self.dtype), self.model).as_floats()
            for k in totals:
                totals[k] += losses[k] * len(chunk)
            n += len(chunk)
        return {k: v / n for k, v in totals.items()}

    def checkpoint_path(self, step: int | None = None) -> Path:
        if self.run_dir is None:
            raise TrainError("no run directory configured")
        step = self.step if step is None else step
        return self.run_dir / "checkpoints" / f"tts_{step:07d}.pt"

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.checkpoint_path()
        return save_checkpoint(
            path, self.model, self.vocab, self.step, self.cfg.to_dict(), self.optimizer,
            {"history": self.history, "best_val": self.best_val},
        )

    def restore(self, path) -> "TTSTrainer":
        _, _, meta, blob = load_checkpoint(path, self.dtype)
        self.model.load_state_dict(blob["model"])
        if "optimizer" in blob:
            self.optimizer.load_state_dict(blob["optimizer"])
        torch.set_rng_state(blob["torch_rng"])
        self.step = meta["step"]
        self.history = list(blob.get("history", []))
        self.best_val = blob.get("best_val", float("inf"))
        return self

    def _prune(self):
        ckpts = sorted((self.run_dir / "checkpoints").glob("tts_*.pt"))
        for old in ckpts[: -self.cfg.keep_checkpoints] if self.cfg.keep_checkpoints else []:
            old.unlink()
            old.with_suffix(".json").unlink(missing_ok=True)

    def fit(self, max_steps: int | None = None) -> "TTSTrainer":
        max_steps = self.cfg.max_steps if max_steps is None else max_steps
        while self.step < max_steps:
            record = self.train_step()
            if self.step % 50 == 0:
                logger.info("step %(step)d lr %(lr).2e nll %(nll).4f dur %(dur).4f", record)
            if self.run_dir is None:
                continue
            if self.val_set and self.cfg.validate_every and self.step % self.cfg.validate_every == 0:
                val = self.validate()
                logger.info("step %d validation %s", self.step, val)
                if val["total"] < self.best_val:
                    self.best_val = val["total"]
                    self.save(self.run_dir / "checkpoints" / "best.pt")
            if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save()
                self._prune()
        if self.run_dir is not None:
            self.save()
        return self


def train_tts(model_cfg: ModelConfig, vocab: SymbolVocabulary, train_set, val_set,
              cfg: TrainConfig, run_dir=None, resume_from=None) -> TTSTrainer:
    torch.manual_seed(cfg.seed)
    if cfg.fine_tune_from:
        return fine_tune_few_speakers(cfg.fine_tune_from, cfg, train_set, val_set, run_dir)
    trainer = TTSTrainer(SCGlowTTS(model_cfg), vocab, train_set, val_set, cfg, run_dir)
    if resume_from is not None:
        trainer.restore(resume_from)
    return trainer.fit()


def check_vocabulary(base: SymbolVocabulary, utterances_symbols: set[str]) -> None:
    missing = set(utterances_symbols) - set(base.symbols)
    if missing:
        raise VocabularyMismatchError(missing)


def fine_tune_few_speakers(base_ckpt, cfg: TrainConfig, train_set, val_set, run_dir=None,
                           fit: bool = True, symbols: set[str] | None = None) -> TTSTrainer:
    """Warm-start from ``base_ckpt`` and continue with a fresh optimizer and schedule.

    ``symbols`` is the symbol set of the fine-tuning corpus; every one of them
    must exist in the base vocabulary.
    """
    model, vocab, meta, _ = load_checkpoint(base_ckpt, DTYPES[cfg.precision])
    if symbols is not None:
        check_vocabulary(vocab, symbols)
    if model.cfg.encoder_variant != cfg.encoder_variant:
        logger.warning("encoder variant %s from checkpoint overrides config %s",
                       model.cfg.encoder_variant, cfg.encoder_variant)
    trainer = TTSTrainer(model, vocab, train_set, val_set, cfg, run_dir)
    return trainer.fit() if fit else trainer


@torch.no_grad()
def export_gta(model: SCGlowTTS, utterances: Sequence[Utterance], out_dir,
               noise_scale: float = 0.333, seed: int = 0, mel_cfg: MelConfig = TTS_MEL) -> Path:
    """Teacher-forced mel export for vocoder fine-tuning.

    Writes ``<utt>.mel`` binaries with sidecars, ``manifest.jsonl`` with
    ``{gta_mel_path, audio_path, frames}`` per exported item and
    ``failed.jsonl`` listing skipped utterances. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    dtype = next(model.parameters()).dtype
    entries, failed = [], []
    for idx, utt in enumerate(utterances):
        batch = collate([utt], dtype)
        try:
            fwd = model.aligned_forward(batch)
        except mas_mod.UnalignableError as exc:
            failed.append({"utt_id": utt.utt_id, "audio_path": utt.audio_path, "reason": str(exc)})
            continue
        gen = torch.Generator().manual_seed(seed * 1_000_003 + idx)
        noise = torch.randn(fwd.expanded_mean.shape, generator=gen, dtype=dtype)
        z = (fwd.expanded_mean + noise_scale * noise) * fwd.z_mask
        mel = model.decoder.inverse(z, fwd.z_mask, batch.spk)[0].T.numpy()
        path = out_dir / f"{utt.utt_id}.mel"
        save_mel(path, MelSpectrogram(mel, mel_cfg, truncated=len(mel) != len(utt.mel)))
        entries.append({"gta_mel_path": str(path), "audio_path": utt.audio_path, "frames": len(mel)})
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(e) + "\n" for e in entries))
    (out_dir / "failed.jsonl").write_text("".join(json.dumps(e) + "\n" for e in failed))
    if failed:
        logger.warning("GTA export skipped %d unalignable utterances", len(failed))
    return manifest
