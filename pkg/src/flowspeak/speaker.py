"""Recurrent speaker encoder, angular prototypical loss, and SECS."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import MelSpectrogram
from .optim import RAdam

logger = logging.getLogger(__name__)


class SpeakerError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
    source_id: str | None = None

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).ravel()
        if not np.all(np.isfinite(v)):
            raise SpeakerError("embedding contains non-finite values")
        norm = np.linalg.norm(v)
        if norm == 0:
            raise SpeakerError("zero speaker embedding")
        if abs(norm - 1.0) > 1e-5:
            raise SpeakerError(f"embedding must be unit-norm, got norm {norm:.6f}")
        object.__setattr__(self, "vector", v)

    @classmethod
    def normalized(cls, vector, source_id=None) -> "SpeakerEmbedding":
        v = np.asarray(vector, dtype=np.float64).ravel()
        norm = np.linalg.norm(v)
        if norm == 0:
            raise SpeakerError("zero speaker embedding")
        return cls(v / norm, source_id)

    def __len__(self):
        return len(self.vector)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.vector, dtype=dtype)


def secs(a, b) -> float:
    """Cosine similarity of two unit-norm speaker embeddings, in ``[-1, 1]``."""
    va = a.vector if isinstance(a, SpeakerEmbedding) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, SpeakerEmbedding) else np.asarray(b, dtype=np.float64)
    if not np.any(va) or not np.any(vb):
        raise SpeakerError("SECS is undefined for a zero vector")
    return float(np.clip(np.dot(va, vb), -1.0, 1.0))


class SpeakerEncoder(nn.Module):
    """Stacked LSTM over log-mel frames; last-frame state -> linear -> L2 norm."""

    def __init__(self, n_mels=80, hidden=768, n_layers=3, embed_dim=256, min_frames=40):
        super().__init__()
        self.n_mels = n_mels
        self.embed_dim = embed_dim
        self.min_frames = min_frames
        self.lstm = nn.LSTM(n_mels, hidden, num_layers=n_layers, batch_first=True)
        self.proj = nn.Linear(hidden, embed_dim)

    def forward(self, mels: torch.Tensor) -> torch.Tensor:
        """``(B, T, n_mels)`` -> unit-norm ``(B, embed_dim)``."""
        if mels.shape[1] < self.min_frames:
            raise SpeakerError(
                f"utterance has {mels.shape[1]} frames, at least {self.min_frames} required"
            )
        out, _ = self.lstm(mels)
        return F.normalize(self.proj(out[:, -1]), dim=-1)

    @torch.no_grad()
    def embed_utterance(self, mel, source_id=None) -> SpeakerEmbedding:
        values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        was_training = self.training
        self.eval()
        x = torch.as_tensor(values, dtype=next(self.parameters()).dtype).unsqueeze(0)
        e = self(x)[0].double().numpy()
        self.train(was_training)
        return SpeakerEmbedding.normalized(e, source_id)


def angular_prototypical_loss(emb: torch.Tensor, w, b) -> torch.Tensor:
    """Angular prototypical loss over ``(S, U, D)`` embeddings.

    The last utterance of each speaker is the query; the mean of the others is
    the speaker's prototype. Logits are ``w * cos(query_j, proto_k) + b`` and
    speaker ``j`` is the target class of query ``j``.
    """
    if emb.dim() != 3:
        raise SpeakerError(f"expected (S, U, D) embeddings, got {tuple(emb.shape)}")
    if emb.shape[1] < 2:
        raise SpeakerError("need at least two utterances per speaker")
    query = emb[:, -1]
    proto = emb[:, :-1].mean(dim=1)
    cos = F.cosine_similarity(query.unsqueeze(1), proto.unsqueeze(0), dim=-1)
    logits = w * cos + b
    target = torch.arange(emb.shape[0], device=emb.device)
    return F.cross_entropy(logits, target)


class AngularPrototypicalLoss(nn.Module):
    def __init__(self, init_w=10.0, init_b=-5.0, min_w=1e-3):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(float(init_w)))
        self.b = nn.Parameter(torch.tensor(float(init_b)))
        self.min_w = min_w

    def forward(self, emb):
        with torch.no_grad():
            self.w.clamp_(min=self.min_w)
        return angular_prototypical_loss(emb, self.w, self.b)


@dataclass
class SpeakerTrainConfig:
    speakers_per_batch: int = 64
    utterances_per_speaker: int = 10
    crop_frames: int = 160
    lr: float = 1e-4
    max_steps: int = 320_000
    seed: int = 0
    hidden: int = 768
    n_layers: int = 3
    embed_dim: int = 256
    n_mels: int = 80
    min_frames: int = 40
    checkpoint_every: int = 0

    def to_dict(self):
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _crop(mel: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(mel) <= n:
        reps = int(np.ceil(n / len(mel)))
        return np.tile(mel, (reps, 1))[:n]
    start = int(rng.integers(0, len(mel) - n + 1))
    return mel[start : start + n]


@dataclass
class SpeakerTrainer:
    """Owns the encoder, loss parameters, optimizer and batch RNG."""

    corpus: Mapping[str, Sequence[np.ndarray]]
    cfg: SpeakerTrainConfig
    step: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        cfg = self.cfg
        if cfg.utterances_per_speaker < 2:
            raise SpeakerError("utterances_per_speaker must be >= 2")
        eligible = [s for s, utts in self.corpus.items() if len(utts) >= cfg.utterances_per_speaker]
        if len(eligible) < cfg.speakers_per_batch:
            raise SpeakerError(
                f"corpus has {len(eligible)} speakers with >= {cfg.utterances_per_speaker} "
                f"utterances; {cfg.speakers_per_batch} required per batch"
            )
        self.speakers = sorted(eligible)
        torch.manual_seed(cfg.seed)
        self.encoder = SpeakerEncoder(cfg.n_mels, cfg.hidden, cfg.n_layers, cfg.embed_dim, cfg.min_frames)
        self.loss_fn = AngularPrototypicalLoss()
        self.optimizer = RAdam(list(self.encoder.parameters()) + list(self.loss_fn.parameters()), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)

    def sample_batch(self) -> torch.Tensor:
        cfg = self.cfg
        chosen = self.rng.choice(len(self.speakers), cfg.speakers_per_batch, replace=False)
        batch = []
        for k in chosen:
            utts = self.corpus[self.speakers[k]]
            picks = self.rng.choice(len(utts), cfg.utterances_per_speaker, replace=False)
            batch.append([_crop(np.asarray(utts[p]), cfg.crop_frames, self.rng) for p in picks])
        return torch.as_tensor(np.asarray(batch), dtype=torch.float32)

    def loss_on(self, batch: torch.Tensor) -> torch.Tensor:
        s, u, t, c = batch.shape
        emb = self.encoder(batch.reshape(s * u, t, c)).reshape(s, u, -1)
        return self.loss_fn(emb)

    def train_step(self, batch: torch.Tensor | None = None) -> float:
        self.encoder.train()
        batch = self.sample_batch() if batch is None else batch
        self.optimizer.zero_grad()
        loss = self.loss_on(batch)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        value = float(loss.detach())
        self.history.append(value)
        return value

    def fit(self, steps: int | None = None, checkpoint_dir=None) -> "SpeakerTrainer":
        steps = self.cfg.max_steps if steps is None else steps
        for _ in range(steps):
            loss = self.train_step()
            if self.step % 100 == 0:
                logger.info("speaker encoder step %d loss %.4f", self.step, loss)
            if checkpoint_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"speaker_{self.step:07d}.pt")
        return self

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "encoder": self.encoder.state_dict(),
                "loss": self.loss_fn.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "rng": self.rng.bit_generator.state,
                "torch_rng": torch.get_rng_state(),
                "step": self.step,
                "history": list(self.history),
            },
            path,
        )
        meta = {
            "step": self.step,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.fingerprint(),
            "speakers": self.speakers,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
        return path

    @classmethod
    def resume(cls, path, corpus) -> "SpeakerTrainer":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        trainer = cls(corpus, SpeakerTrainConfig(**meta["config"]))
        blob = torch.load(path, weights_only=False)
        trainer.encoder.load_state_dict(blob["encoder"])
        trainer.loss_fn.load_state_dict(blob["loss"])
        trainer.optimizer.load_state_dict(blob["optimizer"])
        trainer.rng.bit_generator.state = blob["rng"]
        torch.set_rng_state(blob["torch_rng"])
        trainer.step = blob["step"]
        trainer.history = list(blob["history"])
        return trainer


def train_speaker_encoder(corpus, cfg: SpeakerTrainConfig, steps=None, checkpoint_dir=None) -> SpeakerTrainer:
    """Train on ``{speaker_id: [mel (T, n_mels), ...]}``; returns the trainer."""
    return SpeakerTrainer(corpus, cfg).fit(steps, checkpoint_dir)


def save_speaker_encoder(path, encoder: SpeakerEncoder, cfg: SpeakerTrainConfig, step: int = 0,
                         speakers: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"encoder": encoder.state_dict()}, path)
    meta = {"step": step, "config": cfg.to_dict(), "config_hash": cfg.fingerprint(),
            "speakers": list(speakers)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return path


def load_speaker_encoder(path) -> SpeakerEncoder:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cfg = SpeakerTrainConfig(**meta["config"])
    enc = SpeakerEncoder(cfg.n_mels, cfg.hidden, cfg.n_layers, cfg.embed_dim, cfg.min_frames)
    enc.load_state_dict(torch.load(path, weights_only=False)["encoder"])
    enc.eval()
    return enc


def save_embedding_cache(path, embeddings: Mapping[str, SpeakerEmbedding]) -> Path:
    """Float32 records in key order plus a ``.json`` index ``{dim, keys}``."""
    path = Path(path)
    keys = list(embeddings)
    dim = len(next(iter(embeddings.values()))) if keys else 0
    data = np.stack([embeddings[k].vector for k in keys]).astype("<f4") if keys else np.zeros((0, 0), "<f4")
    path.write_bytes(data.tobytes())
    path.with_suffix(".json").write_text(json.dumps({"dim": dim, "keys": keys}))
    return path


def load_embedding_cache(path) -> dict[str, SpeakerEmbedding]:
    path = Path(path)
    index = json.loads(path.with_suffix(".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(len(index["keys"]), index["dim"])
    return {k: SpeakerEmbedding.normalized(v, k) for k, v in zip(index["keys"], data)}
