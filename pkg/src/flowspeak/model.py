"""Speaker-conditional flow TTS model: encoder + duration predictor + flow decoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import mas as mas_mod
from .encoders import DurationPredictor, EncoderOutput, build_encoder, durations_from_log, sequence_mask
from .flow import FlowDecoder, prior_logprob

logger = logging.getLogger(__name__)


class ModelError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_vocab: int
    n_mels: int = 80
    spk_dim: int = 256
    encoder_variant: str = "trans"
    encoder_channels: int = 192
    encoder_blocks: int | None = None  # None: the variant's default depth
    encoder_dropout: float = 0.1
    transformer_heads: int = 2
    transformer_filter: int = 768
    dp_filter: int = 256
    dp_dropout: float = 0.1
    flow_blocks: int = 12
    flow_hidden: int = 192
    flow_kernel: int = 5
    flow_layers: int = 4
    flow_dropout: float = 0.05
    flow_lu: bool = False
    max_text_len: int = 1024

    def to_dict(self) -> dict:
        return asdict(self)

    def encoder_kwargs(self) -> dict:
        kw = {"channels": self.encoder_channels, "out_channels": self.n_mels, "max_len": self.max_text_len}
        if self.encoder_variant == "trans":
            kw.update(n_heads=self.transformer_heads, filter_channels=self.transformer_filter,
                      dropout=self.encoder_dropout)
            if self.encoder_blocks is not None:
                kw["n_blocks"] = self.encoder_blocks
        elif self.encoder_variant == "res":
            if self.encoder_blocks is not None:
                cycle = (1, 2, 4)
                kw["dilations"] = tuple(cycle[i % 3] for i in range(self.encoder_blocks - 1)) + (1,)
        elif self.encoder_variant == "gated":
            kw["dropout"] = self.encoder_dropout
            if self.encoder_blocks is not None:
                kw["n_blocks"] = self.encoder_blocks
        return kw


@dataclass
class TTSBatch:
    ids: torch.Tensor  # (B, T_text) long
    id_lengths: torch.Tensor  # (B,)
    mels: torch.Tensor  # (B, n_mels, T_mel)
    mel_lengths: torch.Tensor  # (B,)
    spk: torch.Tensor  # (B, spk_dim)
    utt_ids: list = field(default_factory=list)

    def __len__(self):
        return self.ids.shape[0]

    def select(self, keep) -> "TTSBatch":
        idx = torch.as_tensor(keep, dtype=torch.long)
        t_text = int(self.id_lengths[idx].max())
        t_mel = int(self.mel_lengths[idx].max())
        return TTSBatch(
            self.ids[idx, :t_text],
            self.id_lengths[idx],
            self.mels[idx, :, :t_mel],
            self.mel_lengths[idx],
            self.spk[idx],
            [self.utt_ids[i] for i in keep] if self.utt_ids else [],
        )

    def to(self, dtype) -> "TTSBatch":
        return TTSBatch(self.ids, self.id_lengths, self.mels.to(dtype), self.mel_lengths,
                        self.spk.to(dtype), self.utt_ids)


@dataclass
class LossBreakdown:
    nll: torch.Tensor
    dur: torch.Tensor
    total: torch.Tensor
    skipped: list = field(default_factory=list)

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("nll", "dur", "total")}


@dataclass
class AlignedForward:
    z: torch.Tensor  # (B, n_mels, T) latents, even length
    z_mask: torch.Tensor
    logdet: torch.Tensor  # (B,)
    enc: EncoderOutput
    expanded_mean: torch.Tensor  # (B, n_mels, T)
    durations: torch.Tensor  # (B, T_text) long, MAS result
    log_dur_pred: torch.Tensor  # (B, T_text)


class SCGlowTTS(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg.encoder_variant, cfg.n_vocab, **cfg.encoder_kwargs())
        self.duration_predictor = DurationPredictor(
            cfg.encoder_channels, cfg.spk_dim, cfg.dp_filter, 3, cfg.dp_dropout
        )
        self.decoder = FlowDecoder(
            in_channels=cfg.n_mels, hidden=cfg.flow_hidden, kernel_size=cfg.flow_kernel,
            n_blocks=cfg.flow_blocks, n_layers=cfg.flow_layers, spk_dim=cfg.spk_dim,
            dropout=cfg.flow_dropout, lu=cfg.flow_lu,
        )

    def encode(self, ids, lengths=None) -> EncoderOutput:
        """Text-only path; no speaker information enters here."""
        return self.encoder(ids, lengths)

    def aligned_forward(self, batch: TTSBatch) -> AlignedForward:
        enc = self.encode(batch.ids, batch.id_lengths)
        t_mel = batch.mels.shape[-1]
        mel_mask = sequence_mask(batch.mel_lengths, t_mel).unsqueeze(1).to(batch.mels.dtype)
        state = self.decoder(batch.mels, mel_mask, batch.spk)
        z, z_mask = state.z, state.mask
        frame_counts = z_mask.sum(dim=(1, 2)).long()
        durations = torch.zeros_like(batch.ids)
        expanded = torch.zeros_like(z)
        for b in range(len(batch)):
            n_tok = int(batch.id_lengths[b])
            n_frm = int(frame_counts[b])
            mu = enc.prior_mean[b, :, :n_tok].T
            L = mas_mod.likelihoods(mu, z[b, :, :n_frm].T)
            align = mas_mod.mas(L)
            d = torch.as_tensor(align.durations, dtype=torch.long)
            durations[b, :n_tok] = d
            expanded[b, :, :n_frm] = mas_mod.expand_by_durations(mu, d).T
        log_dur = self.duration_predictor(enc.hidden, batch.spk, enc.mask)
        return AlignedForward(z, z_mask, state.logdet, enc, expanded, durations, log_dur)

    @torch.no_grad()
    def infer(self, ids, spk, lengths=None, noise_scale: float = 0.333,
              length_scale: float = 1.0, generator: torch.Generator | None = None,
              durations: torch.Tensor | None = None):
        """Synthesize mels ``(B, n_mels, T)``; returns ``(mel, mel_mask, durations)``.

        ``durations`` overrides the duration predictor (teacher forcing).
        """
        if noise_scale < 0 or length_scale <= 0:
            raise ModelError("need noise_scale >= 0 and length_scale > 0")
        enc = self.encode(ids, lengths)
        if durations is None:
            log_dur = self.duration_predictor(enc.hidden, spk, enc.mask)
            durations = durations_from_log(log_dur, enc.mask, length_scale)
        totals = durations.sum(1)
        lengths_out = (totals // 2) * 2
        if int(lengths_out.min()) < 2:
            raise ModelError("predicted utterance is shorter than two frames")
        t_out = int(lengths_out.max())
        mask = sequence_mask(lengths_out, t_out).unsqueeze(1).to(enc.prior_mean.dtype)
        means = torch.zeros(ids.shape[0], self.cfg.n_mels, t_out, dtype=enc.prior_mean.dtype)
        for b in range(ids.shape[0]):
            attn = mas_mod.durations_to_attention(durations[b].cpu().numpy(), t_out, enc.prior_mean.dtype)
            means[b] = enc.prior_mean[b] @ attn
        means = means * mask
        noise = torch.randn(means.shape, generator=generator, dtype=means.dtype) if noise_scale > 0 else 0.0
        z = (means + noise_scale * noise) * mask
        mel = self.decoder.inverse(z, mask, spk)
        return mel, mask, durations

    @torch.no_grad()
    def voice_convert(self, mel, spk_src, spk_tgt, mask=None):
        state = self.decoder(mel, mask, spk_src)
        return self.decoder.inverse(state.z, state.mask, spk_tgt)


def tts_loss(batch: TTSBatch, model: SCGlowTTS) -> LossBreakdown:
    """Flow NLL (per mel element) plus log-domain duration MSE.

    Items with more tokens than (even-truncated) frames are skipped.
    """
    even = (batch.mel_lengths // 2) * 2
    ok = [i for i in range(len(batch)) if int(batch.id_lengths[i]) <= int(even[i])]
    skipped = [i for i in range(len(batch)) if i not in ok]
    for i in skipped:
        name = batch.utt_ids[i] if batch.utt_ids else i
        logger.warning("skipping unalignable item %s (%d tokens, %d frames)",
                       name, int(batch.id_lengths[i]), int(even[i]))
    if not ok:
        raise ModelError("no alignable item in batch")
    if skipped:
        batch = batch.select(ok)
    out = model.aligned_forward(batch)
    n_elem = out.z_mask.sum() * model.cfg.n_mels
    log_p = prior_logprob(out.z, out.expanded_mean, out.z_mask)
    nll = -(log_p + out.logdet.sum()) / n_elem
    tok_mask = out.enc.mask.squeeze(1)
    target = torch.log(out.durations.clamp_min(1).to(out.log_dur_pred.dtype)) * tok_mask
    dur = ((out.log_dur_pred - target) ** 2 * tok_mask).sum() / tok_mask.sum()
    return LossBreakdown(nll, dur, nll + dur, skipped)
