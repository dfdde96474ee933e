"""Text encoders producing per-token prior means, and the duration predictor.

Three interchangeable encoders share one output contract
(:class:`EncoderOutput`) and are picked by name: ``"trans"``, ``"res"`` or
``"gated"``. None of them takes a speaker input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class EncoderError(ValueError):
    pass


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


@dataclass
class EncoderOutput:
    hidden: torch.Tensor  # (B, C, T)
    prior_mean: torch.Tensor  # (B, n_mels, T)
    mask: torch.Tensor  # (B, 1, T)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of ``(B, C, T)`` tensors."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.transpose(1, -1)).transpose(1, -1)


class _Encoder(nn.Module):
    variant = ""

    def __init__(self, n_vocab: int, channels: int, out_channels: int, max_len: int):
        super().__init__()
        self.channels = channels
        self.out_channels = out_channels
        self.max_len = max_len
        self.emb = nn.Embedding(n_vocab, channels)
        nn.init.normal_(self.emb.weight, 0.0, channels**-0.5)
        self.proj_mean = nn.Conv1d(channels, out_channels, 1)

    def _embed(self, ids, lengths):
        if ids.dim() != 2:
            raise EncoderError(f"ids must be (B, T), got {tuple(ids.shape)}")
        if ids.shape[1] > self.max_len:
            raise EncoderError(f"sequence length {ids.shape[1]} exceeds max_len {self.max_len}")
        if lengths is None:
            lengths = torch.full((ids.shape[0],), ids.shape[1], dtype=torch.long, device=ids.device)
        if int(lengths.min()) < 1:
            raise EncoderError("every sequence needs at least one symbol")
        mask = sequence_mask(lengths, ids.shape[1]).unsqueeze(1).to(self.emb.weight.dtype)
        x = self.emb(ids) * math.sqrt(self.channels)
        return x.transpose(1, 2) * mask, mask

    def _body(self, x, mask):
        raise NotImplementedError

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> EncoderOutput:
        x, mask = self._embed(ids, lengths)
        hidden = self._body(x, mask) * mask
        mean = self.proj_mean(hidden) * mask
        return EncoderOutput(hidden, mean, mask)


class ConvReluNorm(nn.Module):
    def __init__(self, channels, kernel_size=5, n_layers=3, dropout=0.5):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2)
            for _ in range(n_layers)
        )
        self.norms = nn.ModuleList(ChannelNorm(channels) for _ in range(n_layers))
        self.drop = nn.Dropout(dropout)
        self.proj = nn.Conv1d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, mask):
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = self.drop(torch.relu(norm(conv(h * mask))))
        return (x + self.proj(h)) * mask


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention with windowed relative position embeddings.

    Offsets beyond ``window`` get no positional term.
    """

    def __init__(self, channels, n_heads, window=4, dropout=0.0):
        super().__init__()
        assert channels % n_heads == 0
        self.n_heads = n_heads
        self.d = channels // n_heads
        self.window = window
        self.q = nn.Conv1d(channels, channels, 1)
        self.k = nn.Conv1d(channels, channels, 1)
        self.v = nn.Conv1d(channels, channels, 1)
        self.o = nn.Conv1d(channels, channels, 1)
        std = self.d**-0.5
        self.rel_k = nn.Parameter(torch.randn(2 * window + 1, self.d) * std)
        self.rel_v = nn.Parameter(torch.randn(2 * window + 1, self.d) * std)
        self.drop = nn.Dropout(dropout)
        for lin in (self.q, self.k, self.v):
            nn.init.xavier_uniform_(lin.weight)

    def _rel(self, table, t):
        pos = torch.arange(t, device=table.device)
        offset = pos[None, :] - pos[:, None]
        inside = (offset.abs() <= self.window).to(table.dtype)
        idx = offset.clamp(-self.window, self.window) + self.window
        return table[idx] * inside[..., None]  # (t, t, d)

    def forward(self, x, mask):
        b, c, t = x.shape
        q = self.q(x).view(b, self.n_heads, self.d, t).transpose(2, 3)
        k = self.k(x).view(b, self.n_heads, self.d, t).transpose(2, 3)
        v = self.v(x).view(b, self.n_heads, self.d, t).transpose(2, 3)
        q = q / math.sqrt(self.d)
        scores = q @ k.transpose(-1, -2)
        scores = scores + torch.einsum("bhid,ijd->bhij", q, self._rel(self.rel_k, t))
        attn_mask = mask.unsqueeze(2) * mask.unsqueeze(-1)  # (b, 1, t, t)
        scores = scores.masked_fill(attn_mask == 0, -1e4)
        p = self.drop(torch.softmax(scores, dim=-1))
        out = p @ v + torch.einsum("bhij,ijd->bhid", p, self._rel(self.rel_v, t))
        out = out.transpose(2, 3).reshape(b, c, t)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, channels, filter_channels, kernel_size=3, dropout=0.0):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(filter_channels, channels, kernel_size, padding=kernel_size // 2)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.drop(torch.relu(self.conv1(x * mask)))
        return self.conv2(h * mask) * mask


class TransformerEncoder(_Encoder):
    variant = "trans"

    def __init__(self, n_vocab, channels=192, out_channels=80, n_blocks=6, n_heads=2,
                 filter_channels=768, kernel_size=3, window=4, dropout=0.1,
                 prenet=True, max_len=1024):
        super().__init__(n_vocab, channels, out_channels, max_len)
        self.prenet = ConvReluNorm(channels, 5, 3, 0.5) if prenet else None
        self.attn = nn.ModuleList(RelativeSelfAttention(channels, n_heads, window, dropout) for _ in range(n_blocks))
        self.norm1 = nn.ModuleList(ChannelNorm(channels) for _ in range(n_blocks))
        self.ffn = nn.ModuleList(FeedForward(channels, filter_channels, kernel_size, dropout) for _ in range(n_blocks))
        self.norm2 = nn.ModuleList(ChannelNorm(channels) for _ in range(n_blocks))
        self.drop = nn.Dropout(dropout)

    def _body(self, x, mask):
        if self.prenet is not None:
            x = self.prenet(x, mask)
        for attn, n1, ffn, n2 in zip(self.attn, self.norm1, self.ffn, self.norm2):
            x = n1(x + self.drop(attn(x, mask)))
            x = n2(x + self.drop(ffn(x, mask)))
        return x


class ResidualConvBlock(nn.Module):
    def __init__(self, channels, kernel_size, dilation):
        super().__init__()
        total = dilation * (kernel_size - 1)
        self.pad = (total // 2, total - total // 2)
        self.conv = nn.Conv1d(channels, channels, kernel_size, dilation=dilation)
        self.norm = ChannelNorm(channels)

    def forward(self, x, mask):
        h = self.conv(F.pad(x * mask, self.pad))
        return (x + self.norm(F.mish(h))) * mask


class ResidualConvEncoder(_Encoder):
    """Dilated residual convolutions with Mish activations.

    Default dilations: ``(1, 2, 4)`` four times followed by a final ``1``.
    """

    variant = "res"

    def __init__(self, n_vocab, channels=192, out_channels=80, kernel_size=4,
                 dilations=(1, 2, 4) * 4 + (1,), max_len=1024):
        super().__init__(n_vocab, channels, out_channels, max_len)
        self.prenet = nn.Conv1d(channels, channels, 1)
        self.blocks = nn.ModuleList(ResidualConvBlock(channels, kernel_size, d) for d in dilations)
        self.postnet = nn.Conv1d(channels, channels, 1)

    def _body(self, x, mask):
        x = F.mish(self.prenet(x)) * mask
        for block in self.blocks:
            x = block(x, mask)
        return self.postnet(x)


class GatedConvBlock(nn.Module):
    def __init__(self, channels, kernel_size=5, dilation=1, dropout=0.1):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.conv = nn.Conv1d(channels, 2 * channels, kernel_size, dilation=dilation,
                              padding=dilation * (kernel_size - 1) // 2)
        self.norm = ChannelNorm(channels)

    def forward(self, x, mask):
        h = F.glu(self.conv(self.drop(x) * mask), dim=1)
        return self.norm(x + h) * mask


class GatedConvEncoder(_Encoder):
    variant = "gated"

    def __init__(self, n_vocab, channels=192, out_channels=80, n_blocks=9, kernel_size=5,
                 dilation=1, dropout=0.1, max_len=1024):
        super().__init__(n_vocab, channels, out_channels, max_len)
        self.blocks = nn.ModuleList(
            GatedConvBlock(channels, kernel_size, dilation, dropout) for _ in range(n_blocks)
        )

    def _body(self, x, mask):
        for block in self.blocks:
            x = block(x, mask)
        return x


ENCODERS = {cls.variant: cls for cls in (TransformerEncoder, ResidualConvEncoder, GatedConvEncoder)}


def build_encoder(variant: str, n_vocab: int, **kwargs) -> _Encoder:
    try:
        cls = ENCODERS[variant]
    except KeyError:
        raise EncoderError(f"unknown encoder variant {variant!r}; expected one of {sorted(ENCODERS)}") from None
    return cls(n_vocab, **kwargs)


class DurationPredictor(nn.Module):
    """Log-duration regressor over encoder states concatenated with the speaker embedding.

    The encoder states are detached, so the duration loss never reaches the
    encoder.
    """

    def __init__(self, in_channels=192, spk_dim=256, filter_channels=256, kernel_size=3, dropout=0.1):
        super().__init__()
        self.spk_dim = spk_dim
        self.conv1 = nn.Conv1d(in_channels + spk_dim, filter_channels, kernel_size, padding=kernel_size // 2)
        self.norm1 = ChannelNorm(filter_channels)
        self.conv2 = nn.Conv1d(filter_channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.norm2 = ChannelNorm(filter_channels)
        self.drop = nn.Dropout(dropout)
        self.proj = nn.Conv1d(filter_channels, 1, 1)

    def forward(self, hidden, spk, mask):
        if spk.dim() != 2 or spk.shape[1] != self.spk_dim:
            raise EncoderError(f"speaker embedding must be (B, {self.spk_dim}), got {tuple(spk.shape)}")
        x = torch.cat([hidden.detach(), spk.unsqueeze(-1).expand(-1, -1, hidden.shape[-1])], dim=1)
        x = self.drop(self.norm1(torch.relu(self.conv1(x * mask))))
        x = self.drop(self.norm2(torch.relu(self.conv2(x * mask))))
        return (self.proj(x * mask) * mask).squeeze(1)


def durations_from_log(log_durations, mask, length_scale: float = 1.0) -> torch.Tensor:
    """``max(1, ceil(exp(d) * length_scale))`` on valid tokens, 0 on padding."""
    frames = torch.clamp_min(torch.ceil(torch.exp(log_durations) * length_scale), 1)
    return (frames * mask.squeeze(1)).long()
