"""Speaker-conditioned invertible mel decoder.

Tensors use the ``(batch, channels, frames)`` layout with masks of shape
``(batch, 1, frames)``. The decoder squeezes adjacent frame pairs into the
channel axis, runs ``n_blocks`` of actnorm -> invertible 1x1 mixing ->
affine coupling, and unsqueezes again, so latents share the mel layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_2PI = math.log(2 * math.pi)


class FlowError(RuntimeError):
    pass


class FlowNumericalError(FlowError):
    def __init__(self, block: int, what: str):
        super().__init__(f"non-finite {what} in flow block {block}")
        self.block = block


class SingularMixingError(FlowError):
    def __init__(self, block: int, det: float):
        super().__init__(f"1x1 mixing matrix of flow block {block} is singular (|det|={det:.3g})")
        self.block = block


def squeeze(x: torch.Tensor, mask: torch.Tensor | None = None, factor: int = 2):
    """Stack ``factor`` adjacent frames channel-wise.

    Accepts ``(B, C, T)`` with optional ``(B, 1, T)`` mask. A trailing partial
    group is dropped. Returns ``(y, y_mask, truncated)``.
    """
    b, c, t = x.shape
    if t < factor:
        raise FlowError(f"need at least {factor} frames to squeeze, got {t}")
    t_even = (t // factor) * factor
    truncated = t_even != t
    x = x[:, :, :t_even]
    y = x.reshape(b, c, t_even // factor, factor).permute(0, 3, 1, 2)
    y = y.reshape(b, c * factor, t_even // factor)
    if mask is None:
        y_mask = torch.ones(b, 1, t_even // factor, dtype=x.dtype, device=x.device)
    else:
        y_mask = mask[:, :, factor - 1 : t_even : factor]
        y = y * y_mask
    return y, y_mask, truncated


def unsqueeze(y: torch.Tensor, mask: torch.Tensor | None = None, factor: int = 2):
    """Inverse of :func:`squeeze`. Returns ``(x, x_mask)``."""
    b, c2, t = y.shape
    c = c2 // factor
    x = y.reshape(b, factor, c, t).permute(0, 2, 3, 1).reshape(b, c, t * factor)
    if mask is None:
        x_mask = torch.ones(b, 1, t * factor, dtype=y.dtype, device=y.device)
    else:
        x_mask = mask.unsqueeze(-1).repeat(1, 1, 1, factor).reshape(b, 1, t * factor)
        x = x * x_mask
    return x, x_mask


def squeeze_frames(mel: torch.Tensor, factor: int = 2):
    """Frames-first convenience wrapper: ``(T, C) -> (T//2, 2C)`` plus truncation flag."""
    y, _, truncated = squeeze(mel.T.unsqueeze(0), None, factor)
    return y[0].T, truncated


def unsqueeze_frames(y: torch.Tensor, factor: int = 2) -> torch.Tensor:
    x, _ = unsqueeze(y.T.unsqueeze(0), None, factor)
    return x[0].T


class ActNorm(nn.Module):
    """Per-channel affine map with data-dependent initialisation on first use."""

    def __init__(self, channels: int, ddi: bool = True):
        super().__init__()
        self.logs = nn.Parameter(torch.zeros(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))
        self.register_buffer("initialized", torch.tensor(not ddi))

    def initialize(self, x, mask):
        with torch.no_grad():
            denom = mask.sum(dim=(0, 2)).clamp_min(1)
            m = (x * mask).sum(dim=(0, 2)) / denom
            m_sq = (x * x * mask).sum(dim=(0, 2)) / denom
            logs = 0.5 * torch.log(torch.clamp_min(m_sq - m**2, 1e-6))
            self.bias.copy_((-m * torch.exp(-logs)).view_as(self.bias))
            self.logs.copy_((-logs).view_as(self.logs))
            self.initialized.fill_(True)

    def forward(self, x, mask, reverse: bool = False):
        if not bool(self.initialized):
            self.initialize(x, mask)
        n_frames = mask.sum(dim=(1, 2))
        if reverse:
            y = (x - self.bias) * torch.exp(-self.logs) * mask
            logdet = -self.logs.sum() * n_frames
        else:
            y = (self.bias + torch.exp(self.logs) * x) * mask
            logdet = self.logs.sum() * n_frames
        return y, logdet


class InvertibleMixing(nn.Module):
    """Invertible 1x1 convolution over channels.

    ``lu=False`` stores the raw matrix and takes the log-determinant from an
    LU factorisation each call; ``lu=True`` keeps the P·L·(U + diag s) factors
    as parameters.
    """

    def __init__(self, channels: int, lu: bool = False, min_abs_det: float = 1e-12):
        super().__init__()
        self.channels = channels
        self.lu = lu
        self.min_abs_det = min_abs_det
        self.block_index = -1
        w = torch.linalg.qr(torch.randn(channels, channels, dtype=torch.float64))[0]
        if torch.det(w) < 0:
            w[:, 0] = -w[:, 0]
        if lu:
            p, l, u = torch.linalg.lu(w)
            s = torch.diagonal(u)
            self.register_buffer("p", p.float())
            self.register_buffer("sign_s", torch.sign(s).float())
            self.register_buffer("l_mask", torch.tril(torch.ones(channels, channels), -1))
            self.l = nn.Parameter(l.float())
            self.u = nn.Parameter(torch.triu(u, 1).float())
            self.log_s = nn.Parameter(torch.log(s.abs()).float())
        else:
            self.weight = nn.Parameter(w.float())

    def reset_identity(self):
        with torch.no_grad():
            if self.lu:
                eye = torch.eye(self.channels, dtype=self.l.dtype)
                self.p.copy_(eye)
                self.sign_s.fill_(1.0)
                self.l.copy_(eye)
                self.u.zero_()
                self.log_s.zero_()
            else:
                self.weight.copy_(torch.eye(self.channels, dtype=self.weight.dtype))

    def matrix_and_logabsdet(self):
        if self.lu:
            eye = torch.eye(self.channels, dtype=self.l.dtype, device=self.l.device)
            l = self.l * self.l_mask + eye
            u = self.u * self.l_mask.T + torch.diag(self.sign_s * torch.exp(self.log_s))
            w = self.p @ l @ u
            logabsdet = self.log_s.sum()
        else:
            w = self.weight
            _, logabsdet = torch.linalg.slogdet(w)
        lad = float(logabsdet.detach())
        if not math.isfinite(lad) or lad < math.log(self.min_abs_det):
            raise SingularMixingError(self.block_index, math.exp(lad) if math.isfinite(lad) else 0.0)
        return w, logabsdet

    def forward(self, x, mask, reverse: bool = False):
        w, logabsdet = self.matrix_and_logabsdet()
        n_frames = mask.sum(dim=(1, 2))
        if reverse:
            w = torch.linalg.inv(w.double()).to(x.dtype)
            logdet = -logabsdet * n_frames
        else:
            logdet = logabsdet * n_frames
        y = torch.einsum("oc,bct->bot", w.to(x.dtype), x) * mask
        return y, logdet


class GatedConvStack(nn.Module):
    """Non-causal WaveNet-style stack with global conditioning.

    The conditioning vector is projected per layer and added to the
    pre-activation of the tanh/sigmoid gate.
    """

    def __init__(
        self,
        hidden: int,
        kernel_size: int,
        n_layers: int,
        cond_channels: int = 0,
        dilation_rate: int = 1,
        dropout: float = 0.0,
    ):
        super().__init__()
        assert kernel_size % 2 == 1
        self.hidden = hidden
        self.n_layers = n_layers
        self.in_layers = nn.ModuleList()
        self.res_skip_layers = nn.ModuleList()
        self.drop = nn.Dropout(dropout)
        self.cond_layer = nn.Conv1d(cond_channels, 2 * hidden * n_layers, 1) if cond_channels else None
        for i in range(n_layers):
            dilation = dilation_rate**i
            pad = (kernel_size * dilation - dilation) // 2
            self.in_layers.append(
                nn.Conv1d(hidden, 2 * hidden, kernel_size, dilation=dilation, padding=pad)
            )
            out = 2 * hidden if i < n_layers - 1 else hidden
            self.res_skip_layers.append(nn.Conv1d(hidden, out, 1))

    def forward(self, x, mask, g=None):
        output = torch.zeros_like(x)
        if g is not None:
            if self.cond_layer is None:
                raise FlowError("conditioning given to an unconditioned stack")
            g = self.cond_layer(g)
        for i in range(self.n_layers):
            h = self.in_layers[i](x)
            if g is not None:
                h = h + g[:, 2 * i * self.hidden : 2 * (i + 1) * self.hidden]
            acts = torch.tanh(h[:, : self.hidden]) * torch.sigmoid(h[:, self.hidden :])
            acts = self.drop(acts)
            res_skip = self.res_skip_layers[i](acts)
            if i < self.n_layers - 1:
                x = (x + res_skip[:, : self.hidden]) * mask
                output = output + res_skip[:, self.hidden :]
            else:
                output = output + res_skip
        return output * mask


class AffineCoupling(nn.Module):
    """``y_b = x_b * exp(logs) + m`` with ``(m, logs)`` read from ``x_a`` and the speaker."""

    def __init__(
        self,
        channels: int,
        hidden: int,
        kernel_size: int,
        n_layers: int,
        spk_dim: int,
        dilation_rate: int = 1,
        dropout: float = 0.0,
        zero_init: bool = True,
    ):
        super().__init__()
        if channels % 2:
            raise FlowError("coupling needs an even channel count")
        self.half = channels // 2
        self.block_index = -1
        self.start = nn.Conv1d(self.half, hidden, 1)
        self.net = GatedConvStack(hidden, kernel_size, n_layers, spk_dim, dilation_rate, dropout)
        self.end = nn.Conv1d(hidden, channels, 1)
        if zero_init:
            nn.init.zeros_(self.end.weight)
            nn.init.zeros_(self.end.bias)

    def forward(self, x, mask, g=None, reverse: bool = False):
        x_a, x_b = x[:, : self.half], x[:, self.half :]
        h = self.start(x_a) * mask
        h = self.net(h, mask, g.unsqueeze(-1) if g is not None else None)
        out = self.end(h)
        m, logs = out[:, : self.half], out[:, self.half :]
        if not torch.isfinite(logs).all():
            raise FlowNumericalError(self.block_index, "log-scale")
        if reverse:
            y_b = (x_b - m) * torch.exp(-logs) * mask
            logdet = -(logs * mask).sum(dim=(1, 2))
        else:
            y_b = (m + torch.exp(logs) * x_b) * mask
            logdet = (logs * mask).sum(dim=(1, 2))
        return torch.cat([x_a, y_b], dim=1), logdet


class FlowBlock(nn.Module):
    def __init__(self, index: int, channels: int, hidden: int, kernel_size: int,
                 n_layers: int, spk_dim: int, dilation_rate: int = 1,
                 dropout: float = 0.0, zero_init: bool = True, lu: bool = False,
                 ddi: bool = True):
        super().__init__()
        self.index = index
        self.actnorm = ActNorm(channels, ddi=ddi)
        self.mixing = InvertibleMixing(channels, lu=lu)
        self.mixing.block_index = index
        self.coupling = AffineCoupling(channels, hidden, kernel_size, n_layers, spk_dim,
                                       dilation_rate, dropout, zero_init)
        self.coupling.block_index = index

    def forward(self, x, mask, g=None, reverse: bool = False):
        parts = []
        if not reverse:
            x, ld = self.actnorm(x, mask)
            parts.append(ld)
            x, ld = self.mixing(x, mask)
            parts.append(ld)
            x, ld = self.coupling(x, mask, g)
            parts.append(ld)
        else:
            x, ld = self.coupling(x, mask, g, reverse=True)
            parts.append(ld)
            x, ld = self.mixing(x, mask, reverse=True)
            parts.append(ld)
            x, ld = self.actnorm(x, mask, reverse=True)
            parts.append(ld)
        return x, parts


@dataclass
class FlowState:
    z: torch.Tensor
    mask: torch.Tensor
    logdet: torch.Tensor
    truncated: bool = False
    contributions: list = field(default_factory=list)


class FlowDecoder(nn.Module):
    def __init__(
        self,
        in_channels: int = 80,
        hidden: int = 192,
        kernel_size: int = 5,
        n_blocks: int = 12,
        n_layers: int = 4,
        spk_dim: int = 256,
        dilation_rate: int = 1,
        dropout: float = 0.05,
        squeeze_factor: int = 2,
        zero_init: bool = True,
        lu: bool = False,
        ddi: bool = True,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.spk_dim = spk_dim
        self.squeeze_factor = squeeze_factor
        channels = in_channels * squeeze_factor
        self.blocks = nn.ModuleList(
            FlowBlock(i, channels, hidden, kernel_size, n_layers, spk_dim,
                      dilation_rate, dropout, zero_init, lu, ddi)
            for i in range(n_blocks)
        )

    def _check(self, x, mask, g):
        if x.dim() != 3 or x.shape[1] != self.in_channels:
            raise FlowError(f"expected (B, {self.in_channels}, T) input, got {tuple(x.shape)}")
        if mask is not None and (mask.shape[0] != x.shape[0] or mask.shape[-1] != x.shape[-1]):
            raise FlowError(f"mask shape {tuple(mask.shape)} does not match input {tuple(x.shape)}")
        if g is not None and (g.dim() != 2 or g.shape != (x.shape[0], self.spk_dim)):
            raise FlowError(f"speaker embedding must be (B, {self.spk_dim}), got {tuple(g.shape)}")

    def forward(self, mel, mask=None, g=None) -> FlowState:
        """Map mel ``(B, C, T)`` to latent ``z`` (same layout, even-length)."""
        self._check(mel, mask, g)
        x, x_mask, truncated = squeeze(mel, mask, self.squeeze_factor)
        logdet = torch.zeros(mel.shape[0], dtype=mel.dtype, device=mel.device)
        contributions = []
        for block in self.blocks:
            x, parts = block(x, x_mask, g)
            for p in parts:
                logdet = logdet + p
            contributions.extend(parts)
        z, z_mask = unsqueeze(x, x_mask, self.squeeze_factor)
        return FlowState(z, z_mask, logdet, truncated, contributions)

    def inverse(self, z, mask=None, g=None) -> torch.Tensor:
        self._check(z, mask, g)
        x, x_mask, _ = squeeze(z, mask, self.squeeze_factor)
        for block in reversed(self.blocks):
            x, _ = block(x, x_mask, g, reverse=True)
        mel, _ = unsqueeze(x, x_mask, self.squeeze_factor)
        return mel

    def reset_identity(self):
        """Make the whole decoder the identity map (logdet 0)."""
        with torch.no_grad():
            for block in self.blocks:
                block.actnorm.logs.zero_()
                block.actnorm.bias.zero_()
                block.actnorm.initialized.fill_(True)
                block.mixing.reset_identity()
                block.coupling.end.weight.zero_()
                block.coupling.end.bias.zero_()
        return self

    def randomize_coupling_outputs_(self, std: float = 0.02, generator=None):
        """Give the zero-initialised coupling heads small random weights."""
        with torch.no_grad():
            for block in self.blocks:
                w = block.coupling.end.weight
                w.copy_(torch.randn(w.shape, generator=generator, dtype=w.dtype) * std)
                b = block.coupling.end.bias
                b.copy_(torch.randn(b.shape, generator=generator, dtype=b.dtype) * std)
        return self


def prior_logprob(z, means, mask) -> torch.Tensor:
    """Sum of ``log N(z; means, 1)`` over unmasked positions (scalar)."""
    if z.shape != means.shape:
        raise FlowError(f"z {tuple(z.shape)} and means {tuple(means.shape)} differ in shape")
    return -0.5 * (((z - means) ** 2 + LOG_2PI) * mask).sum()
