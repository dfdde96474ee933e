"""Monotonic alignment search between per-token Gaussian priors and latents."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

LOG_2PI = math.log(2 * math.pi)


class AlignmentError(ValueError):
    pass


class UnalignableError(AlignmentError):
    def __init__(self, n_tokens: int, n_frames: int):
        super().__init__(f"unalignable: {n_tokens} tokens cannot cover {n_frames} frames monotonically")
        self.n_tokens = n_tokens
        self.n_frames = n_frames


@dataclass(frozen=True)
class Alignment:
    """``path[j]`` is the token index of frame ``j`` (0-based)."""

    path: np.ndarray
    n_tokens: int

    @property
    def durations(self) -> np.ndarray:
        return np.bincount(self.path, minlength=self.n_tokens)

    def validate(self) -> None:
        p = self.path
        if len(p) == 0 or p[0] != 0 or p[-1] != self.n_tokens - 1:
            raise AlignmentError("path must start at the first token and end at the last")
        steps = np.diff(p)
        if np.any((steps != 0) & (steps != 1)):
            raise AlignmentError("path steps must be 0 or 1")
        if np.any(self.durations < 1):
            raise AlignmentError("every token needs at least one frame")


# cells touched by the DP loop, for complexity checks
dp_counter = {"cells": 0}


def likelihoods(prior_mean, z, token_mask=None, frame_mask=None) -> np.ndarray:
    """``L[i, j] = -1/2 sum_c (z[j, c] - mu[i, c])^2 + log 2pi``.

    Inputs are frames-first ``(T_text, C)`` and ``(T_mel, C)``; masks, when
    given, trim the matrix to the valid lengths. Computed in float64.
    """
    mu = np.asarray(prior_mean.detach().cpu() if torch.is_tensor(prior_mean) else prior_mean, dtype=np.float64)
    zz = np.asarray(z.detach().cpu() if torch.is_tensor(z) else z, dtype=np.float64)
    if mu.ndim != 2 or zz.ndim != 2 or mu.shape[1] != zz.shape[1]:
        raise AlignmentError(f"shape mismatch: prior {mu.shape} vs latent {zz.shape}")
    if token_mask is not None:
        mu = mu[: int(np.asarray(token_mask).sum())]
    if frame_mask is not None:
        zz = zz[: int(np.asarray(frame_mask).sum())]
    sq = ((zz[None, :, :] - mu[:, None, :]) ** 2 + LOG_2PI).sum(-1)
    return -0.5 * sq


def mas(L) -> Alignment:
    """Best monotonic, complete path through ``L`` (``T_text x T_mel``).

    ``Q[i, j] = L[i, j] + max(Q[i-1, j-1], Q[i, j-1])``; backtracking keeps
    the current token on ties.
    """
    L = np.asarray(L, dtype=np.float64)
    n_tok, n_frm = L.shape
    if n_tok < 1 or n_frm < 1:
        raise AlignmentError("empty likelihood matrix")
    if n_tok > n_frm:
        raise UnalignableError(n_tok, n_frm)
    neg = -np.inf
    Q = np.full((n_tok, n_frm), neg)
    Q[0, 0] = L[0, 0]
    dp_counter["cells"] += 1
    for j in range(1, n_frm):
        # only tokens i <= j are reachable, and tokens i >= n_tok - (n_frm - j) can still finish
        lo = max(0, n_tok - (n_frm - j))
        hi = min(n_tok - 1, j)
        stay = Q[lo : hi + 1, j - 1]
        if lo == 0:
            move = np.concatenate(([neg], Q[: hi, j - 1]))
        else:
            move = Q[lo - 1 : hi, j - 1]
        Q[lo : hi + 1, j] = L[lo : hi + 1, j] + np.maximum(stay, move)
        dp_counter["cells"] += hi - lo + 1
    path = np.empty(n_frm, dtype=np.int64)
    i = n_tok - 1
    for j in range(n_frm - 1, -1, -1):
        path[j] = i
        if j == 0:
            break
        if i > 0 and (i == j or Q[i - 1, j - 1] > Q[i, j - 1]):
            i -= 1
    return Alignment(path, n_tok)


def path_score(L, alignment: Alignment) -> float:
    """Sum of ``L`` along the path, accumulated frame by frame."""
    L = np.asarray(L, dtype=np.float64)
    total = 0.0
    for j, i in enumerate(alignment.path):
        total += L[i, j]
    return total


def durations_to_path(durations) -> np.ndarray:
    d = np.asarray(durations, dtype=np.int64)
    return np.repeat(np.arange(len(d)), d)


def expand_by_durations(prior_mean, durations):
    """Repeat row ``i`` of ``prior_mean`` ``durations[i]`` times.

    Works on frames-first numpy arrays or tensors.
    """
    d = np.asarray(durations.cpu() if torch.is_tensor(durations) else durations, dtype=np.int64)
    if d.ndim != 1 or len(d) != len(prior_mean):
        raise AlignmentError("one duration per token required")
    if np.any(d < 1):
        raise AlignmentError("durations must be >= 1")
    if torch.is_tensor(prior_mean):
        return torch.repeat_interleave(prior_mean, torch.as_tensor(d, device=prior_mean.device), dim=0)
    return np.repeat(np.asarray(prior_mean), d, axis=0)


def durations_to_attention(durations, n_frames: int, dtype=torch.float32) -> torch.Tensor:
    """Hard alignment matrix ``(T_text, n_frames)`` from durations (zero-padded)."""
    d = torch.as_tensor(np.asarray(durations), dtype=torch.long)
    n_tok = len(d)
    attn = torch.zeros(n_tok, n_frames, dtype=dtype)
    ends = torch.cumsum(d, 0)
    starts = ends - d
    for i in range(n_tok):
        attn[i, int(starts[i]) : min(int(ends[i]), n_frames)] = 1
    return attn


def dump_alignments(path, records) -> None:
    """Write ``{"utterance": id, "durations": [...]}`` JSON lines."""
    with Path(path).open("w") as f:
        for utt, durations in records:
            f.write(json.dumps({"utterance": utt, "durations": [int(x) for x in durations]}) + "\n")


def load_alignments(path) -> dict:
    out = {}
    with Path(path).open() as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["utterance"]] = rec["durations"]
    return out
