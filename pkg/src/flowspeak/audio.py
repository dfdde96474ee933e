"""Waveform and log-mel spectrogram frontend.

All computations run in float64 with numpy; results are stored as float32.
Spectrogram matrices are laid out frames-first (``T x n_mels``).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

logger = logging.getLogger(__name__)

__all__ = [
    "Waveform",
    "MelConfig",
    "MelSpectrogram",
    "SPEAKER_ENCODER_MEL",
    "TTS_MEL",
    "resample",
    "trim_silence",
    "stft",
    "istft",
    "mel_filterbank",
    "mel_spectrogram",
    "read_wav",
    "write_wav",
    "save_mel",
    "load_mel",
]


class AudioError(ValueError):
    """Raised for malformed audio inputs."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise AudioError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def is_empty(self) -> bool:
        """True for the all-silent result of :func:`trim_silence`."""
        return len(self.samples) == 0


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.sample_rate / 2)
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise AudioError(
                "need 0 < hop_length <= win_length <= n_fft, got "
                f"{self.hop_length}, {self.win_length}, {self.n_fft}"
            )
        if self.n_mels < 1:
            raise AudioError("n_mels must be >= 1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise AudioError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}, {self.fmax}"
            )
        if self.log_floor <= 0:
            raise AudioError("log_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


SPEAKER_ENCODER_MEL = MelConfig(sample_rate=16000)
TTS_MEL = MelConfig(sample_rate=22050)


@dataclass
class MelSpectrogram:
    values: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)
    truncated: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.shape[1] != self.config.n_mels:
            raise AudioError(
                f"mel must be (frames, {self.config.n_mels}), got {values.shape}"
            )
        if values.shape[0] < 1:
            raise AudioError("mel must have at least one frame")
        if not np.all(np.isfinite(values)):
            raise AudioError("mel contains non-finite values")
        self.values = values

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def duration(self) -> float:
        return self.frames * self.config.hop_length / self.config.sample_rate


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling (Kaiser-windowed sinc)."""
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise AudioError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w
    ratio = Fraction(target_rate, w.sample_rate)
    if len(w) == 0:
        return Waveform(np.zeros(0, np.float32), target_rate)
    out = signal.resample_poly(
        w.samples.astype(np.float64), ratio.numerator, ratio.denominator
    )
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    out = out[:n_out]
    return Waveform(out.astype(np.float32), target_rate)


def _frame_rms(x: np.ndarray, frame_len: int) -> np.ndarray:
    n_frames = math.ceil(len(x) / frame_len)
    padded = np.zeros(n_frames * frame_len)
    padded[: len(x)] = x
    frames = padded.reshape(n_frames, frame_len)
    # partial tail frame is averaged over its real samples only
    counts = np.full(n_frames, frame_len, dtype=np.float64)
    counts[-1] = len(x) - (n_frames - 1) * frame_len
    return np.sqrt((frames**2).sum(axis=1) / counts)


def trim_silence(
    w: Waveform,
    frame_ms: float = 30.0,
    threshold_db: float = -40.0,
    pad_ms: float = 100.0,
) -> Waveform:
    """Energy-based voice activity trimming of leading/trailing silence.

    Frames are laid on a fixed grid starting at sample 0. Frames whose RMS is
    more than ``-threshold_db`` below the loudest frame are silent; the kept
    region spans the first to the last active frame, widened by ``pad_ms``
    rounded up to whole frames. Cuts fall on frame boundaries, which makes the
    operation idempotent.

    A fully silent input yields an empty waveform (``result.is_empty``).
    """
    if len(w) == 0:
        raise AudioError("cannot trim an empty waveform")
    frame_len = max(1, int(round(frame_ms * w.sample_rate / 1000)))
    pad_frames = math.ceil(pad_ms * w.sample_rate / 1000 / frame_len) if pad_ms > 0 else 0
    rms = _frame_rms(w.samples.astype(np.float64), frame_len)
    peak = rms.max()
    if peak <= 0:
        logger.warning("trim_silence: input is entirely silent")
        return Waveform(np.zeros(0, np.float32), w.sample_rate)
    level_db = 20 * np.log10(np.maximum(rms, 1e-300) / peak)
    active = np.flatnonzero(level_db >= threshold_db)
    first = max(0, active[0] - pad_frames)
    last = min(len(rms) - 1, active[-1] + pad_frames)
    start = first * frame_len
    stop = min(len(w), (last + 1) * frame_len)
    return Waveform(w.samples[start:stop], w.sample_rate)


@lru_cache(maxsize=16)
def _hann(win_length: int, n_fft: int) -> np.ndarray:
    win = signal.get_window("hann", win_length, fftbins=True)
    left = (n_fft - win_length) // 2
    out = np.zeros(n_fft)
    out[left : left + win_length] = win
    return out


def stft(x: np.ndarray, n_fft: int, hop_length: int, win_length: int) -> np.ndarray:
    """Centered STFT with reflect padding. Returns ``(frames, n_fft//2+1)`` complex."""
    x = np.asarray(x, dtype=np.float64)
    pad = n_fft // 2
    if len(x) <= pad:
        raise AudioError(f"signal of {len(x)} samples too short for reflect padding {pad}")
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + len(x) // hop_length
    idx = np.arange(n_fft)[None, :] + hop_length * np.arange(n_frames)[:, None]
    frames = xp[idx] * _hann(win_length, n_fft)
    return np.fft.rfft(frames, n=n_fft, axis=1)


def istft(
    spec: np.ndarray, hop_length: int, win_length: int, length: int | None = None
) -> np.ndarray:
    """Inverse of :func:`stft` by windowed overlap-add."""
    n_frames, n_bins = spec.shape
    n_fft = 2 * (n_bins - 1)
    window = _hann(win_length, n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    total = n_fft + hop_length * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        s = t * hop_length
        out[s : s + n_fft] += frames[t]
        norm[s : s + n_fft] += window**2
    out /= np.where(norm > 1e-11, norm, 1.0)
    pad = n_fft // 2
    out = out[pad:]
    if length is None:
        length = hop_length * (n_frames - 1)
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out[:length]


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        f >= min_log_hz,
        min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
        f / f_sp,
    )


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), m * f_sp
    )


def mel_band_centers(cfg: MelConfig) -> np.ndarray:
    """Center frequency in Hz of each triangular band."""
    pts = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


@lru_cache(maxsize=16)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Area-normalized triangular filters, shape ``(n_mels, n_fft//2+1)``."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    pts = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fdiff = np.diff(pts)
    ramps = pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (pts[2:] - pts[:-2]))[:, None]
    weights.flags.writeable = False
    return weights


def mel_spectrogram(w: Waveform, cfg: MelConfig) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise AudioError(
            f"waveform rate {w.sample_rate} does not match config rate {cfg.sample_rate}"
        )
    if len(w) < cfg.win_length:
        raise AudioError(
            f"waveform of {len(w)} samples is shorter than one window ({cfg.win_length})"
        )
    mag = np.abs(stft(w.samples, cfg.n_fft, cfg.hop_length, cfg.win_length))
    mel = mag @ mel_filterbank(cfg).T
    values = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(values.astype(np.float32), cfg)


def read_wav(path) -> Waveform:
    """Read a mono WAV (PCM 16-bit or 32-bit float)."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, pcm)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_mel(path, mel: MelSpectrogram) -> Path:
    """Write little-endian float32 frames-major binary plus a JSON sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(mel.values, dtype="<f4").tobytes())
    meta = {
        "frames": mel.frames,
        "n_mels": mel.config.n_mels,
        "sample_rate": mel.config.sample_rate,
        "hop_length": mel.config.hop_length,
    }
    _sidecar(path).write_text(json.dumps(meta))
    return path


def load_mel(path, cfg: MelConfig | None = None) -> MelSpectrogram:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    values = np.frombuffer(path.read_bytes(), dtype="<f4")
    values = values.reshape(meta["frames"], meta["n_mels"])
    if cfg is None:
        cfg = MelConfig(
            sample_rate=meta["sample_rate"],
            hop_length=meta["hop_length"],
            n_mels=meta["n_mels"],
        )
    return MelSpectrogram(values.copy(), cfg)
