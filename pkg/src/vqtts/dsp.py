"""Audio I/O, spectral analysis, Griffin-Lim synthesis and noise mixing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from . import diffcore as dc
from .exceptions import AudioFormatError, ShapeError


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("audio samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 512
    window: str = "hann"
    n_mels: int = 40
    fmin: float = 0.0
    fmax: float | None = None
    sample_rate: int = 16000

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ValueError(
                f"need 0 < hop ({self.hop_length}) <= window ({self.win_length}) <= n_fft ({self.n_fft})"
            )
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples):
        return 1 + (n_samples - self.win_length) // self.hop_length

    def n_samples(self, n_frames):
        return (n_frames - 1) * self.hop_length + self.win_length


@dataclass
class Spectrogram:
    values: np.ndarray
    kind: str = "linear"
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"spectrogram must be (frames, bins), got {self.values.shape}")
        if self.kind not in ("linear", "mel"):
            raise ValueError(f"unknown spectrogram kind {self.kind!r}")

    @property
    def n_frames(self):
        return self.values.shape[0]


# ----------------------------------------------------------------------
# WAV I/O
# ----------------------------------------------------------------------


def read_wav(path):
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: malformed WAV ({exc})") from exc
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: unsupported channels ({data.shape[1]})")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")
    return AudioBuffer(samples, int(rate))


def write_wav(audio, path, bits=16):
    x = np.clip(audio.samples, -1.0, 1.0)
    if bits == 16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    elif bits == 32:
        data = x.astype("<f4")
    else:
        raise AudioFormatError(f"unsupported bit depth {bits}")
    wavfile.write(path, audio.sample_rate, data)


# ----------------------------------------------------------------------
# STFT and mel features
# ----------------------------------------------------------------------


def _window(cfg):
    return get_window(cfg.window, cfg.win_length, fftbins=True)


def _frames(samples, cfg):
    n = cfg.n_frames(samples.size)
    idx = np.arange(n)[:, None] * cfg.hop_length + np.arange(cfg.win_length)[None, :]
    return samples[idx]


def stft_complex(samples, cfg):
    if samples.size < cfg.win_length:
        raise ShapeError(f"signal of {samples.size} samples is shorter than one window ({cfg.win_length})")
    return np.fft.rfft(_frames(samples, cfg) * _window(cfg), n=cfg.n_fft, axis=-1)


def stft(audio, cfg=StftConfig()):
    """Magnitude STFT without centre padding: T = 1 + (N - win) // hop frames."""
    return Spectrogram(np.abs(stft_complex(audio.samples, cfg)), "linear", cfg)


def istft(spec, cfg, length=None):
    """Least-squares inverse of ``stft_complex`` (weighted overlap-add)."""
    n_frames = spec.shape[0]
    win = _window(cfg)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1)[:, : cfg.win_length] * win
    total = cfg.n_samples(n_frames)
    out = np.zeros(total)
    norm = np.zeros(total)
    idx = np.arange(n_frames)[:, None] * cfg.hop_length + np.arange(cfg.win_length)[None, :]
    np.add.at(out, idx, frames)
    np.add.at(norm, idx, np.broadcast_to(win * win, frames.shape))
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    if length is not None:
        out = out[:length] if out.size >= length else np.pad(out, (0, length - out.size))
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """Triangular filters (n_mels, n_bins) with peaks evenly spaced on the mel scale."""
    if cfg.n_mels > cfg.n_bins:
        raise ShapeError(f"{cfg.n_mels} mel bands exceed {cfg.n_bins} linear bins")
    fmax = cfg.sample_rate / 2 if cfg.fmax is None else cfg.fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_project(spec, cfg=None):
    if spec.kind != "linear":
        raise ValueError("mel_project expects a linear spectrogram")
    cfg = spec.config if cfg is None else cfg
    fb = mel_filterbank(cfg)
    if spec.values.shape[1] != fb.shape[1]:
        raise ShapeError(f"spectrogram has {spec.values.shape[1]} bins, filterbank expects {fb.shape[1]}")
    return Spectrogram(spec.values @ fb.T, "mel", cfg)


# Feature scaling shared by the encoder input and the decoder target.
MIN_DB = -80.0
MAX_DB = 40.0


def compress(magnitude):
    """Map magnitudes to [0, 1] on a dB scale."""
    db = 20.0 * np.log10(np.maximum(magnitude, 10.0 ** (MIN_DB / 20.0)))
    return np.clip((db - MIN_DB) / (MAX_DB - MIN_DB), 0.0, 1.0)


def decompress(features):
    db = np.clip(features, 0.0, 1.0) * (MAX_DB - MIN_DB) + MIN_DB
    return 10.0 ** (db / 20.0)


# ----------------------------------------------------------------------
# Griffin-Lim
# ----------------------------------------------------------------------


def _hermitian_norm(x, n_fft):
    w = np.full(x.shape[-1], 2.0)
    w[0] = 1.0
    if n_fft % 2 == 0:
        w[-1] = 1.0
    return float(np.sqrt((w * np.abs(x) ** 2).sum()))


def griffin_lim(spec, iterations=60, momentum=0.99, trace=None):
    """Estimate a waveform whose STFT magnitude approximates ``spec``.

    Iteration 0 is the inverse with zero phase. Each iteration imposes the
    target magnitude and re-estimates the signal by least-squares inversion.
    With ``momentum > 0`` the fast Griffin-Lim extrapolation is applied; an
    iteration whose distance would increase is redone as a plain step from
    the last estimate (momentum reset), so the distance is non-increasing.
    ``momentum=0`` gives the plain algorithm.

    If ``trace`` is a list, the distance || |STFT(x_i)| - S || after each
    estimate is appended. The norm counts every bin of the two-sided
    spectrum, the space in which the plain update is a least-squares
    projection.
    """
    if spec.kind != "linear":
        raise ValueError("griffin_lim expects a linear spectrogram")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    S = spec.values
    if np.any(S < 0):
        raise ValueError("magnitude spectrogram has negative entries")
    cfg = spec.config

    def impose(X):
        mag = np.abs(X)
        with np.errstate(invalid="ignore", divide="ignore"):
            return S * np.where(mag > 0, X / mag, 1.0)

    def realise(coeffs):
        y = istft(coeffs, cfg)
        Y = stft_complex(y, cfg)
        return y, Y, _hermitian_norm(np.abs(Y) - S, cfg.n_fft)

    x, X, dist = realise(S.astype(np.complex128))
    if trace is not None:
        trace.append(dist)
    state = X
    for _ in range(iterations):
        y, Y, d = realise(impose(state))
        if d > dist:
            y, Y, d = realise(impose(X))
            state = Y
        else:
            state = Y + momentum * (Y - X) if momentum > 0 else Y
        x, X, dist = y, Y, d
        if trace is not None:
            trace.append(dist)
    return AudioBuffer(np.clip(x, -1.0, 1.0), cfg.sample_rate)


def spectral_error(audio, spec):
    """Relative magnitude error || |STFT(x)| - S || / || S || (two-sided norm)."""
    mag = stft(audio, spec.config).values
    n = min(mag.shape[0], spec.values.shape[0])
    num = _hermitian_norm(mag[:n] - spec.values[:n], spec.config.n_fft)
    den = _hermitian_norm(spec.values[:n], spec.config.n_fft)
    return num / den if den > 0 else 0.0


# ----------------------------------------------------------------------
# losses and noise
# ----------------------------------------------------------------------


def differential_spectral_loss(pred, target, mask=None, diff_weight=1.0):
    """MSE plus MSE of first differences along time.

    ``pred`` is a Tensor shaped (..., T, F); ``mask`` optionally marks valid
    frames with shape (..., T).
    """
    pred = dc.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"spectral loss: prediction {pred.shape} vs target {target.shape}")
    axis = pred.ndim - 2
    m = None if mask is None else np.asarray(mask, dtype=np.float64)[..., None]
    loss = dc.mse(pred, target, m)
    if diff_weight and pred.shape[axis] > 1:
        n = pred.shape[axis]
        md = None
        if m is not None:
            md = m.take(np.arange(1, n), axis=axis) * m.take(np.arange(n - 1), axis=axis)
        dt = np.diff(target, axis=axis)
        loss = dc.add(loss, dc.mul(dc.mse(dc.temporal_diff(pred, axis=axis), dt, md), diff_weight))
    return loss


def signal_power(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x)) if x.size else 0.0


def fit_noise(noise, length):
    """Tile or crop noise to ``length`` samples, always starting at sample 0."""
    n = np.asarray(noise, dtype=np.float64)
    if n.size == 0:
        raise AudioFormatError("noise buffer is empty")
    reps = -(-length // n.size)
    return np.tile(n, reps)[:length]


def mix_noise(clean, noise, snr_db):
    """Add noise scaled to the requested SNR; ``snr_db=inf`` returns clean unchanged."""
    if math.isinf(snr_db) and snr_db > 0:
        return AudioBuffer(clean.samples.copy(), clean.sample_rate)
    pc = signal_power(clean.samples)
    if pc == 0.0:
        raise ValueError("clean signal has zero power; SNR undefined")
    n = fit_noise(noise.samples if isinstance(noise, AudioBuffer) else noise, clean.samples.size)
    pn = signal_power(n)
    if pn == 0.0:
        raise ValueError("noise has zero power")
    gain = math.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0)))
    return AudioBuffer(np.clip(clean.samples + gain * n, -1.0, 1.0), clean.sample_rate)


def measure_snr(clean, mixed):
    c = clean.samples if isinstance(clean, AudioBuffer) else np.asarray(clean)
    m = mixed.samples if isinstance(mixed, AudioBuffer) else np.asarray(mixed)
    return 10.0 * math.log10(signal_power(c) / signal_power(m - c))
