"""Phonetic encoder: mel frames -> frame-level continuous representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .exceptions import ShapeError
from .layers import glorot, gru_args, gru_params, time_mask, zeros


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 40
    conv_channels: tuple = (64, 64)
    kernel: int = 5
    downsample: int = 2
    hidden: int = 128
    dim: int = 64

    def __post_init__(self):
        if self.downsample < 1:
            raise ValueError("downsample factor must be >= 1")
        if not self.conv_channels:
            raise ValueError("at least one convolution layer is required")

    def out_length(self, n_frames):
        return -(-int(n_frames) // self.downsample)


@dataclass
class FrameRepresentation:
    values: np.ndarray
    utterance_id: str | None = None


class PhoneticEncoder:
    """Convolutions (the last one strided), a GRU, and a projection to the codeword dimension."""

    def __init__(self, config=EncoderConfig(), rng=None, params=None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = self.init_params(config, rng)
        self.params = params

    @staticmethod
    def init_params(cfg, rng):
        p = {}
        n_in = cfg.n_mels
        for i, ch in enumerate(cfg.conv_channels):
            p[f"enc.conv{i}.w"] = glorot(rng, (cfg.kernel, n_in, ch))
            p[f"enc.conv{i}.b"] = zeros(ch)
            n_in = ch
        p.update(gru_params(rng, "enc.gru", n_in, cfg.hidden))
        p["enc.proj.w"] = glorot(rng, (cfg.hidden, cfg.dim))
        p["enc.proj.b"] = zeros(cfg.dim)
        return p

    def __call__(self, mel, lengths=None):
        """Encode a padded batch (B, T, n_mels); returns (H (B, T', D), T' per item)."""
        cfg, p = self.config, self.params
        x = dc.as_tensor(mel)
        if x.ndim != 3 or x.shape[2] != cfg.n_mels:
            raise ShapeError(f"encoder expects (B, T, {cfg.n_mels}) mel input, got {x.shape}")
        B, T, _ = x.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        n = len(cfg.conv_channels)
        for i in range(n):
            stride = cfg.downsample if i == n - 1 else 1
            x = dc.relu(dc.conv1d(x, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], stride=stride))
            cur = lengths if stride == 1 else np.array([cfg.out_length(t) for t in lengths])
            # zero the padded tail so batch padding matches convolution padding
            x = dc.mul(x, time_mask(cur, x.shape[1])[..., None])
        h = dc.gru_sequence(x, *gru_args(p, "enc.gru"))
        out_lengths = np.array([cfg.out_length(t) for t in lengths])
        return dc.linear(h, p["enc.proj.w"], p["enc.proj.b"]), out_lengths

    def encode(self, mel, utterance_id=None):
        """Encode one mel spectrogram (T, n_mels) or ``Spectrogram``."""
        values = getattr(mel, "values", mel)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.config.n_mels:
            raise ShapeError(f"expected {self.config.n_mels} mel bands, got input of shape {values.shape}")
        H, _ = self(values[None])
        return FrameRepresentation(H.data[0], utterance_id)
