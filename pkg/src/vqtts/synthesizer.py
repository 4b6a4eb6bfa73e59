"""Speaker-conditioned attention decoder: code sequences -> linear spectrograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import dsp
from .exceptions import ShapeError, UnknownSpeakerError
from .layers import constant, glorot, gru_args, gru_params, time_mask, zeros
from .quantizer import CodeSequence, phonetic_clustering, pool_segments

NEG_INF_MASK = -1e9
FORWARD_FLOOR = 1e-20


@dataclass(frozen=True)
class DecoderConfig:
    code_dim: int = 64
    enc_channels: int = 128
    enc_kernel: int = 5
    attention_dim: int = 64
    location_kernel: int = 7
    attention: str = "forward"
    prenet: tuple = (128, 64)
    prenet_dropout: float = 0.5
    rnn1: int = 128
    rnn2: int = 128
    postnet_layers: int = 5
    postnet_channels: int = 32
    postnet_kernel: int = 5
    n_bins: int = 257
    reduction: int = 2
    max_frames: int = 400
    max_frames_per_code: int = 32
    stop_threshold: float = 0.5
    speaker_dim: int = 32

    def __post_init__(self):
        if self.postnet_layers < 2:
            raise ValueError("postnet needs at least two convolution layers")
        if self.reduction < 1:
            raise ValueError("reduction factor must be >= 1")
        if self.attention not in ("forward", "location"):
            raise ValueError(f"unknown attention variant {self.attention!r}")


class SpeakerTable:
    """K x d_s learnable speaker embeddings with an id -> row map."""

    def __init__(self, speakers, weights):
        speakers = tuple(str(s) for s in speakers)
        if len(set(speakers)) != len(speakers):
            raise ValueError("duplicate speaker ids")
        w = weights if isinstance(weights, dc.Tensor) else dc.Tensor(weights, requires_grad=True)
        if w.ndim != 2 or w.shape[0] != len(speakers):
            raise ShapeError(f"speaker table shape {w.shape} does not match {len(speakers)} speakers")
        self.speakers = speakers
        self.weights = w
        self._rows = {s: i for i, s in enumerate(speakers)}

    @classmethod
    def random(cls, speakers, dim, rng):
        speakers = tuple(speakers)
        return cls(speakers, rng.normal(size=(len(speakers), dim)))

    def __len__(self):
        return len(self.speakers)

    def __contains__(self, speaker):
        return speaker in self._rows

    def row(self, speaker):
        try:
            return self._rows[speaker]
        except KeyError:
            raise UnknownSpeakerError(f"unknown speaker {speaker!r}") from None

    def rows(self, speakers):
        return np.array([self.row(s) for s in speakers], dtype=np.int64)


@dataclass
class AffineConditioner:
    w_gamma: dc.Tensor
    b_gamma: dc.Tensor
    w_beta: dc.Tensor
    b_beta: dc.Tensor

    @classmethod
    def init(cls, speaker_dim, width, rng, scale=0.01):
        # gamma starts near 1 and beta near 0 so the first layer passes through
        return cls(
            dc.Tensor(rng.normal(0, scale, (speaker_dim, width)), requires_grad=True),
            constant(1.0, width),
            dc.Tensor(rng.normal(0, scale, (speaker_dim, width)), requires_grad=True),
            zeros(width),
        )

    @property
    def width(self):
        return self.b_gamma.shape[0]


def affine_params(s, cond):
    """gamma = relu(s W_g + b_g), beta = s W_b + b_b for embeddings s (..., d_s)."""
    s = dc.as_tensor(s)
    if s.shape[-1] != cond.w_gamma.shape[0]:
        raise ShapeError(f"speaker embedding width {s.shape[-1]} != conditioner input {cond.w_gamma.shape[0]}")
    gamma = dc.relu(dc.linear(s, cond.w_gamma, cond.b_gamma))
    beta = dc.linear(s, cond.w_beta, cond.b_beta)
    return gamma, beta


def apply_affine(m, gamma, beta):
    """gamma * (m - beta)."""
    m, gamma, beta = dc.as_tensor(m), dc.as_tensor(gamma), dc.as_tensor(beta)
    if m.shape[-1] != gamma.shape[-1] or m.shape[-1] != beta.shape[-1]:
        raise ShapeError(f"affine width mismatch: state {m.shape[-1]}, gamma {gamma.shape[-1]}, beta {beta.shape[-1]}")
    return dc.mul(gamma, dc.sub(m, beta))


@dataclass
class DecoderOutput:
    """Batched decoder tensors; frame axes are padded to a multiple of the reduction factor."""

    frames: dc.Tensor
    post: dc.Tensor
    stop_logits: dc.Tensor
    alignments: np.ndarray
    n_frames: np.ndarray
    attention: dc.Tensor | None = None


@dataclass
class SynthesisOutput:
    spectrogram: dsp.Spectrogram
    stop_probs: np.ndarray
    alignment: np.ndarray


class SpeakerSynthesizer:
    """Code encoder, two-layer attention decoder with affine speaker conditioning, residual postnet."""

    def __init__(self, speakers, config=DecoderConfig(), rng=None, params=None, table=None, conditioner=None):
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = self.init_params(config, rng) if params is None else params
        self.speakers = table if table is not None else SpeakerTable.random(speakers, config.speaker_dim, rng)
        self.conditioner = conditioner if conditioner is not None else AffineConditioner.init(
            config.speaker_dim, config.rnn1, rng
        )

    @staticmethod
    def init_params(cfg, rng):
        p = {}
        C, A, F, r = cfg.enc_channels, cfg.attention_dim, cfg.n_bins, cfg.reduction
        p["dec.codeconv.w"] = glorot(rng, (cfg.enc_kernel, cfg.code_dim, C))
        p["dec.codeconv.b"] = zeros(C)
        p.update(gru_params(rng, "dec.codegru", C, C))
        n_in = F
        for i, width in enumerate(cfg.prenet):
            p[f"dec.prenet{i}.w"] = glorot(rng, (n_in, width))
            p[f"dec.prenet{i}.b"] = zeros(width)
            n_in = width
        p.update(gru_params(rng, "dec.rnn1", n_in + C, cfg.rnn1))
        p.update(gru_params(rng, "dec.rnn2", cfg.rnn1 + C, cfg.rnn2))
        p["dec.att.memory"] = glorot(rng, (C, A))
        p["dec.att.query"] = glorot(rng, (cfg.rnn1, A))
        p["dec.att.location"] = glorot(rng, (cfg.location_kernel, 2, A))
        p["dec.att.v"] = glorot(rng, (A, 1))
        out_in = cfg.rnn2 + C
        p["dec.proj.w"] = glorot(rng, (out_in, r * F))
        p["dec.proj.b"] = zeros(r * F)
        p["dec.stop.w"] = glorot(rng, (out_in, 1))
        p["dec.stop.b"] = zeros(1)
        n_in = F
        for i in range(cfg.postnet_layers):
            out = F if i == cfg.postnet_layers - 1 else cfg.postnet_channels
            p[f"dec.postnet{i}.w"] = glorot(rng, (cfg.postnet_kernel, n_in, out))
            p[f"dec.postnet{i}.b"] = zeros(out)
            n_in = out
        return p

    def parameters(self):
        out = dict(self.params)
        out["spk.table"] = self.speakers.weights
        c = self.conditioner
        out.update({"cond.w_gamma": c.w_gamma, "cond.b_gamma": c.b_gamma, "cond.w_beta": c.w_beta, "cond.b_beta": c.b_beta})
        return out

    # -- building blocks ------------------------------------------------

    def _encode_codes(self, codes, code_mask):
        p = self.params
        m = code_mask[..., None]
        x = dc.mul(dc.relu(dc.conv1d(dc.mul(codes, m), p["dec.codeconv.w"], p["dec.codeconv.b"])), m)
        return dc.gru_sequence(x, *gru_args(p, "dec.codegru"))

    def _prenet(self, x, rng):
        cfg, p = self.config, self.params
        for i in range(len(cfg.prenet)):
            x = dc.relu(dc.linear(x, p[f"dec.prenet{i}.w"], p[f"dec.prenet{i}.b"]))
            x = dc.dropout(x, cfg.prenet_dropout, rng)
        return x

    def _postnet(self, frames, mask):
        cfg, p = self.config, self.params
        x = dc.mul(frames, mask[..., None])
        for i in range(cfg.postnet_layers):
            x = dc.conv1d(x, p[f"dec.postnet{i}.w"], p[f"dec.postnet{i}.b"])
            if i < cfg.postnet_layers - 1:
                x = dc.tanh(x)
        return dc.add(frames, x)

    @staticmethod
    def _forward_prior(align, n, B, S):
        """log of (stay + advance-by-one) mass from the previous alignment."""
        if n == 0:
            start = np.full((B, S), np.log(FORWARD_FLOOR))
            start[:, 0] = 0.0
            return dc.Tensor(start)
        shifted = dc.concat([dc.Tensor(np.zeros((B, 1))), dc.getitem(align, (slice(None), slice(0, S - 1)))], axis=1)
        return dc.log(dc.add(dc.add(align, shifted), FORWARD_FLOOR))

    def _project(self, out):
        p = self.params
        return dc.linear(out, p["dec.proj.w"], p["dec.proj.b"]), dc.linear(out, p["dec.stop.w"], p["dec.stop.b"])

    # -- decoding -------------------------------------------------------

    def decode(self, codes, code_mask, speaker_rows, target=None, target_lengths=None, rng=None, max_frames=None):
        """Run the decoder over a padded batch of code vectors (B, S, D).

        With ``target`` (B, T, F) the decoder is teacher-forced for
        ceil(T / r) steps; otherwise it runs free until every item's stop
        probability exceeds the threshold or ``max_frames`` is reached.
        """
        cfg, p = self.config, self.params
        rng = np.random.default_rng(0) if rng is None else rng
        codes = dc.as_tensor(codes)
        code_mask = np.asarray(code_mask, dtype=np.float64)
        if codes.ndim != 3 or codes.shape[2] != cfg.code_dim:
            raise ShapeError(f"decoder expects codes (B, S, {cfg.code_dim}), got {codes.shape}")
        B, S, _ = codes.shape
        r, F = cfg.reduction, cfg.n_bins
        memory = self._encode_codes(codes, code_mask)
        pm = dc.matmul(memory, p["dec.att.memory"])
        s = dc.embedding(self.speakers.weights, speaker_rows)
        gamma, beta = affine_params(s, self.conditioner)
        att_bias = (1.0 - code_mask) * NEG_INF_MASK

        teacher = target is not None
        if teacher:
            target = np.asarray(target, dtype=np.float64)
            if target.ndim != 3 or target.shape[0] != B or target.shape[2] != F:
                raise ShapeError(f"teacher target must be (B={B}, T, {F}), got {target.shape}")
            T = target.shape[1]
            n_steps = -(-T // r)
            prev = np.zeros((B, n_steps, F))
            prev[:, 1:] = target[:, r - 1 : (n_steps - 1) * r : r]
            pre_all = self._prenet(dc.Tensor(prev), rng)
        else:
            max_frames = cfg.max_frames if max_frames is None else max_frames
            caps = np.full(B, max_frames)
            if cfg.max_frames_per_code:
                caps = np.minimum(caps, cfg.max_frames_per_code * code_mask.sum(axis=1).astype(int))
            n_steps = max(1, int(caps.max()) // r)

        h1 = dc.Tensor(np.zeros((B, cfg.rnn1)))
        h2 = dc.Tensor(np.zeros((B, cfg.rnn2)))
        ctx = dc.Tensor(np.zeros((B, cfg.enc_channels)))
        align = dc.Tensor(np.zeros((B, S)))
        cum = dc.Tensor(np.zeros((B, S)))
        last = np.zeros((B, F))
        outs, aligns, frames, stops, att = [], [], [], [], []
        stopped = np.full(B, -1)
        for n in range(n_steps):
            if teacher:
                x = dc.getitem(pre_all, (slice(None), n))
            else:
                x = self._prenet(dc.Tensor(last), rng)
            h1 = dc.gru_step(dc.concat([x, ctx]), h1, *gru_args(p, "dec.rnn1"))
            m = apply_affine(h1, gamma, beta)
            q = dc.matmul(m, p["dec.att.query"])
            loc = dc.conv1d(dc.stack([align, cum], axis=-1), p["dec.att.location"])
            e = dc.tanh(dc.add(dc.add(pm, dc.reshape(q, (B, 1, -1))), loc))
            energy = dc.add(dc.reshape(dc.matmul(e, p["dec.att.v"]), (B, S)), att_bias)
            if cfg.attention == "forward":
                energy = dc.add(energy, self._forward_prior(align, n, B, S))
            align = dc.softmax(energy, axis=-1)
            cum = dc.add(cum, align)
            ctx = dc.reshape(dc.matmul(dc.reshape(align, (B, 1, S)), memory), (B, -1))
            h2 = dc.gru_step(dc.concat([m, ctx]), h2, *gru_args(p, "dec.rnn2"))
            out = dc.concat([h2, ctx])
            aligns.append(align.data)
            if teacher:
                outs.append(out)
                att.append(align)
                continue
            fr, st = self._project(out)
            frames.append(dc.reshape(fr, (B, r, F)))
            stops.append(st)
            last = fr.data[:, -F:]
            prob = 1.0 / (1.0 + np.exp(-st.data[:, 0]))
            stopped[(stopped < 0) & ((prob > cfg.stop_threshold) | ((n + 1) * r >= caps))] = n
            if np.all(stopped >= 0):
                break

        if teacher:
            fr, st = self._project(dc.stack(outs, axis=1))
            frames_t = dc.reshape(fr, (B, n_steps * r, F))
            stop_logits = dc.reshape(st, (B, n_steps))
            lengths = np.full(B, T) if target_lengths is None else np.asarray(target_lengths)
        else:
            frames_t = dc.concat(frames, axis=1)
            stop_logits = dc.concat(stops, axis=1)
            done = len(frames)
            lengths = np.where(stopped >= 0, stopped + 1, done) * r
            lengths = np.minimum(lengths, caps)
        post = self._postnet(frames_t, time_mask(lengths, frames_t.shape[1]))
        attention = dc.stack(att, axis=1) if teacher else None
        return DecoderOutput(frames_t, post, stop_logits, np.stack(aligns, axis=1), lengths, attention)

    def synthesize(self, codes, speaker_id, target=None, seed=0, max_frames=None):
        """Synthesise one utterance from a ``CodeSequence`` (or (S, D) array)."""
        vectors = codes.vectors if isinstance(codes, CodeSequence) else np.asarray(codes, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise ShapeError("synthesis needs a non-empty code sequence")
        row = self.speakers.rows([speaker_id])
        tgt = None
        if target is not None:
            tgt = np.asarray(getattr(target, "values", target), dtype=np.float64)[None]
        out = self.decode(
            vectors[None], np.ones((1, vectors.shape[0])), row, target=tgt,
            rng=np.random.default_rng(seed), max_frames=max_frames,
        )
        n = int(out.n_frames[0])
        steps = -(-n // self.config.reduction)
        spec = dsp.Spectrogram(out.post.data[0, :n].copy(), "linear", None)
        probs = 1.0 / (1.0 + np.exp(-out.stop_logits.data[0, :steps]))
        return SynthesisOutput(spec, probs, out.alignments[0, :steps])


def stop_targets(lengths, n_steps, reduction):
    """1 from the step that emits the last valid frame onwards, else 0."""
    steps = np.arange(n_steps)[None, :]
    last = (-(-np.asarray(lengths) // reduction) - 1)[:, None]
    return (steps >= last).astype(np.float64)


def guided_attention_loss(attention, n_steps, n_codes, width=0.2):
    """Mean attention mass placed far from the diagonal of each (steps x codes) grid.

    ``attention`` is (B, N, S); rows beyond ``n_steps[b]`` and columns beyond
    ``n_codes[b]`` are ignored. The penalty weight is
    1 - exp(-(s/S_b - n/N_b)^2 / (2 width^2)).
    """
    B, N, S = attention.shape
    n_steps = np.asarray(n_steps)
    n_codes = np.asarray(n_codes)
    n = (np.arange(N)[None, :, None] + 0.5) / np.maximum(n_steps, 1)[:, None, None]
    s = (np.arange(S)[None, None, :] + 0.5) / np.maximum(n_codes, 1)[:, None, None]
    valid = (np.arange(N)[None, :, None] < n_steps[:, None, None]) & (np.arange(S)[None, None, :] < n_codes[:, None, None])
    W = np.where(valid, 1.0 - np.exp(-((s - n) ** 2) / (2.0 * width**2)), 0.0)
    return dc.mul(dc.tsum(dc.mul(attention, W)), 1.0 / max(int(n_steps.sum()), 1))


def spectral_loss(out, target, lengths):
    """Differential spectral loss on both decoder outputs, masked to valid frames."""
    target = np.asarray(target, dtype=np.float64)
    T = target.shape[1]
    mask = time_mask(lengths, T)
    pre = dc.getitem(out.frames, (slice(None), slice(0, T)))
    post = dc.getitem(out.post, (slice(None), slice(0, T)))
    return dc.add(
        dsp.differential_spectral_loss(post, target, mask),
        dsp.differential_spectral_loss(pre, target, mask),
    )


def stop_loss(out, lengths, reduction, pos_weight=1.0):
    """Stop-token BCE over each item's valid decoder steps (the last one is the positive)."""
    n_steps = out.stop_logits.shape[1]
    valid = time_mask(-(-np.asarray(lengths) // reduction), n_steps)
    return dc.bce_with_logits(out.stop_logits, stop_targets(lengths, n_steps, reduction), valid, pos_weight)


def reconstruct_unpaired(mel, linear, lengths, speaker_rows, encoder, codebook, synth, rng=None, straight_through=True):
    """Encode, substitute codewords, pool runs, and re-synthesise teacher-forced.

    ``mel`` (B, T, n_mels) and ``linear`` (B, T, F) are compressed features
    of the same audio. Returns (decoder output, reconstruction loss, frame
    indices). With ``straight_through=False`` the loss value is unchanged but
    no gradient reaches the encoder.
    """
    lengths = np.asarray(lengths)
    H, h_len = encoder(mel, lengths)
    Hbar, idx = phonetic_clustering(H, codebook, enabled=straight_through)
    blank = codebook.inventory.blank if hasattr(codebook, "inventory") else None
    codes, mask, _ = pool_segments(Hbar, idx, h_len, drop=blank)
    out = synth.decode(codes, mask, speaker_rows, target=linear, target_lengths=lengths, rng=rng)
    return out, spectral_loss(out, linear, lengths), idx
