"""The full model: encoder, phoneme-bound codebook and speaker synthesizer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import dsp
from .encoder import EncoderConfig, PhoneticEncoder
from .exceptions import ShapeError
from .quantizer import Codebook, PhonemeInventory, greedy_decode, posterior, text_to_codes
from .synthesizer import DecoderConfig, SpeakerSynthesizer

STFT = dsp.StftConfig()


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    codebook_radius: float = 4.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        enc = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("encoder", {}).items()}
        dec = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("decoder", {}).items()}
        return cls(EncoderConfig(**enc), DecoderConfig(**dec), **d)


def utterance_features(audio):
    """Compressed (mel (T, n_mels), linear (T, F)) features of an ``AudioBuffer``."""
    target = dsp.compress(dsp.stft(audio, STFT).values)
    return mel_from_linear_features(target), target


def mel_from_linear_features(linear):
    """Encoder input computed from compressed linear features (e.g. decoder output)."""
    mag = dsp.decompress(np.clip(linear, 0.0, 1.0))
    return dsp.compress(mag @ dsp.mel_filterbank(STFT).T)


class VQTTSModel:
    def __init__(self, inventory, speakers, config=ModelConfig(), seed=0):
        if config.decoder.code_dim != config.encoder.dim:
            raise ShapeError("decoder code width must equal the encoder output width")
        if not isinstance(inventory, PhonemeInventory):
            inventory = PhonemeInventory(tuple(inventory))
        self.config = config
        self.inventory = inventory
        rng = np.random.default_rng([seed, 7])
        self.encoder = PhoneticEncoder(config.encoder, rng)
        self.codebook = Codebook.on_sphere(inventory, config.encoder.dim, config.codebook_radius, rng)
        self.synth = SpeakerSynthesizer(sorted(speakers), config.decoder, rng)

    @property
    def speakers(self):
        return self.synth.speakers

    def parameters(self):
        out = dict(self.encoder.params)
        out["codebook"] = self.codebook.weights
        out.update(self.synth.parameters())
        return out

    def load_parameters(self, values):
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, t in params.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != t.shape:
                raise ShapeError(f"parameter {name}: stored shape {v.shape} != model shape {t.shape}")
            t.data[...] = v

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()

    def posteriorgram(self, mel):
        """Frame posteriors (T', V) for one compressed mel matrix (T, n_mels)."""
        H = self.encoder.encode(mel).values
        return posterior(dc.Tensor(H), self.codebook.weights.data).data

    def recognize(self, mel):
        return self.inventory.decode(greedy_decode(self.posteriorgram(mel)))

    def synthesize(self, phonemes, speaker, seed=0, max_frames=None):
        if len(phonemes) == 0:
            raise ValueError("cannot synthesise an empty phoneme sequence")
        codes = text_to_codes(phonemes, self.codebook)
        return self.synth.synthesize(codes, speaker, seed=seed, max_frames=max_frames)
