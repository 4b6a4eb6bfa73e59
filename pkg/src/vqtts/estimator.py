"""scikit-learn style wrapper: fit on a manifest, transform audio to posteriorgrams, predict phonemes."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import dsp
from .corpus import Manifest
from .evaluation import eval_recognition
from .model import utterance_features
from .trainer import LossWeights, TrainConfig, Trainer


class PhoneticTTS(TransformerMixin, BaseEstimator):
    """Semi-supervised phonetic-code TTS model.

    ``fit`` takes a ``Manifest`` (paired and unpaired utterances). ``transform``
    and ``predict`` take a list of utterances, each an ``AudioBuffer`` or a
    compressed mel matrix (T, n_mels).
    """

    def __init__(self, steps=1000, paired_batch=4, unpaired_batch=12, lr=1e-3, clip_norm=1.0, lam=10.0,
                 st_enabled=True, seed=0, model_config=None):
        self.steps = steps
        self.paired_batch = paired_batch
        self.unpaired_batch = unpaired_batch
        self.lr = lr
        self.clip_norm = clip_norm
        self.lam = lam
        self.st_enabled = st_enabled
        self.seed = seed
        self.model_config = model_config

    def train_config(self):
        cfg = TrainConfig(steps=self.steps, paired_batch=self.paired_batch, unpaired_batch=self.unpaired_batch,
                          lr=self.lr, clip_norm=self.clip_norm, seed=self.seed, st_enabled=self.st_enabled,
                          weights=LossWeights(lam=self.lam))
        return replace(cfg, model=self.model_config) if self.model_config is not None else cfg

    def fit(self, X, y=None, out_dir=None):
        if not isinstance(X, Manifest):
            raise TypeError("fit expects a Manifest of paired and unpaired utterances")
        trainer = Trainer(self.train_config(), X, out_dir)
        trainer.run()
        self.model_ = trainer.model
        self.history_ = trainer.history
        self.speakers_ = list(trainer.model.speakers.speakers)
        return self

    def _mels(self, X):
        n_mels = self.model_.config.encoder.n_mels
        out = []
        for x in X:
            if isinstance(x, dsp.AudioBuffer):
                x = utterance_features(x)[0]
            out.append(check_array(x, dtype=np.float64, ensure_min_samples=1))
            if out[-1].shape[1] != n_mels:
                raise ValueError(f"expected {n_mels} mel bands, got {out[-1].shape[1]}")
        return out

    def transform(self, X):
        """Per-frame posteriorgrams, one (T', V) array per utterance."""
        check_is_fitted(self, "model_")
        return [self.model_.posteriorgram(m) for m in self._mels(X)]

    def predict(self, X):
        """Greedy phoneme sequences, one list per utterance."""
        check_is_fitted(self, "model_")
        return [self.model_.recognize(m) for m in self._mels(X)]

    def synthesize(self, phonemes, speaker, seed=0, max_frames=None):
        check_is_fitted(self, "model_")
        return self.model_.synthesize(phonemes, speaker, seed=seed, max_frames=max_frames)

    def score(self, X, y=None):
        """1 - mean recognition PER over a transcribed manifest."""
        check_is_fitted(self, "model_")
        return 1.0 - eval_recognition(self.model_, X).value
