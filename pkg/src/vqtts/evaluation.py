"""Phoneme error rate, recognition and round-trip evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp
from .model import mel_from_linear_features, utterance_features


def edit_distance(ref, hyp):
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def per(reference, hypothesis):
    """Levenshtein distance over the reference length."""
    if len(reference) == 0:
        raise ValueError("PER needs a non-empty reference")
    return edit_distance(list(reference), list(hypothesis)) / len(reference)


@dataclass
class MetricReport:
    metric: str
    value: float
    breakdown: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def eval_recognition(model, manifest, seed=0, config=None):
    """Mean per-utterance PER of greedy decoding against the transcripts."""
    rows = []
    for utt in manifest:
        if not utt.phonemes:
            raise ValueError(f"utterance {utt.id!r} has no transcript")
        mel, _ = utterance_features(dsp.read_wav(manifest.path(utt)))
        hyp = model.recognize(mel)
        rows.append({"id": utt.id, "speaker": utt.speaker, "reference": utt.phonemes,
                     "hypothesis": hyp, "per": per(utt.phonemes, hyp)})
    if not rows:
        raise ValueError("recognition evaluation needs at least one utterance")
    value = float(np.mean([r["per"] for r in rows]))
    return MetricReport("recognition_per", value, rows, config or {}, seed)


def roundtrip_one(model, phonemes, speaker, seed=0):
    out = model.synthesize(phonemes, speaker, seed=seed)
    lin = out.spectrogram.values
    hyp = model.recognize(mel_from_linear_features(lin)) if len(lin) else []
    return hyp, lin


def eval_roundtrip(model, prompts, seed=0, config=None):
    """Text -> codes -> free-running synthesis -> re-encode -> PER, per prompt and per speaker."""
    rows = []
    for k, prompt in enumerate(prompts):
        phonemes, speaker = list(prompt["phonemes"]), prompt["speaker"]
        if not phonemes:
            raise ValueError(f"prompt {k} is empty")
        model.speakers.row(speaker)
        hyp, lin = roundtrip_one(model, phonemes, speaker, seed=seed + k)
        row = {"prompt": k, "speaker": speaker, "reference": phonemes, "hypothesis": hyp,
               "frames": int(len(lin)), "per": per(phonemes, hyp)}
        if prompt.get("audio") and len(lin):
            row["mel_distance"] = mel_distance(lin, dsp.read_wav(prompt["audio"]))
        rows.append(row)
    if not rows:
        raise ValueError("round-trip evaluation needs at least one prompt")
    value = float(np.mean([r["per"] for r in rows]))
    by_speaker = {}
    for r in rows:
        by_speaker.setdefault(r["speaker"], []).append(r["per"])
    extra = {"per_speaker": {s: float(np.mean(v)) for s, v in sorted(by_speaker.items())}}
    distances = {}
    for r in rows:
        if "mel_distance" in r:
            distances.setdefault(r["speaker"], []).append(r["mel_distance"])
    if distances:
        extra["mel_distance_per_speaker"] = {s: float(np.mean(v)) for s, v in sorted(distances.items())}
    return MetricReport("roundtrip_per", value, rows, config or {}, seed, extra)


def mel_distance(linear, reference):
    """L2 distance between time-averaged compressed mel spectra of a synthesized and a reference utterance."""
    syn = mel_from_linear_features(linear).mean(axis=0)
    ref = utterance_features(reference)[0].mean(axis=0)
    return float(np.linalg.norm(syn - ref))


def prompts_from_manifest(manifest):
    """Transcribed utterances as prompts; each keeps its own audio as the same-speaker reference."""
    return [{"phonemes": list(u.phonemes), "speaker": u.speaker, "audio": str(manifest.path(u))}
            for u in manifest if u.phonemes]
