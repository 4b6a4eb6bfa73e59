"""Synthetic multi-speaker toy speech, JSON-lines manifests, splits and noise corruption."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from . import dsp
from .exceptions import ManifestError
from .quantizer import PhonemeInventory

SYMBOLS = ("a", "e", "i", "o", "u", "m", "n", "s", "t", "k", "p", "l", "r", "f", "v", "z")
FADE = 64


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    n_speakers: int = 8
    n_phonemes: int = 8
    n_utterances: int = 400
    phonemes_per_utterance: tuple = (3, 8)
    frames_per_phoneme: tuple = (8, 16)
    band_range: tuple = (250.0, 4200.0)
    n_bands: int = 7
    tone_amplitude: tuple = (0.15, 0.3)
    speaker_scale: tuple = (0.9, 1.11)
    speaker_tilt: tuple = (-0.5, 0.5)
    jitter: float = 0.01
    paired_fraction: float = 0.1
    paired_policy: str = "multi"
    n_test_speakers: int = 2
    noise_fraction: float = 0.0
    snr_range: tuple = (10.0, 30.0)
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_phonemes < 2:
            raise ValueError("phoneme inventory size must be at least 2")
        if self.n_speakers < 1:
            raise ValueError("speaker count must be at least 1")
        if not 0 < self.paired_fraction <= 1:
            raise ValueError("paired fraction must be in (0, 1]")
        if self.paired_policy not in ("multi", "single"):
            raise ValueError(f"unknown paired-speaker policy {self.paired_policy!r}")
        if self.n_test_speakers >= self.n_speakers and self.n_speakers > 1:
            raise ValueError("at least one speaker must remain for paired training")
        if self.noise_fraction:
            check_noise_policy(self.noise_fraction, self.snr_range)
        if self.phonemes_per_utterance[0] < 1 or self.frames_per_phoneme[0] < 2:
            raise ValueError("utterances need at least one phoneme of at least two frames")

    @classmethod
    def from_dict(cls, d):
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)


def check_noise_policy(fraction, snr_range):
    if not 0 <= fraction <= 1:
        raise ValueError(f"noise fraction {fraction} outside [0, 1]")
    lo, hi = snr_range
    if not 10 <= lo <= hi <= 30:
        raise ValueError(f"SNR range {snr_range} must lie within [10, 30] dB")


@dataclass
class Utterance:
    id: str
    speaker: str
    audio: str
    phonemes: list | None = None
    paired: bool = False
    snr_db: float | None = None

    def __post_init__(self):
        if not self.speaker:
            raise ManifestError(f"utterance {self.id!r}: empty speaker")
        if self.paired and not self.phonemes:
            raise ManifestError(f"utterance {self.id!r}: paired utterance has no phonemes")

    def to_json(self):
        d = {"id": self.id, "speaker": self.speaker, "audio": self.audio,
             "phonemes": self.phonemes, "paired": self.paired}
        if self.snr_db is not None:
            d["snr_db"] = self.snr_db
        return d


@dataclass
class Manifest:
    utterances: list
    inventory: PhonemeInventory
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for u in self.utterances:
            if u.id in seen:
                raise ManifestError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
            if u.phonemes:
                unknown = [p for p in u.phonemes if p not in self.inventory.phonemes]
                if unknown:
                    raise ManifestError(f"utterance {u.id!r}: unknown phoneme symbols {unknown}")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def speakers(self):
        return sorted({u.speaker for u in self.utterances})

    def path(self, utt):
        return self.root / utt.audio

    def subset(self, keep):
        return Manifest([u for u in self.utterances if keep(u)], self.inventory, self.root)

    def paired(self):
        return self.subset(lambda u: u.paired)

    def unpaired(self):
        return self.subset(lambda u: not u.paired)


def load_manifest(path, inventory=None):
    """Read a JSON-lines manifest; the inventory defaults to ``inventory.txt`` beside it."""
    path = Path(path)
    if inventory is None:
        inventory = PhonemeInventory.from_file(path.parent / "inventory.txt")
    utts = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            utts.append(Utterance(
                id=str(d["id"]), speaker=str(d["speaker"]), audio=str(d["audio"]),
                phonemes=d.get("phonemes"), paired=bool(d.get("paired", False)), snr_db=d.get("snr_db"),
            ))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{n}: malformed manifest line ({exc})") from None
    return Manifest(utts, inventory, path.parent)


def write_manifest(manifest, path):
    path = Path(path)
    lines = [json.dumps(u.to_json(), sort_keys=False) for u in manifest.utterances]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    manifest.inventory.to_file(path.parent / "inventory.txt")


# ----------------------------------------------------------------------
# synthetic generation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SpeakerVoice:
    scale: float
    tilt: float


def phoneme_templates(cfg, rng):
    """Per-phoneme (band indices, amplitudes): 3 of ``n_bands`` log-spaced bands each."""
    combos = list(itertools.combinations(range(cfg.n_bands), 3))
    if cfg.n_phonemes > len(combos):
        raise ValueError(f"{cfg.n_bands} bands support at most {len(combos)} phonemes")
    order = rng.permutation(len(combos))
    chosen = [combos[order[0]]]
    # greedy: each next template shares as few bands as possible with those chosen
    for _ in range(cfg.n_phonemes - 1):
        best = min(
            (i for i in order if combos[i] not in chosen),
            key=lambda i: max(len(set(combos[i]) & set(c)) for c in chosen),
        )
        chosen.append(combos[best])
    amps = rng.uniform(*cfg.tone_amplitude, size=(cfg.n_phonemes, 3))
    return [(np.array(c), a) for c, a in zip(chosen, amps)]


def band_frequencies(cfg):
    return np.geomspace(cfg.band_range[0], cfg.band_range[1], cfg.n_bands)


def speaker_voices(cfg, rng):
    lo, hi = np.log(cfg.speaker_scale)
    scales = np.exp(rng.uniform(lo, hi, cfg.n_speakers))
    tilts = rng.uniform(*cfg.speaker_tilt, cfg.n_speakers)
    return [SpeakerVoice(float(s), float(t)) for s, t in zip(scales, tilts)]


def render_segment(freqs, amps, n, sr, rng):
    t = np.arange(n) / sr
    phases = rng.uniform(0, 2 * np.pi, len(freqs))
    x = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
    k = min(FADE, n // 2)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
    x[:k] *= ramp
    x[n - k :] *= ramp[::-1]
    return x


def voiced_tones(template, voice, cfg, rng):
    bands, amps = template
    f = band_frequencies(cfg)[bands] * voice.scale
    f = f * (1 + rng.uniform(-cfg.jitter, cfg.jitter, 3))
    a = amps * (f / 1000.0) ** voice.tilt * (1 + rng.uniform(-0.1, 0.1, 3))
    a = a / max(1.0, a.sum() / 0.8)
    return f, a


def render_utterance(phonemes, durations, templates, voice, cfg, rng, hop=160, win=400):
    """Concatenate phoneme segments; the STFT of the result has exactly sum(durations) frames."""
    parts = []
    for k, (ph, d) in enumerate(zip(phonemes, durations)):
        n = d * hop + (win - hop if k == len(phonemes) - 1 else 0)
        f, a = voiced_tones(templates[ph], voice, cfg, rng)
        parts.append(render_segment(f, a, n, cfg.sample_rate, rng))
    return np.concatenate(parts)


def speaker_ids(n):
    return [f"spk{k}" for k in range(n)]


def held_out_speakers(speakers, n_test):
    return list(speakers[len(speakers) - n_test :]) if n_test else []


def generate_corpus(cfg, out_dir):
    """Write WAVs, ``manifest.jsonl``, ``inventory.txt`` and ``corpus.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    inventory = PhonemeInventory(tuple(SYMBOLS[:cfg.n_phonemes]) if cfg.n_phonemes <= len(SYMBOLS)
                                 else tuple(f"p{i}" for i in range(cfg.n_phonemes)))
    templates = phoneme_templates(cfg, rng)
    voices = speaker_voices(cfg, rng)
    speakers = speaker_ids(cfg.n_speakers)
    utts = []
    for i in range(cfg.n_utterances):
        k = i % cfg.n_speakers
        n_ph = int(rng.integers(cfg.phonemes_per_utterance[0], cfg.phonemes_per_utterance[1] + 1))
        seq = [int(rng.integers(cfg.n_phonemes))]
        while len(seq) < n_ph:
            nxt = int(rng.integers(cfg.n_phonemes - 1))
            seq.append(nxt if nxt < seq[-1] else nxt + 1)  # never repeat the previous phoneme
        durations = rng.integers(cfg.frames_per_phoneme[0], cfg.frames_per_phoneme[1] + 1, size=n_ph)
        audio = render_utterance(seq, durations, templates, voices[k], cfg, rng)
        uid = f"utt{i:05d}"
        rel = f"wav/{uid}.wav"
        dsp.write_wav(dsp.AudioBuffer(audio, cfg.sample_rate), out / rel)
        utts.append(Utterance(uid, speakers[k], rel, list(inventory.decode(seq))))
    manifest = Manifest(utts, inventory, out)
    manifest = assign_paired(manifest, cfg.paired_fraction, cfg.paired_policy,
                             held_out_speakers(speakers, cfg.n_test_speakers), cfg.seed)
    write_manifest(manifest, out / "manifest.jsonl")
    meta = {"config": asdict(cfg), "speakers": speakers,
            "test_speakers": held_out_speakers(speakers, cfg.n_test_speakers),
            "voices": [asdict(v) for v in voices],
            "templates": [{"bands": b.tolist(), "amplitudes": a.tolist()} for b, a in templates]}
    (out / "corpus.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    if cfg.noise_fraction:
        manifest = apply_noise_policy(manifest, cfg.noise_fraction, cfg.snr_range, out, cfg.seed)
        write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def assign_paired(manifest, fraction, policy, exclude_speakers=(), seed=0):
    """Mark round(fraction * N) utterances as paired, never from ``exclude_speakers``.

    ``policy`` "multi" samples across all eligible speakers; "single" draws
    every pair from the first eligible speaker.
    """
    rng = np.random.default_rng([seed, 1])
    exclude = set(exclude_speakers)
    eligible = [i for i, u in enumerate(manifest.utterances) if u.speaker not in exclude and u.phonemes]
    if policy == "single":
        first = sorted({manifest.utterances[i].speaker for i in eligible})[:1]
        eligible = [i for i in eligible if manifest.utterances[i].speaker in first]
    elif policy != "multi":
        raise ValueError(f"unknown paired-speaker policy {policy!r}")
    n = min(len(eligible), max(1, round(fraction * len(manifest))))
    chosen = set(rng.choice(eligible, size=n, replace=False).tolist()) if eligible else set()
    utts = [replace(u, paired=i in chosen) for i, u in enumerate(manifest.utterances)]
    return Manifest(utts, manifest.inventory, manifest.root)


@dataclass
class Split:
    train: Manifest
    dev: Manifest
    test: Manifest


def split(manifest, test_speakers, seed=0, test_fraction=0.5, dev_fraction=0.05):
    """Hold out part of the test speakers' utterances; test speakers never appear in paired training data."""
    test_speakers = set(test_speakers)
    bad = [u.id for u in manifest if u.paired and u.speaker in test_speakers]
    if bad:
        raise ManifestError(f"paired utterances from test speakers: {bad[:5]}")
    rng = np.random.default_rng([seed, 2])
    test_ids, dev_ids = set(), set()
    for spk in sorted(test_speakers):
        ids = [u.id for u in manifest if u.speaker == spk]
        n = int(round(test_fraction * len(ids)))
        test_ids.update(rng.choice(ids, size=n, replace=False).tolist() if n else [])
    rest = [u.id for u in manifest if not u.paired and u.id not in test_ids and u.speaker not in test_speakers]
    n_dev = int(round(dev_fraction * len(rest)))
    dev_ids.update(rng.choice(rest, size=n_dev, replace=False).tolist() if n_dev else [])
    return Split(
        manifest.subset(lambda u: u.id not in test_ids and u.id not in dev_ids),
        manifest.subset(lambda u: u.id in dev_ids),
        manifest.subset(lambda u: u.id in test_ids),
    )


def template_distances(cfg):
    """Minimum pairwise mel-spectral distance between phoneme templates for each speaker."""
    rng = np.random.default_rng(cfg.seed)
    templates = phoneme_templates(cfg, rng)
    voices = speaker_voices(cfg, rng)
    stft_cfg = dsp.StftConfig()
    fb = dsp.mel_filterbank(stft_cfg)
    out = []
    for voice in voices:
        mels = []
        for tpl in templates:
            f = band_frequencies(cfg)[tpl[0]] * voice.scale
            a = tpl[1] * (f / 1000.0) ** voice.tilt
            x = render_segment(f, a / max(1.0, a.sum() / 0.8), 4000, cfg.sample_rate, np.random.default_rng(0))
            spec = dsp.stft(dsp.AudioBuffer(x), stft_cfg).values
            mels.append(dsp.compress(spec @ fb.T).mean(0))
        d = [np.linalg.norm(a - b) for a, b in itertools.combinations(mels, 2)]
        out.append(min(d))
    return np.array(out)


# ----------------------------------------------------------------------
# noise
# ----------------------------------------------------------------------


def band_noise(n, rng, sr=16000, band=(100.0, 6000.0)):
    sos = signal.butter(4, band, btype="bandpass", fs=sr, output="sos")
    return signal.sosfilt(sos, rng.normal(size=n + 1024))[1024:]


def apply_noise_policy(manifest, fraction, snr_range, out_dir, seed=0, noise_dir=None, exclude=(),
                       by_speaker=True, exclude_speakers=()):
    """Replace a fraction of the unpaired utterances by noisy copies at uniform random SNR.

    Paired utterances, ids in ``exclude`` and speakers in ``exclude_speakers``
    are never touched. With ``by_speaker`` whole speakers are corrupted in a
    seeded order (only the last one partially), so noisy and clean data come
    from mostly disjoint speakers; otherwise utterances are drawn at random.
    Noise comes from ``noise_dir`` WAVs when given, else synthetic
    band-limited noise. Noisy files go to ``out_dir/noisy``; the drawn SNR
    is stored per utterance.
    """
    check_noise_policy(fraction, snr_range)
    if fraction == 0:
        return manifest
    out_dir = Path(out_dir)
    rng = np.random.default_rng([seed, 3])
    excluded = set(exclude)
    protected = set(exclude_speakers)
    eligible = [i for i, u in enumerate(manifest.utterances) if not u.paired and u.id not in excluded]
    pool = [i for i in eligible if manifest.utterances[i].speaker not in protected]
    n = int(round(fraction * len(eligible)))
    if n > len(pool):
        raise ValueError(f"cannot corrupt {n} utterances: only {len(pool)} unprotected unpaired utterances")
    if by_speaker:
        order = rng.permutation(sorted({manifest.utterances[i].speaker for i in pool}))
        rank = {s: k for k, s in enumerate(order)}
        chosen = sorted(sorted(pool, key=lambda i: (rank[manifest.utterances[i].speaker], i))[:n])
    else:
        chosen = sorted(rng.choice(pool, size=n, replace=False).tolist()) if n else []
    noise_files = sorted(Path(noise_dir).glob("*.wav")) if noise_dir else []
    if noise_dir and not noise_files:
        raise ManifestError(f"no noise WAVs found in {noise_dir}")
    (out_dir / "noisy").mkdir(parents=True, exist_ok=True)
    utts = list(manifest.utterances)
    for i in chosen:
        u = utts[i]
        clean = dsp.read_wav(manifest.path(u))
        snr = float(rng.uniform(*snr_range))
        if noise_files:
            noise = dsp.read_wav(noise_files[int(rng.integers(len(noise_files)))])
        else:
            noise = dsp.AudioBuffer(band_noise(len(clean), rng, clean.sample_rate), clean.sample_rate)
        mixed = dsp.mix_noise(clean, noise, snr)
        rel = Path("noisy") / Path(u.audio).name
        dsp.write_wav(mixed, out_dir / rel, bits=32)
        audio = os.path.relpath((out_dir / rel).resolve(), Path(manifest.root).resolve())
        utts[i] = replace(u, audio=audio, snr_db=snr)
    return Manifest(utts, manifest.inventory, manifest.root)

