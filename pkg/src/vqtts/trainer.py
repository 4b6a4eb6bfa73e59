"""Semi-supervised training: loss assembly, optimisation, metrics log and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import dsp
from .exceptions import CheckpointError, ManifestError, NonFiniteError
from .layers import time_mask
from .model import ModelConfig, VQTTSModel, utterance_features
from .quantizer import ctc_loss, log_posterior, phonetic_clustering, pool_segments
from .synthesizer import guided_attention_loss, spectral_loss, stop_loss

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "recon", "ctc", "tts", "aux", "total")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 10.0
    stop: float = 1.0
    stop_pos_weight: float = 5.0
    attention: float = 1.0
    commitment: float = 0.0
    encoder_pull: float = 0.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("the reconstruction weight must be positive")
        if self.stop < 0 or self.attention < 0 or self.commitment < 0 or self.encoder_pull < 0 or self.stop_pos_weight <= 0:
            raise ValueError("auxiliary weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    paired_batch: int = 4
    unpaired_batch: int = 12
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    st_enabled: bool = True
    checkpoint_interval: int = 0
    teacher_forcing: str = "always"
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.steps < 0 or self.paired_batch < 0 or self.unpaired_batch < 0:
            raise ValueError("step count and batch sizes must be non-negative")
        if self.paired_batch + self.unpaired_batch == 0:
            raise ValueError("at least one sub-batch must be non-empty")
        if self.lr <= 0 or self.clip_norm <= 0 or self.eps <= 0:
            raise ValueError("learning rate, clip norm and eps must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("moment decays must lie in [0, 1)")
        if self.teacher_forcing != "always":
            raise ValueError("only teacher_forcing='always' is supported")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        weights = LossWeights(**d.pop("weights", {}))
        model = ModelConfig.from_dict(d.pop("model", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(weights=weights, model=model, **d)


@dataclass
class LossBreakdown:
    recon: float
    ctc: float
    tts: float
    aux: float
    total: float

    def row(self, step):
        return [step, self.recon, self.ctc, self.tts, self.aux, self.total]


def compose_total(recon, ctc, tts, aux, lam):
    return lam * recon + ctc + tts + aux


# ----------------------------------------------------------------------
# batches
# ----------------------------------------------------------------------


@dataclass
class Batch:
    mel: np.ndarray
    linear: np.ndarray
    lengths: np.ndarray
    speakers: list
    phonemes: list | None = None

    def __len__(self):
        return len(self.lengths)


class FeatureStore:
    """Loads and caches compressed features per utterance id."""

    def __init__(self, manifest):
        self.manifest = manifest
        self._cache = {}

    def get(self, utt):
        if utt.id not in self._cache:
            self._cache[utt.id] = utterance_features(dsp.read_wav(self.manifest.path(utt)))
        return self._cache[utt.id]

    def batch(self, utts, with_phonemes=False):
        feats = [self.get(u) for u in utts]
        return make_batch(feats, [u.speaker for u in utts],
                          [u.phonemes for u in utts] if with_phonemes else None)


def make_batch(feats, speakers, phonemes=None):
    lengths = np.array([m.shape[0] for m, _ in feats])
    T = int(lengths.max()) if len(feats) else 0
    n_mels = feats[0][0].shape[1] if feats else 0
    F = feats[0][1].shape[1] if feats else 0
    mel = np.zeros((len(feats), T, n_mels))
    lin = np.zeros((len(feats), T, F))
    for b, (m, x) in enumerate(feats):
        mel[b, : len(m)] = m
        lin[b, : len(x)] = x
    return Batch(mel, lin, lengths, list(speakers), phonemes)


def _pad_codes(codes, S):
    B, s, D = codes.shape
    if s == S:
        return codes
    return dc.concat([codes, dc.Tensor(np.zeros((B, S - s, D)))], axis=1)


def _pad_mask(mask, S):
    return np.pad(mask, ((0, 0), (0, S - mask.shape[1])))


def _pad_time(x, T):
    return np.pad(x, ((0, 0), (0, T - x.shape[1]), (0, 0)))


def total_loss(paired, unpaired, model, weights=LossWeights(), st_enabled=True, rng=None):
    """Return (total loss Tensor, LossBreakdown) for one mixed step.

    Both sub-batches share one encoder pass and one teacher-forced decoder
    pass; the terms are separated again by batch row.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n_p = len(paired) if paired is not None else 0
    n_u = len(unpaired) if unpaired is not None else 0
    if n_p == 0 and n_u == 0:
        raise ValueError("both sub-batches are empty")
    if n_p and paired.phonemes is None:
        raise ManifestError("paired batch has no transcripts")
    parts = [b for b in (paired, unpaired) if b is not None and len(b)]
    T = max(b.mel.shape[1] for b in parts)
    mel = np.concatenate([_pad_time(b.mel, T) for b in parts])
    lin = np.concatenate([_pad_time(b.linear, T) for b in parts])
    lengths = np.concatenate([b.lengths for b in parts])
    speakers = sum((b.speakers for b in parts), [])
    rows = model.speakers.rows(speakers)
    inv = model.inventory
    E = model.codebook.weights

    H, h_len = model.encoder(mel, lengths)
    zero = dc.Tensor(np.zeros(()))
    codes, masks = [], []
    ctc = zero
    if n_p:
        Hp = dc.getitem(H, slice(0, n_p))
        targets = [inv.encode(p) for p in paired.phonemes]
        ctc = dc.mean(ctc_loss(log_posterior(Hp, E), targets, h_len[:n_p]))
        S = max(len(t) for t in targets)
        idx = np.zeros((n_p, S), dtype=np.int64)
        pmask = np.zeros((n_p, S))
        for b, t in enumerate(targets):
            idx[b, : len(t)] = t
            pmask[b, : len(t)] = 1.0
        codes.append(dc.mul(dc.embedding(E, idx), pmask[..., None]))
        masks.append(pmask)
    if n_u:
        Hu = dc.getitem(H, slice(n_p, n_p + n_u))
        Hbar, fidx = phonetic_clustering(Hu, E, enabled=st_enabled)
        ucodes, umask, _ = pool_segments(Hbar, fidx, h_len[n_p:], drop=inv.blank)
        codes.append(ucodes)
        masks.append(umask)
        if weights.commitment:
            # pull the selected codewords toward the (fixed) frame representations
            fmask = time_mask(h_len[n_p:], fidx.shape[1])[..., None]
            commit = dc.mse(dc.embedding(E, fidx), dc.Tensor(Hu.data), mask=fmask)
        if weights.encoder_pull and st_enabled:
            # pull the frames toward their (fixed) selected codewords; part of the ST path, so off in the ablation
            fmask = time_mask(h_len[n_p:], fidx.shape[1])[..., None]
            pull = dc.mse(Hu, dc.Tensor(E.data[fidx]), mask=fmask)
    S = max(c.shape[1] for c in codes)
    all_codes = dc.concat([_pad_codes(c, S) for c in codes], axis=0)
    all_mask = np.concatenate([_pad_mask(m, S) for m in masks])
    out = model.synth.decode(all_codes, all_mask, rows, target=lin, target_lengths=lengths, rng=rng)

    def rows_of(lo, hi):
        sub = type(out)(
            dc.getitem(out.frames, slice(lo, hi)), dc.getitem(out.post, slice(lo, hi)),
            dc.getitem(out.stop_logits, slice(lo, hi)), out.alignments[lo:hi], out.n_frames[lo:hi],
            dc.getitem(out.attention, slice(lo, hi)),
        )
        return sub, lin[lo:hi], lengths[lo:hi]

    r = model.config.decoder.reduction
    tts = recon = aux = zero
    if n_p:
        sub, tgt, ln = rows_of(0, n_p)
        tts = spectral_loss(sub, tgt, ln)
        aux = dc.add(aux, dc.mul(stop_loss(sub, ln, r, weights.stop_pos_weight), weights.stop))
    if n_u:
        sub, tgt, ln = rows_of(n_p, n_p + n_u)
        recon = spectral_loss(sub, tgt, ln)
        aux = dc.add(aux, dc.mul(stop_loss(sub, ln, r, weights.stop_pos_weight), weights.stop))
    if n_u and weights.commitment:
        aux = dc.add(aux, dc.mul(commit, weights.commitment))
    if n_u and weights.encoder_pull and st_enabled:
        aux = dc.add(aux, dc.mul(pull, weights.encoder_pull))
    if weights.attention:
        n_steps = -(-lengths // r)
        ga = guided_attention_loss(out.attention, n_steps, all_mask.sum(axis=1))
        aux = dc.add(aux, dc.mul(ga, weights.attention))
    total = dc.add(dc.add(dc.add(dc.mul(recon, weights.lam), ctc), tts), aux)
    breakdown = LossBreakdown(recon.item(), ctc.item(), tts.item(), aux.item(), total.item())
    return total, breakdown


# ----------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def collect_grads(params):
    return {k: p.grad for k, p in params.items() if p.grad is not None}


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

MAGIC = b"VQTTS"
VERSION = 1
_ARRAY, _JSON = 0, 1


def _record(name, kind, payload):
    nb = name.encode("utf-8")
    return (struct.pack("<I", len(nb)) + nb + struct.pack("<BQ", kind, len(payload)) + payload
            + struct.pack("<I", zlib.crc32(payload)))


def _array_payload(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()


def save_checkpoint(state, path):
    """``state``: dict with 'config' (JSON-able), 'params', 'adam_m', 'adam_v' (name -> array), 'step', 'rng', 'adam_t'."""
    meta = {"config": state["config"], "step": int(state["step"]), "adam_t": int(state.get("adam_t", 0)),
            "rng": state["rng"], "speakers": state.get("speakers"), "inventory": state.get("inventory")}
    chunks = [MAGIC, struct.pack("<I", VERSION), _record("meta", _JSON, json.dumps(meta, sort_keys=True).encode())]
    for prefix, key in (("param/", "params"), ("adam.m/", "adam_m"), ("adam.v/", "adam_v")):
        for name in sorted(state.get(key, {})):
            chunks.append(_record(prefix + name, _ARRAY, _array_payload(state[key][name])))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 9:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 5)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    pos = 9
    state = {"params": {}, "adam_m": {}, "adam_v": {}}
    meta = None
    while pos < len(data):
        name = "<unknown>"
        try:
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            kind, size = struct.unpack_from("<BQ", data, pos)
            pos += 9
            payload = data[pos : pos + size]
            if len(payload) != size:
                raise CheckpointError(f"{path}: record {name!r} truncated")
            pos += size
            (crc,) = struct.unpack_from("<I", data, pos)
            pos += 4
        except struct.error:
            raise CheckpointError(f"{path}: record {name!r} truncated") from None
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: record {name!r} corrupted (checksum mismatch)")
        if kind == _JSON:
            meta = json.loads(payload)
            continue
        if kind != _ARRAY:
            raise CheckpointError(f"{path}: record {name!r} has unknown kind {kind}")
        (ndim,) = struct.unpack_from("<I", payload, 0)
        shape = struct.unpack_from(f"<{ndim}Q", payload, 4)
        body = payload[4 + 8 * ndim :]
        if len(body) != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: record {name!r} size does not match its shape {shape}")
        arr = np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)
        prefix, _, key = name.partition("/")
        target = {"param": "params", "adam.m": "adam_m", "adam.v": "adam_v"}.get(prefix)
        if target is None:
            raise CheckpointError(f"{path}: unknown record {name!r}")
        state[target][key] = arr
    if meta is None:
        raise CheckpointError(f"{path}: missing meta record")
    state.update(meta)
    return state


def model_from_checkpoint(state):
    cfg = TrainConfig.from_dict(state["config"])
    model = VQTTSModel(state["inventory"], state["speakers"], cfg.model)
    model.load_parameters(state["params"])
    return model, cfg


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: VQTTSModel
    history: list
    checkpoint: Path | None


class Trainer:
    def __init__(self, config, manifest, out_dir=None, speakers=None):
        self.config = config
        self.manifest = manifest
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.features = FeatureStore(manifest)
        self.paired = list(manifest.paired())
        self.unpaired = list(manifest.unpaired())
        if config.paired_batch and not self.paired:
            raise ManifestError("training manifest has no paired utterances")
        speakers = manifest.speakers if speakers is None else sorted(set(speakers) | set(manifest.speakers))
        self.model = VQTTSModel(manifest.inventory, speakers, config.model, seed=config.seed)
        self.params = self.model.parameters()
        self.opt = Adam(self.params, config.lr, config.betas, config.eps)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.history = []

    # -- state ---------------------------------------------------------

    def state(self):
        return {
            "config": self.config.to_dict(), "step": self.step, "adam_t": self.opt.t,
            "rng": _jsonable(self.rng.bit_generator.state),
            "speakers": list(self.model.speakers.speakers), "inventory": list(self.model.inventory.phonemes),
            "params": {k: p.data for k, p in self.params.items()},
            "adam_m": self.opt.m, "adam_v": self.opt.v,
        }

    def restore(self, state):
        if state["config"] != _jsonable(self.config.to_dict()):
            raise CheckpointError("checkpoint was written with a different training configuration")
        self.model.load_parameters(state["params"])
        for k in self.params:
            if state["adam_m"][k].shape != self.params[k].shape:
                raise CheckpointError(f"optimizer record {k!r} has the wrong shape")
            self.opt.m[k] = state["adam_m"][k].copy()
            self.opt.v[k] = state["adam_v"][k].copy()
        self.opt.t = state["adam_t"]
        self.rng.bit_generator.state = state["rng"]
        self.step = state["step"]

    # -- steps ---------------------------------------------------------

    def _sample(self, pool, n):
        if n == 0 or not pool:
            return []
        idx = self.rng.choice(len(pool), size=n, replace=n > len(pool))
        return [pool[i] for i in idx]

    def train_step(self):
        cfg = self.config
        p_utts = self._sample(self.paired, cfg.paired_batch)
        u_utts = self._sample(self.unpaired, cfg.unpaired_batch)
        paired = self.features.batch(p_utts, with_phonemes=True) if p_utts else None
        unpaired = self.features.batch(u_utts) if u_utts else None
        loss, parts = total_loss(paired, unpaired, self.model, cfg.weights, cfg.st_enabled, self.rng)
        if not np.isfinite(parts.total):
            raise NonFiniteError(f"non-finite loss at step {self.step + 1}: {parts}")
        self.model.zero_grad()
        dc.backward(loss)
        grads = collect_grads(self.params)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteError(f"non-finite gradient at step {self.step + 1}")
        clip_grad_norm(grads, cfg.clip_norm)
        self.opt.step(grads)
        self.step += 1
        self.history.append(parts)
        return parts

    def run(self, steps=None, resume=None):
        """Train up to ``steps`` total steps (default: the configured count)."""
        steps = self.config.steps if steps is None else steps
        metrics = None
        if resume is not None:
            self.restore(load_checkpoint(resume) if not isinstance(resume, dict) else resume)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics = self._open_metrics()
        last_good = None
        try:
            while self.step < steps:
                try:
                    parts = self.train_step()
                except NonFiniteError as exc:
                    log.error("aborting: %s (last good checkpoint: %s)", exc, last_good)
                    raise
                if metrics is not None:
                    metrics.writerow([_fmt(v) for v in parts.row(self.step)])
                interval = self.config.checkpoint_interval
                if self.out_dir is not None and interval and self.step % interval == 0:
                    last_good = self.out_dir / f"step{self.step:06d}.ckpt"
                    save_checkpoint(self.state(), last_good)
                if self.step % 50 == 0:
                    log.info("step %d total %.4f recon %.4f ctc %.4f tts %.4f aux %.4f",
                             self.step, parts.total, parts.recon, parts.ctc, parts.tts, parts.aux)
        finally:
            if metrics is not None:
                self._metrics_file.close()
        final = None
        if self.out_dir is not None:
            final = self.out_dir / "final.ckpt"
            save_checkpoint(self.state(), final)
        return TrainResult(self.model, self.history, final)

    def _open_metrics(self):
        path = self.out_dir / "metrics.csv"
        rows = []
        if self.step and path.exists():
            with path.open(newline="") as f:
                rows = [r for r in csv.reader(f)][1:]
            rows = [r for r in rows if int(r[0]) <= self.step]
        self._metrics_file = path.open("w", newline="")
        writer = csv.writer(self._metrics_file)
        writer.writerow(METRIC_FIELDS)
        writer.writerows(rows)
        return writer


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def train(config, manifest, out_dir=None, speakers=None, resume=None, steps=None):
    trainer = Trainer(config, manifest, out_dir, speakers)
    return trainer.run(steps=steps, resume=resume)
