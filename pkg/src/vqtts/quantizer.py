"""Phoneme-bound codebook, nearest-codeword substitution, and CTC mapping."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from .exceptions import CTCFeasibilityError, InventoryError, ShapeError

BLANK = "<blk>"


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered phoneme symbols with the blank appended at index V-1."""

    phonemes: tuple

    def __post_init__(self):
        syms = tuple(str(s) for s in self.phonemes)
        if BLANK in syms:
            raise InventoryError(f"{BLANK!r} is reserved and appended automatically")
        if len(set(syms)) != len(syms):
            dup = sorted({s for s in syms if syms.count(s) > 1})
            raise InventoryError(f"duplicate phoneme symbols: {dup}")
        if any(not s or s != s.strip() for s in syms):
            raise InventoryError("phoneme symbols must be non-empty without surrounding whitespace")
        object.__setattr__(self, "phonemes", syms)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(syms + (BLANK,))})

    @property
    def symbols(self):
        return self.phonemes + (BLANK,)

    @property
    def blank(self):
        return len(self.phonemes)

    def __len__(self):
        return len(self.phonemes) + 1

    def index(self, symbol):
        try:
            return self._index[symbol]
        except KeyError:
            raise InventoryError(f"unknown phoneme symbol {symbol!r}") from None

    def encode(self, symbols):
        idx = [self.index(s) for s in symbols]
        if self.blank in idx:
            raise InventoryError(f"{BLANK!r} may not appear in a transcript")
        return np.asarray(idx, dtype=np.int64)

    def decode(self, indices):
        return [self.symbols[i] for i in indices]

    @classmethod
    def from_file(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line.strip() for line in lines if line.strip()))

    def to_file(self, path):
        Path(path).write_text("".join(s + "\n" for s in self.phonemes), encoding="utf-8")


class Codebook:
    """V x D matrix of codewords; row v is bound to inventory symbol v."""

    def __init__(self, inventory, weights):
        w = weights if isinstance(weights, dc.Tensor) else dc.Tensor(weights, requires_grad=True)
        if w.ndim != 2 or w.shape[0] != len(inventory):
            raise ShapeError(f"codebook shape {w.shape} does not match inventory size {len(inventory)}")
        self.inventory = inventory
        self.weights = w

    @property
    def dim(self):
        return self.weights.shape[1]

    def __len__(self):
        return self.weights.shape[0]

    @classmethod
    def on_sphere(cls, inventory, dim, radius, rng):
        """Rows drawn uniformly on the sphere of the given radius."""
        g = rng.normal(size=(len(inventory), dim))
        g *= radius / np.linalg.norm(g, axis=1, keepdims=True)
        return cls(inventory, dc.Tensor(g, requires_grad=True))


@dataclass
class CodeSequence:
    indices: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return len(self.indices)


def _as_weights(E):
    return E.weights if isinstance(E, Codebook) else dc.as_tensor(E)


def nearest_codewords(h, e):
    """Index of the closest row of ``e`` for every frame of ``h`` (lowest index on ties)."""
    h = np.asarray(h, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if h.shape[-1] != e.shape[-1]:
        raise ShapeError(f"frame dimension {h.shape[-1]} does not match codeword dimension {e.shape[-1]}")
    d = ((h[..., None, :] - e) ** 2).sum(-1)
    return np.argmin(d, axis=-1)


def phonetic_clustering(H, E, enabled=True):
    """Substitute each frame with its nearest codeword.

    Returns (substituted frames, indices). The substitution is a
    straight-through node: the gradient reaches ``H`` as identity, and with
    ``enabled=False`` not at all.
    """
    H = dc.as_tensor(H)
    W = _as_weights(E)
    idx = dc.frozen_choice(lambda: nearest_codewords(H.data, W.data))
    return dc.straight_through(H, W.data[idx], enabled=enabled), idx


def temporal_segmentation(indices, E=None):
    """Collapse runs of repeated consecutive indices to one entry."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    keep = np.ones(idx.size, dtype=bool)
    keep[1:] = idx[1:] != idx[:-1]
    out = idx[keep]
    if E is None:
        return CodeSequence(out, np.zeros((out.size, 0)))
    W = _as_weights(E).data
    return CodeSequence(out, W[out].copy())


def segment_runs(indices, length, drop=None):
    """Run boundaries of ``indices[:length]`` as a list of (start, end, code).

    Runs whose code equals ``drop`` are skipped.
    """
    idx = np.asarray(indices[:length])
    runs = []
    start = 0
    for t in range(1, idx.size + 1):
        if t == idx.size or idx[t] != idx[start]:
            if drop is None or idx[start] != drop:
                runs.append((start, t, int(idx[start])))
            start = t
    return runs


def pool_segments(Hbar, indices, lengths, drop=None):
    """Batched temporal segmentation of substituted frames.

    Each run is averaged into one code vector, so gradients arriving at a
    code are shared equally by the frames of its run. If dropping ``drop``
    would leave an utterance without codes, its runs are kept in full.
    Returns (codes (B, S, D), code mask (B, S), list of code indices).
    """
    Hbar = dc.as_tensor(Hbar)
    B, T, _ = Hbar.shape
    all_runs = []
    for b in range(B):
        runs = segment_runs(indices[b], lengths[b], drop)
        if not runs:
            runs = segment_runs(indices[b], lengths[b])
        all_runs.append(runs)
    S = max(len(r) for r in all_runs)
    pool = np.zeros((B, S, T))
    mask = np.zeros((B, S))
    codes = []
    for b, runs in enumerate(all_runs):
        for s, (lo, hi, _) in enumerate(runs):
            pool[b, s, lo:hi] = 1.0 / (hi - lo)
            mask[b, s] = 1.0
        codes.append(np.array([c for _, _, c in runs], dtype=np.int64))
    return dc.matmul(dc.Tensor(pool), Hbar), mask, codes


def log_posterior(H, E):
    """log P(v | h_t) with P a softmax over negative Euclidean distances."""
    return dc.log_softmax(dc.neg_l2_distance(H, _as_weights(E)), axis=-1)


def posterior(H, E):
    return dc.softmax(dc.neg_l2_distance(H, _as_weights(E)), axis=-1)


# ----------------------------------------------------------------------
# CTC
# ----------------------------------------------------------------------


def ctc_min_length(target):
    target = np.asarray(target)
    return int(target.size + np.count_nonzero(target[1:] == target[:-1]))


def _extend(target, blank):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(ext.size, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def _shift(x, k):
    """Shift right by k (left if negative), filling with -inf."""
    out = np.full_like(x, -np.inf)
    if k > 0:
        out[k:] = x[:-k] if k < x.size else out[k:]
    elif k < 0:
        out[:k] = x[-k:] if -k < x.size else out[:k]
    return out


def _ctc_single(lp, target, blank):
    """Loss and gradient w.r.t. log-probabilities (T, V) for one utterance."""
    T, V = lp.shape
    ext, skip = _extend(target, blank)
    S = ext.size
    em = lp[:, ext]
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = em[0, 0]
    if S > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = _shift(prev, 1)
        a2 = np.where(skip, _shift(prev, 2), -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + em[t]
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = em[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = em[T - 1, S - 2]
    skip_next = np.concatenate((skip[2:], [False, False]))[:S]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = _shift(nxt, -1)
        b2 = np.where(skip_next, _shift(nxt, -2), -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + em[t]
    ends = alpha[T - 1, S - 1:] if S == 1 else alpha[T - 1, S - 2:]
    log_p = logsumexp(ends)
    occ = np.exp(alpha + beta - em - log_p)
    grad = np.zeros_like(lp)
    np.add.at(grad.T, ext, -occ.T)
    return -log_p, grad


def ctc_loss(log_probs, targets, lengths=None, blank=None):
    """Per-utterance CTC negative log-likelihood.

    ``log_probs`` is a Tensor (B, T, V) of frame log-posteriors (or (T, V)
    for a single utterance), ``targets`` a list of index arrays and
    ``lengths`` the valid frame counts. Returns a Tensor of shape (B,).
    """
    log_probs = dc.as_tensor(log_probs)
    single = log_probs.ndim == 2
    if single:
        log_probs = dc.reshape(log_probs, (1,) + log_probs.shape)
        targets = [targets]
    B, T, V = log_probs.shape
    blank = V - 1 if blank is None else blank
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    if len(targets) != B:
        raise ShapeError(f"ctc_loss: {len(targets)} targets for a batch of {B}")
    losses = np.zeros(B)
    grads = np.zeros_like(log_probs.data)
    for b in range(B):
        tgt = np.asarray(targets[b], dtype=np.int64)
        need = ctc_min_length(tgt)
        if lengths[b] < need:
            raise CTCFeasibilityError(
                f"utterance {b}: {int(lengths[b])} frames cannot emit target needing at least {need}"
            )
        if tgt.size and (tgt.min() < 0 or tgt.max() >= V or np.any(tgt == blank)):
            raise CTCFeasibilityError(f"utterance {b}: target indices must be non-blank symbols in [0, {V})")
        n = int(lengths[b])
        losses[b], grads[b, :n] = _ctc_single(log_probs.data[b, :n], tgt, blank)

    def backward(g):
        return (grads * g[:, None, None],)

    out = dc.make_node(losses, (log_probs,), backward, "ctc")
    return dc.reshape(out, ()) if single else out


def greedy_decode(P, blank=None):
    """Per-frame argmax, collapse repeats, drop blanks."""
    P = P.data if isinstance(P, dc.Tensor) else np.asarray(P)
    blank = P.shape[-1] - 1 if blank is None else blank
    best = np.argmax(P, axis=-1)
    collapsed = temporal_segmentation(best).indices
    return [int(i) for i in collapsed if i != blank]


def text_to_codes(phonemes, codebook):
    """Look up codewords for a phoneme sequence; repeated phonemes stay distinct entries."""
    idx = codebook.inventory.encode(phonemes)
    return CodeSequence(idx, codebook.weights.data[idx].copy())
