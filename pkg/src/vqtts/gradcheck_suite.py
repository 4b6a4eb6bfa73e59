"""Finite-difference verification of every differentiable op and of the full training loss."""

import zlib

import numpy as np

from . import diffcore as dc
from .encoder import EncoderConfig
from .quantizer import PhonemeInventory, ctc_loss
from .synthesizer import DecoderConfig


def _rand(rng, *shape, scale=1.0):
    return dc.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


OP_CASES = {
    "add": lambda r: ([_rand(r, 3, 4), _rand(r, 4)], lambda a, b: dc.add(a, b)),
    "sub": lambda r: ([_rand(r, 3, 4), _rand(r, 3, 1)], lambda a, b: dc.sub(a, b)),
    "mul": lambda r: ([_rand(r, 3, 4), _rand(r, 3, 4)], lambda a, b: dc.mul(a, b)),
    "matmul": lambda r: ([_rand(r, 2, 3, 4), _rand(r, 4, 5)], dc.matmul),
    "bmm": lambda r: ([_rand(r, 2, 1, 4), _rand(r, 2, 4, 3)], dc.matmul),
    "neg": lambda r: ([_rand(r, 3, 2)], dc.neg),
    "relu": lambda r: ([_rand(r, 4, 3)], dc.relu),
    "tanh": lambda r: ([_rand(r, 4, 3)], dc.tanh),
    "sigmoid": lambda r: ([_rand(r, 4, 3, scale=3)], dc.sigmoid),
    "exp": lambda r: ([_rand(r, 4, 3)], dc.exp),
    "log": lambda r: ([dc.Tensor(r.uniform(0.5, 2.0, (4, 3)))], dc.log),
    "softmax": lambda r: ([_rand(r, 3, 5)], lambda a: dc.softmax(a, axis=-1)),
    "log_softmax": lambda r: ([_rand(r, 3, 5)], lambda a: dc.log_softmax(a, axis=0)),
    "neg_l2_distance": lambda r: ([_rand(r, 2, 3, 4), _rand(r, 5, 4)], dc.neg_l2_distance),
    "mse": lambda r: ([_rand(r, 3, 4), _rand(r, 3, 4)], dc.mse),
    "mse_masked": lambda r: (
        [_rand(r, 2, 5, 3), _rand(r, 2, 5, 3)],
        lambda a, b: dc.mse(a, b, mask=np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])[..., None]),
    ),
    "temporal_diff": lambda r: ([_rand(r, 2, 5, 3)], dc.temporal_diff),
    "concat": lambda r: ([_rand(r, 2, 3), _rand(r, 2, 4)], lambda a, b: dc.concat([a, b], -1)),
    "stack": lambda r: ([_rand(r, 2, 3), _rand(r, 2, 3)], lambda a, b: dc.stack([a, b], 1)),
    "getitem": lambda r: ([_rand(r, 4, 5)], lambda a: a[1:3, ::2]),
    "gather": lambda r: ([_rand(r, 4, 5)], lambda a: a[np.array([0, 2, 2])]),
    "embedding": lambda r: ([_rand(r, 4, 3)], lambda a: dc.embedding(a, [1, 3, 1])),
    "reshape": lambda r: ([_rand(r, 4, 6)], lambda a: dc.reshape(a, (2, 12))),
    "transpose": lambda r: ([_rand(r, 2, 3, 4)], lambda a: dc.transpose(a, (2, 0, 1))),
    "sum": lambda r: ([_rand(r, 3, 4)], lambda a: dc.tsum(a, axis=1)),
    "mean": lambda r: ([_rand(r, 3, 4)], lambda a: dc.mean(a, axis=0, keepdims=True)),
    "conv1d": lambda r: ([_rand(r, 2, 7, 3), _rand(r, 5, 3, 4), _rand(r, 4)], dc.conv1d),
    "conv1d_stride2": lambda r: (
        [_rand(r, 2, 7, 3), _rand(r, 5, 3, 2), _rand(r, 2)],
        lambda x, w, b: dc.conv1d(x, w, b, stride=2),
    ),
    "gru_step": lambda r: (
        [_rand(r, 3, 4), _rand(r, 3, 5), _rand(r, 4, 15), _rand(r, 5, 15), _rand(r, 15), _rand(r, 15)],
        dc.gru_step,
    ),
    "gru_sequence": lambda r: (
        [_rand(r, 2, 4, 3), _rand(r, 3, 6), _rand(r, 2, 6), _rand(r, 6), _rand(r, 6), _rand(r, 2, 2)],
        dc.gru_sequence,
    ),
    "dropout": lambda r: ([_rand(r, 4, 3)], lambda a: dc.dropout(a, 0.3, np.random.default_rng(0))),
    "straight_through": lambda r: ([_rand(r, 3, 2)], lambda h: dc.straight_through(h, np.round(h.data))),
    "bce_with_logits": lambda r: (
        [_rand(r, 3, 4, scale=2)],
        lambda a: dc.bce_with_logits(a, (np.arange(12).reshape(3, 4) % 2).astype(float),
                                     mask=np.array([[1, 1, 1, 0]] * 3), pos_weight=3.0),
    ),
    "ctc": lambda r: (
        [dc.Tensor(r.normal(size=(2, 6, 4)))],
        lambda a: ctc_loss(dc.log_softmax(a, axis=-1), [[0, 1], [2, 2]], lengths=[6, 5]),
    ),
}


def check_op(name, seed=0):
    """grad_check of a random weighted sum of one op's output."""
    rng = np.random.default_rng([zlib.crc32(name.encode()), seed])
    inputs, op = OP_CASES[name](rng)
    weights = rng.normal(size=op(*inputs).shape)
    return dc.grad_check(lambda *args: dc.tsum(dc.mul(op(*args), weights)), inputs, step=1e-5)


TINY_ENCODER = EncoderConfig(n_mels=4, conv_channels=(3,), kernel=3, downsample=2, hidden=3, dim=3)
TINY_DECODER = DecoderConfig(code_dim=3, enc_channels=3, enc_kernel=3, attention_dim=3, location_kernel=3,
                             prenet=(3, 3), rnn1=3, rnn2=3, postnet_layers=2, postnet_channels=3,
                             postnet_kernel=3, n_bins=5, reduction=2, max_frames=8, speaker_dim=2)


def full_loss_check(seed=0, st_enabled=True, max_coords=None):
    """grad_check of the complete mixed paired/unpaired loss on a tiny model and a 4-frame batch.

    The model's own parameter tensors are the grad_check inputs, so the
    perturbations act on the live model.
    """
    from .model import ModelConfig, VQTTSModel
    from .trainer import LossWeights, make_batch, total_loss

    rng = np.random.default_rng(seed)
    model = VQTTSModel(PhonemeInventory(("x", "y")), ["s0", "s1"],
                       ModelConfig(TINY_ENCODER, TINY_DECODER, codebook_radius=1.0), seed=seed)
    paired = make_batch([(rng.uniform(size=(4, 4)), rng.uniform(size=(4, 5)))], ["s0"], [["x", "y"]])
    unpaired = make_batch([(rng.uniform(size=(4, 4)), rng.uniform(size=(4, 5)))], ["s1"])
    # zero-initialised biases put ReLUs exactly on their kink; check at a generic point instead
    for t in model.parameters().values():
        t.data += rng.normal(scale=0.1, size=t.shape)

    def loss(*_):
        return total_loss(paired, unpaired, model, LossWeights(), st_enabled, np.random.default_rng(1))[0]

    return dc.grad_check(loss, list(model.parameters().values()), max_coords=max_coords)


def run_all(seed=0, verbose=False):
    worst = 0.0
    for name in sorted(OP_CASES):
        err = check_op(name, seed).max_error
        worst = max(worst, err)
        if verbose:
            print(f"{name:20s} {err:.3e}")
    res = full_loss_check(seed)
    if verbose:
        print(f"{'full_loss':20s} {res.max_error:.3e} ({res.checked} coordinates)")
    return max(worst, res.max_error)
