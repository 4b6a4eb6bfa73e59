"""Parameter initialisation helpers shared by the model components."""

import numpy as np

from . import diffcore as dc


def glorot(rng, shape, fan_in=None, fan_out=None, gain=1.0):
    """Uniform in [-a, a] with a = gain * sqrt(6 / (fan_in + fan_out))."""
    if fan_in is None:
        receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
        fan_in = shape[-2] * receptive
        fan_out = shape[-1] * receptive
    a = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return dc.Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def zeros(*shape):
    return dc.Tensor(np.zeros(shape), requires_grad=True)


def constant(value, *shape):
    return dc.Tensor(np.full(shape, float(value)), requires_grad=True)


def gru_params(rng, prefix, n_in, n_hidden):
    return {
        f"{prefix}.wx": glorot(rng, (n_in, 3 * n_hidden), n_in, n_hidden),
        f"{prefix}.wh": glorot(rng, (n_hidden, 3 * n_hidden), n_hidden, n_hidden),
        f"{prefix}.bx": zeros(3 * n_hidden),
        f"{prefix}.bh": zeros(3 * n_hidden),
    }


def gru_args(params, prefix):
    return tuple(params[f"{prefix}.{k}"] for k in ("wx", "wh", "bx", "bh"))


def time_mask(lengths, steps):
    """(B, steps) 0/1 mask of valid positions."""
    return (np.arange(steps)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
