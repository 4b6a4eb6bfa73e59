import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqtts import diffcore as dc
from vqtts.encoder import EncoderConfig, PhoneticEncoder
from vqtts.exceptions import ShapeError

TINY = EncoderConfig(n_mels=5, conv_channels=(4, 3), kernel=3, downsample=2, hidden=4, dim=3)


def test_shape_for_eight_frames():
    enc = PhoneticEncoder()
    mel = np.random.default_rng(0).uniform(size=(8, 40))
    assert enc.encode(mel).values.shape == (4, 64)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 4))
def test_shape_law(T, r):
    cfg = EncoderConfig(n_mels=5, conv_channels=(4, 3), kernel=3, downsample=r, hidden=4, dim=3)
    enc = PhoneticEncoder(cfg, np.random.default_rng(0))
    H, lengths = enc(np.ones((1, T, 5)))
    assert H.shape == (1, -(-T // r), 3)
    assert lengths.tolist() == [-(-T // r)]
    assert np.all(np.isfinite(H.data))


def test_deterministic_and_seeded():
    mel = np.random.default_rng(1).uniform(size=(13, 40))
    a = PhoneticEncoder(rng=np.random.default_rng(5)).encode(mel).values
    b = PhoneticEncoder(rng=np.random.default_rng(5)).encode(mel).values
    assert np.array_equal(a, b)
    c = PhoneticEncoder(rng=np.random.default_rng(6)).encode(mel).values
    assert not np.array_equal(a, c)


def test_band_mismatch():
    with pytest.raises(ShapeError, match="40 mel bands"):
        PhoneticEncoder().encode(np.zeros((10, 80)))


def test_batch_padding_does_not_change_valid_frames():
    rng = np.random.default_rng(2)
    enc = PhoneticEncoder(TINY, rng)
    short = rng.uniform(size=(7, 5))
    long = rng.uniform(size=(12, 5))
    batch = np.zeros((2, 12, 5))
    batch[0, :7] = short
    batch[1] = long
    H, lengths = enc(batch, [7, 12])
    alone, _ = enc(short[None])
    assert lengths.tolist() == [4, 6]
    np.testing.assert_allclose(H.data[0, :4], alone.data[0], rtol=0, atol=1e-13)


def test_initialisation_bounds():
    enc = PhoneticEncoder(rng=np.random.default_rng(3))
    w = enc.params["enc.conv0.w"].data
    a = np.sqrt(6.0 / (5 * 40 + 5 * 64))
    assert np.abs(w).max() <= a
    assert np.abs(w).max() > 0.9 * a
    assert np.all(enc.params["enc.proj.b"].data == 0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    enc = PhoneticEncoder(TINY, rng)
    mel = dc.Tensor(rng.uniform(size=(2, 6, 5)))
    target = rng.normal(size=(2, 3, 3))
    params = list(enc.params.values())

    def loss(*ps):
        enc.params = dict(zip(enc.params, ps))
        H, _ = enc(mel, [6, 4])
        return dc.mse(H, target)

    res = dc.grad_check(loss, params)
    assert res.max_error <= 1e-4


def test_no_dead_parameters_over_ten_seeds():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        enc = PhoneticEncoder(TINY, rng)
        H, _ = enc(rng.uniform(size=(3, 9, 5)), [9, 7, 5])
        dc.backward(dc.mse(H, rng.normal(size=H.shape)))
        for name, p in enc.params.items():
            assert p.grad is not None and np.any(p.grad != 0), (seed, name)
