import numpy as np
import pytest
from scipy.io import wavfile

from vqtts import diffcore as dc
from vqtts import dsp
from vqtts.exceptions import AudioFormatError, ShapeError

from oracles import three_tones

CFG = dsp.StftConfig()


def test_wav_round_trip_16bit(tmp_path):
    t = np.arange(16000) / 16000
    audio = dsp.AudioBuffer(0.8 * np.sin(2 * np.pi * 440 * t))
    dsp.write_wav(audio, tmp_path / "a.wav")
    back = dsp.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - audio.samples)) <= 1 / 32768


def test_wav_round_trip_float(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 500)
    dsp.write_wav(dsp.AudioBuffer(x), tmp_path / "f.wav", bits=32)
    back = dsp.read_wav(tmp_path / "f.wav")
    np.testing.assert_allclose(back.samples, x, atol=1e-7)


def test_wav_empty_and_stereo(tmp_path):
    dsp.write_wav(dsp.AudioBuffer(np.zeros(0)), tmp_path / "e.wav")
    assert len(dsp.read_wav(tmp_path / "e.wav")) == 0
    wavfile.write(tmp_path / "s.wav", 16000, np.zeros((10, 2), dtype=np.int16))
    with pytest.raises(AudioFormatError, match="unsupported channels"):
        dsp.read_wav(tmp_path / "s.wav")


@pytest.mark.filterwarnings("ignore::scipy.io.wavfile.WavFileWarning")
def test_malformed_wav(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF0000WAVEjunk")
    with pytest.raises(AudioFormatError):
        dsp.read_wav(tmp_path / "bad.wav")


def test_stft_shapes_and_zero_signal():
    spec = dsp.stft(dsp.AudioBuffer(np.zeros(1000)), CFG)
    assert spec.values.shape == (1 + (1000 - 400) // 160, 257)
    assert np.all(spec.values == 0)
    with pytest.raises(ShapeError):
        dsp.stft(dsp.AudioBuffer(np.zeros(399)), CFG)


def test_stft_bin_peak_rectangular_window():
    cfg = dsp.StftConfig(win_length=512, hop_length=256, n_fft=512, window="boxcar")
    k = 37
    x = np.cos(2 * np.pi * k * np.arange(2048) / 512)
    spec = dsp.stft(dsp.AudioBuffer(x), cfg).values
    assert np.all(spec.argmax(axis=1) == k)


def test_windowed_parseval():
    rng = np.random.default_rng(3)
    x = rng.normal(size=3000)
    X = dsp.stft_complex(x, CFG)
    frames = dsp._frames(x, CFG) * dsp._window(CFG)
    w = np.full(CFG.n_bins, 2.0)
    w[[0, -1]] = 1.0
    spectral = (w * np.abs(X) ** 2).sum(axis=1) / CFG.n_fft
    direct = (frames**2).sum(axis=1)
    np.testing.assert_allclose(spectral / direct, 1.0, atol=1e-9)


def test_mel_impulse_all_ones_zero_and_linearity():
    fb = dsp.mel_filterbank(CFG)
    assert np.all(fb.sum(axis=0) <= 1 + 1e-12)
    impulse = np.zeros((1, CFG.n_bins))
    impulse[0, 60] = 1.0
    mel = dsp.mel_project(dsp.Spectrogram(impulse, "linear", CFG)).values
    assert 1 <= np.count_nonzero(mel) <= 2
    ones = dsp.mel_project(dsp.Spectrogram(np.ones((2, CFG.n_bins)), "linear", CFG)).values
    np.testing.assert_allclose(ones[0], fb.sum(axis=1), atol=1e-12)
    zero = dsp.mel_project(dsp.Spectrogram(np.zeros((2, CFG.n_bins)), "linear", CFG)).values
    assert np.all(zero == 0)
    rng = np.random.default_rng(0)
    s1, s2 = rng.uniform(size=(2, 5, CFG.n_bins))
    lhs = dsp.mel_project(dsp.Spectrogram(2.5 * s1 - 0.5 * s2, "linear", CFG)).values
    rhs = 2.5 * dsp.mel_project(dsp.Spectrogram(s1, "linear", CFG)).values - 0.5 * dsp.mel_project(
        dsp.Spectrogram(s2, "linear", CFG)
    ).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_mel_band_count_exceeding_bins():
    with pytest.raises(ShapeError):
        dsp.mel_filterbank(dsp.StftConfig(win_length=16, hop_length=8, n_fft=16, n_mels=20))


def test_mel_rejects_mel_input():
    with pytest.raises(ValueError):
        dsp.mel_project(dsp.Spectrogram(np.zeros((2, 40)), "mel", CFG))


def test_compress_round_trip():
    mag = np.array([1e-3, 0.5, 2.0, 50.0])
    np.testing.assert_allclose(dsp.decompress(dsp.compress(mag)), mag, rtol=1e-12)


def test_griffin_lim_zero_and_negative():
    zero = dsp.Spectrogram(np.zeros((5, CFG.n_bins)), "linear", CFG)
    assert np.all(dsp.griffin_lim(zero, 10).samples == 0)
    with pytest.raises(ValueError):
        dsp.griffin_lim(dsp.Spectrogram(-np.ones((5, CFG.n_bins)), "linear", CFG))


def test_griffin_lim_iteration_zero_is_zero_phase_inverse():
    rng = np.random.default_rng(1)
    S = dsp.stft(dsp.AudioBuffer(three_tones(rng, n=4000)), CFG)
    out = dsp.griffin_lim(S, 0).samples
    expected = np.clip(dsp.istft(S.values.astype(complex), CFG), -1, 1)
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("momentum", [0.0, 0.99])
def test_griffin_lim_converges_monotonically(momentum):
    rng = np.random.default_rng(2)
    S = dsp.stft(dsp.AudioBuffer(three_tones(rng, n=8000)), CFG)
    trace = []
    y = dsp.griffin_lim(S, 60, momentum=momentum, trace=trace)
    assert len(trace) == 61
    assert np.all(np.diff(trace) <= 1e-9)
    assert dsp.stft(y, CFG).values.shape == S.values.shape
    err = dsp.spectral_error(y, S)
    assert err < trace[0] / dsp._hermitian_norm(S.values, CFG.n_fft)
    assert np.all(np.abs(y.samples) <= 1)


def test_differential_spectral_loss_examples():
    assert dsp.differential_spectral_loss(dc.Tensor([[0.0], [2.0]]), np.zeros((2, 1))).item() == 6.0
    target = np.tile(np.array([[0.3, 0.7]]), (4, 1))
    pred = np.tile(np.array([[0.1, 0.2]]), (4, 1))
    plain = dc.mse(dc.Tensor(pred), target).item()
    assert dsp.differential_spectral_loss(dc.Tensor(pred), target).item() == plain
    x = np.random.default_rng(0).normal(size=(6, 3))
    assert dsp.differential_spectral_loss(dc.Tensor(x), x).item() == 0.0
    with pytest.raises(ShapeError):
        dsp.differential_spectral_loss(dc.Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


def test_differential_spectral_loss_masked_ignores_padding():
    rng = np.random.default_rng(4)
    pred = rng.normal(size=(1, 6, 2))
    target = rng.normal(size=(1, 6, 2))
    mask = np.array([[1, 1, 1, 1, 0, 0]])
    full = dsp.differential_spectral_loss(dc.Tensor(pred[:, :4]), target[:, :4]).item()
    masked = dsp.differential_spectral_loss(dc.Tensor(pred), target, mask).item()
    assert abs(full - masked) < 1e-12


def test_differential_spectral_loss_gradient():
    rng = np.random.default_rng(5)
    pred = dc.Tensor(rng.normal(size=(2, 5, 3)))
    target = rng.normal(size=(2, 5, 3))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
    res = dc.grad_check(lambda p: dsp.differential_spectral_loss(p, target, mask), [pred])
    assert res.max_error <= 1e-6


def test_mix_noise_clean_sentinel_and_snr():
    rng = np.random.default_rng(6)
    clean = dsp.AudioBuffer(0.2 * rng.normal(size=8000))
    noise = dsp.AudioBuffer(rng.normal(size=3000))
    same = dsp.mix_noise(clean, noise, float("inf"))
    np.testing.assert_array_equal(same.samples, clean.samples)
    mixed = dsp.mix_noise(clean, noise, 20.0)
    assert abs(dsp.measure_snr(clean, mixed) - 20.0) <= 0.1
    with pytest.raises(ValueError):
        dsp.mix_noise(dsp.AudioBuffer(np.zeros(10)), noise, 10.0)


def test_mix_noise_snr_over_random_draws():
    rng = np.random.default_rng(7)
    for _ in range(100):
        clean = dsp.AudioBuffer(0.1 * rng.normal(size=2000))
        noise = dsp.AudioBuffer(rng.normal(size=2000))
        snr = rng.uniform(10, 30)
        assert abs(dsp.measure_snr(clean, dsp.mix_noise(clean, noise, snr)) - snr) <= 0.1
