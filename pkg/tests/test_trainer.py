import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqtts import diffcore as dc
from vqtts.corpus import CorpusConfig, generate_corpus
from vqtts.encoder import EncoderConfig
from vqtts.exceptions import CheckpointError
from vqtts.model import ModelConfig
from vqtts.synthesizer import DecoderConfig
from vqtts.trainer import (
    LossWeights,
    TrainConfig,
    Trainer,
    clip_grad_norm,
    compose_total,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)

SMALL_MODEL = ModelConfig(
    EncoderConfig(conv_channels=(6,), hidden=6, dim=6),
    DecoderConfig(code_dim=6, enc_channels=6, attention_dim=4, prenet=(6, 4), rnn1=6, rnn2=6,
                  postnet_layers=2, postnet_channels=4, speaker_dim=3),
)
SMALL_TRAIN = TrainConfig(steps=4, paired_batch=2, unpaired_batch=2, model=SMALL_MODEL)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    cfg = CorpusConfig(n_speakers=3, n_phonemes=4, n_utterances=12, paired_fraction=0.34, n_test_speakers=1,
                       phonemes_per_utterance=(3, 4))
    return generate_corpus(cfg, tmp_path_factory.mktemp("corpus"))


def batches(trainer):
    return (trainer.features.batch(trainer.paired[:2], with_phonemes=True),
            trainer.features.batch(trainer.unpaired[:2]))


def test_compose_total_examples():
    assert compose_total(0, 0, 0, 0, 10) == 0
    assert compose_total(0.2, 1.5, 0.3, 0, 10) == pytest.approx(3.8, abs=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lam=0)
    with pytest.raises(ValueError):
        LossWeights(stop=-1)
    assert LossWeights().lam == 10


def test_total_loss_composition_and_empty_unpaired(corpus):
    tr = Trainer(SMALL_TRAIN, corpus)
    paired, unpaired = batches(tr)
    loss, parts = total_loss(paired, unpaired, tr.model)
    assert abs(parts.total - compose_total(parts.recon, parts.ctc, parts.tts, parts.aux, 10)) <= 1e-12
    assert loss.item() == parts.total
    _, sup = total_loss(paired, None, tr.model)
    assert sup.recon == 0 and sup.ctc > 0 and sup.tts > 0


def encoder_grad_norm(tr, paired, unpaired, st_enabled, weights=LossWeights()):
    tr.model.zero_grad()
    loss, _ = total_loss(paired, unpaired, tr.model, weights, st_enabled=st_enabled)
    dc.backward(loss)
    enc = [p.grad for k, p in tr.params.items() if k.startswith("enc.") and p.grad is not None]
    return sum(float(np.abs(g).sum()) for g in enc)


def test_ablation_blocks_encoder_gradient_from_reconstruction(corpus):
    tr = Trainer(SMALL_TRAIN, corpus)
    _, unpaired = batches(tr)
    assert encoder_grad_norm(tr, None, unpaired, st_enabled=True) > 0
    assert encoder_grad_norm(tr, None, unpaired, st_enabled=False) == 0
    # the encoder pull belongs to the ST path and stays off in the ablation
    assert encoder_grad_norm(tr, None, unpaired, st_enabled=False, weights=LossWeights(encoder_pull=1.0)) == 0


def test_encoder_pull_adds_to_aux(corpus):
    tr = Trainer(SMALL_TRAIN, corpus)
    _, unpaired = batches(tr)
    _, base = total_loss(None, unpaired, tr.model)
    _, pulled = total_loss(None, unpaired, tr.model, LossWeights(encoder_pull=1.0))
    assert pulled.aux > base.aux and pulled.recon == base.recon


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.01, 10))
def test_clip_bounds_global_norm(seed, bound):
    rng = np.random.default_rng(seed)
    grads = {k: rng.normal(scale=rng.uniform(0.01, 5), size=(3, 2)) for k in "abc"}
    before = {k: g.copy() for k, g in grads.items()}
    pre = clip_grad_norm(grads, bound)
    post = np.sqrt(sum((g * g).sum() for g in grads.values()))
    assert post <= bound * (1 + 1e-12)
    if pre <= bound:
        assert all(np.array_equal(before[k], grads[k]) for k in grads)


def test_checkpoint_round_trip_bytes(corpus, tmp_path):
    tr = Trainer(SMALL_TRAIN, corpus)
    tr.train_step()
    save_checkpoint(tr.state(), tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_errors(corpus, tmp_path):
    tr = Trainer(SMALL_TRAIN, corpus)
    path = tmp_path / "a.ckpt"
    save_checkpoint(tr.state(), path)
    data = bytearray(path.read_bytes())
    name = b"param/enc.proj.w"
    at = data.index(name) + len(name) + 9 + 40
    data[at] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="enc.proj.w"):
        load_checkpoint(tmp_path / "bad.ckpt")
    version = bytearray(path.read_bytes())
    version[5] = 9
    (tmp_path / "v.ckpt").write_bytes(bytes(version))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_restore_rejects_other_configuration(corpus, tmp_path):
    tr = Trainer(SMALL_TRAIN, corpus)
    other = Trainer(TrainConfig(steps=4, paired_batch=2, unpaired_batch=1, model=SMALL_MODEL), corpus)
    with pytest.raises(CheckpointError):
        other.restore(tr.state())


def test_training_is_deterministic(corpus, tmp_path):
    for run in ("a", "b"):
        Trainer(SMALL_TRAIN, corpus, tmp_path / run).run()
    for name in ("metrics.csv", "final.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "step,recon,ctc,tts,aux,total" and len(rows) == 5


def test_resume_matches_uninterrupted_run(corpus, tmp_path):
    cfg = TrainConfig(steps=4, paired_batch=2, unpaired_batch=2, checkpoint_interval=2, model=SMALL_MODEL)
    full = Trainer(cfg, corpus, tmp_path / "full")
    full.run()
    resumed = Trainer(cfg, corpus, tmp_path / "resumed")
    resumed.run(resume=tmp_path / "full" / "step000002.ckpt")
    assert resumed.step == 4
    for k, p in full.params.items():
        assert np.array_equal(p.data, resumed.params[k].data), k
    assert (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "resumed" / "final.ckpt").read_bytes()


def test_config_round_trip_and_validation():
    cfg = TrainConfig(steps=7, lr=3e-4, model=SMALL_MODEL)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


def test_commitment_term_adds_to_aux_and_reaches_codebook(corpus):
    tr = Trainer(SMALL_TRAIN, corpus)
    _, unpaired = batches(tr)
    _, base = total_loss(None, unpaired, tr.model)
    tr.model.zero_grad()
    loss, pulled = total_loss(None, unpaired, tr.model, LossWeights(commitment=1.0))
    assert pulled.aux > base.aux and pulled.recon == base.recon
    dc.backward(loss)
    assert np.abs(tr.params["codebook"].grad).sum() > 0
