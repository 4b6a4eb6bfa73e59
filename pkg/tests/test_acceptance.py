"""End-to-end acceptance suite: one recorded pass/fail line per criterion.

The training criteria (7 and 8) share one run cache, so the full suite trains
each distinct configuration once. Expect roughly half an hour on one core.
"""

import csv
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import CRITERIA
from oracles import brute_force_ctc, random_ctc_instance, three_tones
from vqtts import diffcore as dc
from vqtts import dsp
from vqtts import quantizer as qz
from vqtts.corpus import CorpusConfig, apply_noise_policy
from vqtts.evaluation import eval_recognition
from vqtts.experiments import RunCache, _variant, prepare_corpus, run_experiment
from vqtts.gradcheck_suite import OP_CASES, check_op, full_loss_check
from vqtts.model import ModelConfig, VQTTSModel
from vqtts.synthesizer import DecoderConfig, SpeakerSynthesizer, affine_params, apply_affine
from vqtts.trainer import LossWeights, TrainConfig, Trainer, compose_total, load_checkpoint

ACCEPT_STEPS = 1000
CORPUS = CorpusConfig()
# four frames per decoder step and an encoder pull on the ST path; everything else at defaults
TRAIN = TrainConfig(steps=ACCEPT_STEPS, weights=LossWeights(encoder_pull=1.0),
                    model=ModelConfig(decoder=DecoderConfig(reduction=4)))
NOISE_FRACTION = 0.44
SNR_RANGE = (10.0, 30.0)


def record(number, passed, detail):
    CRITERIA.append((number, bool(passed), detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


# ----------------------------------------------------------------------
# 1-6: fast property criteria
# ----------------------------------------------------------------------


def test_criterion_1_ctc_oracle():
    t0 = time.time()
    rng = np.random.default_rng(0)
    value_err = grad_err = 0.0
    for _ in range(200):
        P, target, V = random_ctc_instance(rng)
        Pt = dc.Tensor(P)
        fn = lambda p: qz.ctc_loss(dc.log(p), target)  # noqa: E731
        value_err = max(value_err, abs(fn(Pt).item() - brute_force_ctc(P, target, V - 1)))
        grad_err = max(grad_err, dc.grad_check(fn, [Pt], step=1e-5).max_error)
    elapsed = time.time() - t0
    record(1, value_err <= 1e-9 and grad_err <= 1e-4 and elapsed < 60,
           f"value error {value_err:.2e} (<=1e-9), gradient error {grad_err:.2e} (<=1e-4), {elapsed:.1f}s (<60s)")


def test_criterion_2_gradient_verification():
    t0 = time.time()
    op_errors = {name: check_op(name).max_error for name in sorted(OP_CASES)}
    full = full_loss_check()
    elapsed = time.time() - t0
    worst_op = max(op_errors, key=op_errors.get)
    ok = max(op_errors.values()) <= 1e-4 and full.max_error <= 1e-4 and elapsed < 120
    record(2, ok, f"{len(op_errors)} ops, worst {worst_op} {op_errors[worst_op]:.2e}; full loss "
                  f"{full.max_error:.2e} over {full.checked} coordinates (<=1e-4), {elapsed:.1f}s (<120s)")


def test_criterion_3_quantizer_invariants():
    rng = np.random.default_rng(0)
    E = rng.normal(size=(6, 4))
    E[4] = E[1]  # duplicate codeword forces ties
    H = rng.normal(size=(1000, 4))
    H[:50] = E[1] + 0.0
    P = qz.posterior(dc.Tensor(H), E).data
    row_err = float(np.abs(P.sum(axis=1) - 1).max())
    d = ((H[:, None, :] - E[None]) ** 2).sum(-1)
    nearest = np.array([min(range(len(E)), key=lambda v: (d[i, v], v)) for i in range(len(H))])
    _, idx = qz.phonetic_clustering(dc.Tensor(H), E)
    argmax_ok = np.array_equal(P.argmax(axis=1), nearest) and np.array_equal(idx, nearest)
    example = qz.temporal_segmentation([3, 3, 7, 7, 7, 1]).indices.tolist() == [3, 7, 1]
    idem = True
    for _ in range(200):
        xs = rng.integers(0, 3, size=rng.integers(0, 12))
        once = qz.temporal_segmentation(xs).indices
        idem &= np.array_equal(qz.temporal_segmentation(once).indices, once)
    inv = qz.PhonemeInventory(tuple("abcde"))
    book = qz.Codebook.on_sphere(inv, 4, 4.0, np.random.default_rng(1))
    inverse = True
    for _ in range(200):
        seq = [str(s) for s in rng.choice(list("abcde"), size=rng.integers(1, 7))]
        codes = qz.text_to_codes(seq, book)
        blank = book.weights.data[[inv.blank]]
        H2 = np.concatenate([np.concatenate([np.repeat(v[None], rng.integers(1, 4), axis=0), blank])
                             for v in codes.vectors])
        inverse &= inv.decode(qz.greedy_decode(qz.posterior(dc.Tensor(H2), book.weights.data))) == seq
    record(3, row_err <= 1e-9 and argmax_ok and example and idem and inverse,
           f"row-sum error {row_err:.1e}, argmax=nearest {argmax_ok}, [3,3,7,7,7,1]->[3,7,1] {example}, "
           f"idempotent {idem}, text_to_codes inverse {inverse}")


def test_criterion_5_affine_conditioning():
    m = np.array([2.0, -1.0])
    example = apply_affine(m, [0.5, 2.0], [1.0, 1.0]).data.tolist() == [0.5, -4.0]
    rng = np.random.default_rng(0)
    identity = all(
        np.array_equal(apply_affine(x, np.ones(7), np.zeros(7)).data, x) for x in rng.normal(size=(100, 7)) * 1e3
    )
    synth = SpeakerSynthesizer(["a", "b", "c"], DecoderConfig(max_frames=40), np.random.default_rng(3))
    gammas = [affine_params(rng.normal(scale=3, size=32), synth.conditioner)[0].data for _ in range(200)]
    nonneg = all(np.all(g >= 0) for g in gammas)
    codes = rng.normal(size=(4, 64))
    before = {s: synth.synthesize(codes, s, seed=5).spectrogram.values for s in ("a", "b")}
    table = synth.speakers.weights.data
    table[[0, 1]] = table[[1, 0]]
    after = {s: synth.synthesize(codes, s, seed=5).spectrogram.values for s in ("a", "b")}
    swap = np.array_equal(before["a"], after["b"]) and np.array_equal(before["b"], after["a"])
    record(5, example and identity and nonneg and swap,
           f"[2,-1]->[0.5,-4] {example}, identity bitwise {identity}, gamma>=0 {nonneg}, row swap {swap}")


def test_criterion_6_griffin_lim():
    t0 = time.time()
    rng = np.random.default_rng(0)
    monotone, worst = True, 0.0
    for _ in range(20):
        S = dsp.stft(dsp.AudioBuffer(three_tones(rng)))
        trace = []
        y = dsp.griffin_lim(S, 60, trace=trace)
        monotone &= bool(np.all(np.diff(trace) <= 1e-9))
        worst = max(worst, dsp.spectral_error(y, S))
    elapsed = time.time() - t0
    record(6, monotone and worst <= 0.15 and elapsed < 60,
           f"non-increasing {monotone}, worst relative spectral error {worst:.4f} (<=0.15), {elapsed:.1f}s (<60s)")


# ----------------------------------------------------------------------
# 4, 7, 8: trained runs on the default toy corpus
# ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def experiments(tmp_path_factory):
    out = tmp_path_factory.mktemp("experiments")
    cache = RunCache()
    prepare_corpus(CORPUS, out / "corpus")
    t0 = time.time()
    reports = {s: run_experiment(s, CORPUS, TRAIN, out, cache) for s in ("multi_paired", "single_paired", "ablation")}
    reports["criterion7_seconds"] = time.time() - t0
    return {"out": out, "cache": cache, "reports": reports}


def by_name(report):
    return {r["name"]: r for r in report.breakdown}


def test_criterion_7_semi_supervised_reproduction(experiments):
    rep = experiments["reports"]
    multi = by_name(rep["multi_paired"])["semi_supervised"]
    single = by_name(rep["single_paired"])
    abl = by_name(rep["ablation"])
    seconds = rep["criterion7_seconds"]
    a = multi["recognition_per"] <= 0.25 and multi["roundtrip_per"] <= 0.30
    gain = single["paired_only"]["roundtrip_per"] - single["semi_supervised"]["roundtrip_per"]
    b = single["semi_supervised"]["roundtrip_per"] <= 0.45 and gain >= 0.10
    c = abl["st_disabled"]["roundtrip_per"] > abl["st_enabled"]["roundtrip_per"]
    record(7, a and b and c and seconds <= 1800,
           f"(a) multi recognition {multi['recognition_per']:.3f} (<=0.25) round-trip {multi['roundtrip_per']:.3f} "
           f"(<=0.30) {a}; (b) single round-trip {single['semi_supervised']['roundtrip_per']:.3f} (<=0.45) vs "
           f"paired-only {single['paired_only']['roundtrip_per']:.3f}, gain {gain:.3f} (>=0.10) {b}; "
           f"(c) ST on {abl['st_enabled']['roundtrip_per']:.3f} < off {abl['st_disabled']['roundtrip_per']:.3f} "
           f"{c}; {seconds:.0f}s (<=1800s)")


def test_criterion_4_loss_composition(experiments):
    worst, rows = 0.0, 0
    for run in sorted((experiments["out"] / "runs").glob("*/metrics.csv")):
        with run.open(newline="") as f:
            for row in csv.DictReader(f):
                parts = {k: float(v) for k, v in row.items()}
                total = compose_total(parts["recon"], parts["ctc"], parts["tts"], parts["aux"], TRAIN.weights.lam)
                worst = max(worst, abs(parts["total"] - total))
                rows += 1
    record(4, rows > 0 and worst <= 1e-12 and TRAIN.weights.lam == 10,
           f"{rows} logged steps, max |total - (10 recon + ctc + tts + aux)| = {worst:.1e} (<=1e-12), lambda 10")


def test_loss_trends_down_over_first_200_steps(experiments):
    run = by_name(experiments["reports"]["multi_paired"])["semi_supervised"]
    with (Path(run["run_dir"]) / "metrics.csv").open(newline="") as f:
        totals = [float(r["total"]) for r in csv.DictReader(f)][:200]
    slope = np.polyfit(np.arange(len(totals)), totals, 1)[0]
    assert len(totals) == 200 and slope < 0


def test_untrained_recognition_is_near_chance(experiments):
    report = run_experiment("baseline", CORPUS, TRAIN, experiments["out"], experiments["cache"])
    untrained = by_name(report)["untrained"]
    assert untrained["recognition_per"] > 0.7


def test_criterion_8_noise_protocol(experiments):
    out = experiments["out"]
    report = run_experiment("noise", CORPUS, TRAIN, out, experiments["cache"],
                            noise_fraction=NOISE_FRACTION, snr_range=SNR_RANGE)
    runs = by_name(report)
    clean, mixed = runs["clean_only"]["roundtrip_per"], runs["clean_plus_noisy"]["roundtrip_per"]
    manifest, test_spk = prepare_corpus(CORPUS, out / "corpus")
    parts = _variant(manifest, test_spk, CORPUS, "single", TRAIN.seed)
    noisy = apply_noise_policy(parts.train, NOISE_FRACTION, SNR_RANGE, out / "corpus" / f"noisy_{NOISE_FRACTION:g}",
                               CORPUS.seed, exclude_speakers=parts.test.speakers)
    corrupted = [(u, v) for u, v in zip(parts.train, noisy) if v.snr_db is not None]
    snr_err = max(abs(dsp.measure_snr(dsp.read_wav(parts.train.path(u)), dsp.read_wav(noisy.path(v))) - v.snr_db)
                  for u, v in corrupted)
    share = len(corrupted) / len(parts.train.unpaired())
    in_range = all(SNR_RANGE[0] <= v.snr_db <= SNR_RANGE[1] for _, v in corrupted)
    record(8, mixed < clean and snr_err <= 0.1 and in_range,
           f"clean+noisy round-trip {mixed:.3f} < clean-only {clean:.3f} {mixed < clean}; {len(corrupted)} files "
           f"({share:.0%} of unpaired), max SNR error {snr_err:.3f} dB (<=0.1)")


# ----------------------------------------------------------------------
# 9: determinism and persistence
# ----------------------------------------------------------------------


def test_criterion_9_determinism_and_resume(tmp_path):
    manifest, test_spk = prepare_corpus(CORPUS, tmp_path / "corpus")
    parts = _variant(manifest, test_spk, CORPUS, "multi", 0)
    cfg = replace(TRAIN, steps=10, checkpoint_interval=5)
    for name in ("a", "b"):
        Trainer(cfg, parts.train, tmp_path / name, speakers=manifest.speakers).run()
    same_log = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    same_ckpt = (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    resumed = Trainer(cfg, parts.train, tmp_path / "resumed", speakers=manifest.speakers)
    resumed.run(resume=tmp_path / "a" / "step000005.ckpt")
    reference = load_checkpoint(tmp_path / "a" / "final.ckpt")["params"]
    same_params = all(np.array_equal(p.data, reference[k]) for k, p in resumed.params.items())
    same_resume = (tmp_path / "resumed" / "final.ckpt").read_bytes() == (tmp_path / "a" / "final.ckpt").read_bytes()
    record(9, same_log and same_ckpt and same_params and same_resume,
           f"identical metrics log {same_log}, identical final checkpoint {same_ckpt}, "
           f"resume at step 5 reproduces step 10 parameters {same_params and same_resume}")
