"""Command-line interface: corpus generation, training, synthesis, evaluation, gradient checks."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import CorpusConfig, Manifest, apply_noise_policy, generate_corpus, load_manifest, split, write_manifest
from .evaluation import eval_recognition, eval_roundtrip
from .exceptions import VQTTSError
from .experiments import SUITES, run_experiment
from .model import STFT
from .trainer import TrainConfig, Trainer, load_checkpoint, model_from_checkpoint

log = logging.getLogger("vqtts")


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8")) if path else {}


def _write_report(report, out):
    text = json.dumps(report.to_dict() if hasattr(report, "to_dict") else report, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def read_prompts(path):
    prompts = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            d = json.loads(line)
            if "phonemes" not in d or "speaker" not in d:
                raise ValueError(f"{path}:{n}: prompt needs 'phonemes' and 'speaker'")
            prompt = {"phonemes": list(d["phonemes"]), "speaker": str(d["speaker"])}
            if d.get("audio"):
                prompt["audio"] = str(Path(path).parent / d["audio"])
            prompts.append(prompt)
    return prompts


def _corpus_config(args):
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    return CorpusConfig.from_dict(d)


def _train_config(args):
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def cmd_corpus_gen(args):
    cfg = _corpus_config(args)
    m = generate_corpus(cfg, args.out)
    print(f"wrote {len(m)} utterances ({len(m.paired())} paired) to {args.out}")


def cmd_corpus_noise(args):
    d = _read_json(args.config)
    fraction = d.get("noise_fraction", args.fraction)
    snr = tuple(d.get("snr_range", args.snr))
    m = load_manifest(Path(args.data) / "manifest.jsonl")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = Path(args.data) / "corpus.json"
    test_spk = json.loads(meta.read_text())["test_speakers"] if meta.exists() else []
    noisy = apply_noise_policy(m, fraction, snr, out, seed=args.seed or 0, noise_dir=args.noise_dir,
                               by_speaker=not args.by_utterance, exclude_speakers=test_spk)
    utts = [replace(u, audio=os.path.relpath(noisy.path(u).resolve(), out.resolve())) for u in noisy]
    write_manifest(Manifest(utts, noisy.inventory, out), out / "manifest.jsonl")
    if meta.exists():
        shutil.copyfile(meta, out / "corpus.json")
    print(f"corrupted {sum(u.snr_db is not None for u in noisy)} utterances; manifest in {out}")


def _training_split(data, seed):
    m = load_manifest(Path(data) / "manifest.jsonl")
    meta = Path(data) / "corpus.json"
    test_spk = json.loads(meta.read_text())["test_speakers"] if meta.exists() else []
    return m, split(m, test_spk, seed)


def cmd_train(args):
    cfg = _train_config(args)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    m, parts = _training_split(args.data, cfg.seed)
    trainer = Trainer(cfg, parts.train, args.out, speakers=m.speakers)
    result = trainer.run(resume=args.resume)
    print(f"trained {trainer.step} steps; final checkpoint {result.checkpoint}")


def cmd_synth(args):
    model, _ = model_from_checkpoint(load_checkpoint(args.ckpt))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    for k, p in enumerate(read_prompts(args.prompts)):
        res = model.synthesize(p["phonemes"], p["speaker"], seed=seed + k)
        mag = dsp.decompress(np.clip(res.spectrogram.values, 0, 1))
        audio = dsp.griffin_lim(dsp.Spectrogram(mag, "linear", STFT), args.iterations)
        dsp.write_wav(audio, out / f"prompt{k:04d}_{p['speaker']}.wav")
        np.save(out / f"prompt{k:04d}_{p['speaker']}.npy", res.spectrogram.values)
    print(f"synthesised prompts into {out}")


def cmd_eval_recognition(args):
    state = load_checkpoint(args.ckpt)
    model, cfg = model_from_checkpoint(state)
    _, parts = _training_split(args.data, cfg.seed)
    target = getattr(parts, args.split)
    report = eval_recognition(model, target, seed=args.seed or 0, config=state["config"])
    _write_report(report, args.out)
    print(f"recognition PER {report.value:.4f} over {len(report.breakdown)} utterances", file=sys.stderr)


def cmd_eval_roundtrip(args):
    state = load_checkpoint(args.ckpt)
    model, _ = model_from_checkpoint(state)
    report = eval_roundtrip(model, read_prompts(args.prompts), seed=args.seed or 0, config=state["config"])
    _write_report(report, args.out)
    print(f"round-trip PER {report.value:.4f} over {len(report.breakdown)} prompts", file=sys.stderr)


def cmd_eval_experiment(args):
    d = _read_json(args.config)
    corpus_cfg = CorpusConfig.from_dict(d.get("corpus", {}))
    train_cfg = TrainConfig.from_dict(d.get("train", {}))
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    out = Path(args.out or "experiments")
    report = run_experiment(args.suite, corpus_cfg, train_cfg, out, n_prompts=d.get("n_prompts"),
                            noise_fraction=d.get("noise_fraction", 0.44))
    _write_report(report, out / f"{args.suite}.json")
    names, pers = report.extra["names"], report.extra["roundtrip_per"]
    print(f"{args.suite}: {names[0]} {pers[0]:.4f} vs {names[1]} {pers[1]:.4f}")


def cmd_gradcheck(args):
    from .gradcheck_suite import run_all

    worst = run_all(seed=args.seed or 0, verbose=True)
    print(f"max relative error {worst:.3e}")
    return 0 if worst <= 1e-4 else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="vqtts", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="random seed (u64)")
        p.add_argument("--out", help="output directory or file")

    corpus = sub.add_parser("corpus").add_subparsers(dest="action", required=True)
    p = corpus.add_parser("gen", help="generate the synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_corpus_gen)
    p = corpus.add_parser("noise", help="corrupt part of the unpaired utterances")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.44)
    p.add_argument("--snr", type=float, nargs=2, default=(10.0, 30.0))
    p.add_argument("--noise-dir")
    p.add_argument("--by-utterance", action="store_true",
                   help="draw corrupted utterances at random instead of corrupting whole speakers")
    p.set_defaults(func=cmd_corpus_noise)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesise prompts to WAV with Griffin-Lim")
    common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--iterations", type=int, default=60)
    p.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval").add_subparsers(dest="action", required=True)
    p = ev.add_parser("recognition")
    common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.set_defaults(func=cmd_eval_recognition)
    p = ev.add_parser("roundtrip")
    common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts", required=True)
    p.set_defaults(func=cmd_eval_roundtrip)
    p = ev.add_parser("experiment")
    common(p)
    p.add_argument("--suite", choices=SUITES, required=True)
    p.set_defaults(func=cmd_eval_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    common(p, config=False)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.func(args)
    except (VQTTSError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
