"""Matched-pair training experiments on the synthetic corpus."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path

from .corpus import (
    CorpusConfig,
    apply_noise_policy,
    assign_paired,
    generate_corpus,
    held_out_speakers,
    load_manifest,
    split,
)
from .evaluation import MetricReport, eval_recognition, eval_roundtrip, prompts_from_manifest
from .trainer import TrainConfig, Trainer

log = logging.getLogger(__name__)

SUITES = ("baseline", "multi_paired", "single_paired", "noise", "ablation")


class RunCache:
    """Trained-and-evaluated runs keyed by their full configuration, so suites can share runs."""

    def __init__(self):
        self._runs = {}

    def get(self, key, build):
        if key not in self._runs:
            self._runs[key] = build()
        return self._runs[key]


def _key(*parts):
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def prepare_corpus(corpus_cfg, root):
    """Generate (once) the audio corpus and return (manifest, test speakers)."""
    root = Path(root)
    manifest_path = root / "manifest.jsonl"
    meta = root / "corpus.json"
    if manifest_path.exists() and meta.exists() and json.loads(meta.read_text())["config"] == json.loads(
        json.dumps(asdict(corpus_cfg))
    ):
        manifest = load_manifest(manifest_path)
    else:
        manifest = generate_corpus(corpus_cfg, root)
    return manifest, held_out_speakers(manifest.speakers, corpus_cfg.n_test_speakers)


def _variant(manifest, test_spk, corpus_cfg, policy, seed):
    m = assign_paired(manifest, corpus_cfg.paired_fraction, policy, test_spk, corpus_cfg.seed)
    return split(m, test_spk, seed)


def run_config(name, parts, train_cfg, out_dir, speakers, n_prompts=None, eval_seed=0):
    """Train on ``parts.train`` and evaluate on ``parts.test``; returns a summary dict."""
    t0 = time.time()
    trainer = Trainer(train_cfg, parts.train, out_dir, speakers=speakers)
    if train_cfg.steps:
        trainer.run()
    elapsed = time.time() - t0
    prompts = prompts_from_manifest(parts.test)
    if n_prompts:
        prompts = prompts[:n_prompts]
    rec = eval_recognition(trainer.model, parts.test, seed=eval_seed)
    rt = eval_roundtrip(trainer.model, prompts, seed=eval_seed)
    log.info("%s: recognition PER %.3f, round-trip PER %.3f (%.0fs)", name, rec.value, rt.value, elapsed)
    return {
        "name": name, "run_dir": str(out_dir), "train_config": train_cfg.to_dict(), "train_seconds": elapsed,
        "recognition_per": rec.value, "roundtrip_per": rt.value,
        "roundtrip_per_speaker": rt.extra["per_speaker"],
        "final_loss": trainer.history[-1].total if trainer.history else None,
        "recognition": rec.breakdown, "roundtrip": rt.breakdown,
    }


def suite_configs(suite, train_cfg):
    """(policy, [(name, train config, noise mode)]) for a suite; noise mode in {None, 'clean', 'all'}."""
    semi = train_cfg
    paired_only = replace(train_cfg, unpaired_batch=0)
    if suite == "baseline":
        return "multi", [("untrained", replace(paired_only, steps=0), None), ("paired_only", paired_only, None)]
    if suite == "multi_paired":
        return "multi", [("semi_supervised", semi, None), ("paired_only", paired_only, None)]
    if suite == "single_paired":
        return "single", [("semi_supervised", semi, None), ("paired_only", paired_only, None)]
    if suite == "ablation":
        return "single", [("st_enabled", replace(semi, st_enabled=True), None),
                          ("st_disabled", replace(semi, st_enabled=False), None)]
    if suite == "noise":
        return "single", [("clean_only", semi, "clean"), ("clean_plus_noisy", semi, "all")]
    raise ValueError(f"unknown experiment suite {suite!r}; choose from {SUITES}")


def run_experiment(suite, corpus_cfg=CorpusConfig(), train_cfg=TrainConfig(), out_dir="experiments",
                   cache=None, n_prompts=None, noise_fraction=0.44, snr_range=(10.0, 30.0)):
    """Train the suite's two configurations on the same corpus and seed and compare them."""
    out_dir = Path(out_dir)
    cache = RunCache() if cache is None else cache
    policy, runs = suite_configs(suite, train_cfg)
    manifest, test_spk = prepare_corpus(corpus_cfg, out_dir / "corpus")
    parts = _variant(manifest, test_spk, corpus_cfg, policy, train_cfg.seed)
    results = []
    for name, cfg, noise in runs:
        run_parts = parts
        if noise is not None:
            run_parts = _noise_variant(parts, noise, noise_fraction, snr_range, out_dir / "corpus", corpus_cfg.seed)
        key = _key(asdict(corpus_cfg), policy, cfg.to_dict(), noise, noise_fraction, n_prompts)
        shared = cache.get(key, lambda n=name, c=cfg, p=run_parts, k=key: run_config(
            n, p, c, out_dir / "runs" / k, manifest.speakers, n_prompts))
        # a cached run may have been trained under another suite's name
        results.append({**shared, "name": name})
    a, b = results
    report = MetricReport(
        f"{suite}_roundtrip_per", a["roundtrip_per"],
        breakdown=results,
        config={"suite": suite, "policy": policy, "corpus": asdict(corpus_cfg), "train": train_cfg.to_dict()},
        seed=train_cfg.seed,
        extra={
            "names": [a["name"], b["name"]],
            "roundtrip_per": [a["roundtrip_per"], b["roundtrip_per"]],
            "recognition_per": [a["recognition_per"], b["recognition_per"]],
            "first_better_roundtrip": a["roundtrip_per"] < b["roundtrip_per"],
        },
    )
    return report


def _noise_variant(parts, mode, fraction, snr_range, root, seed):
    """Unpaired training data with ``fraction`` corrupted ('all') or with those utterances removed ('clean')."""
    train = parts.train
    # evaluation speakers keep clean training audio, as the noisy speakers are disjoint from them
    noisy = apply_noise_policy(train, fraction, snr_range, Path(root) / f"noisy_{fraction:g}", seed,
                               exclude_speakers=parts.test.speakers)
    if mode == "all":
        train = noisy
    else:
        corrupted = {u.id for u in noisy if u.snr_db is not None}
        train = train.subset(lambda u: u.id not in corrupted)
    return replace(parts, train=train)
