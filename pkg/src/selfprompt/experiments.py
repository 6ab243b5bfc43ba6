"""Experiment protocols: the ablation ladder, self-prompting iteration sweep and
training-prompt-strategy study, all on a shared source-pretrained base model."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint, state_digest
from .data import CorpusSpec, generate_corpus, select
from .metrics import MetricsReport, emit_report, evaluate
from .model import ModelConfig, build_model
from .train import (ABLATIONS, PretrainConfig, TrainConfig, eval_iterations, finetune,
                    pretrain_source)

log = logging.getLogger(__name__)

ARM_LABELS = {"vanilla": "vanilla", "lora": "+ LoRA", "lora_sp": "+ SP", "lora_sp_kd": "+ KD"}
STRATEGY_LABELS = {"none": "None", "random_point": "RandomPoint", "gt_center_point": "GTpoint"}


@dataclass
class Profile:
    """Everything needed to rerun a protocol: corpus, model size and schedules."""

    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0, 1, 2)


def desk_profile(seeds=(0, 1, 2)) -> Profile:
    """Sizes that run the whole ladder in minutes on a single CPU core."""
    return Profile(
        corpus=CorpusSpec(),
        model=ModelConfig(embed_dim=64),
        pretrain=PretrainConfig(epochs=30, lr=1e-3),
        finetune=TrainConfig(lr=1e-3, weight_decay=1e-4, epochs=30),
        seeds=tuple(seeds),
    )


def pretrain_base(profile: Profile, source_samples=None):
    if source_samples is None:
        source_samples = select(generate_corpus(profile.corpus), "source", "train")
    model = build_model(profile.model, seed=profile.pretrain.seed)
    model, _ = pretrain_source(model, source_samples, profile.pretrain)
    return model


@dataclass
class ArmRun:
    ablation: str
    seed: int
    strategy: str
    report: MetricsReport
    model: object = None
    train_log: object = None
    seconds: float = 0.0


def train_and_score(base, train_samples, test_samples, cfg: TrainConfig, keep_model=True) -> ArmRun:
    t0 = time.perf_counter()
    model, history = finetune(base, train_samples, cfg)
    report = evaluate(model, test_samples, k=eval_iterations(cfg.ablation), threshold=cfg.threshold,
                      ablation=cfg.ablation, seed=cfg.seed,
                      train_prompt_strategy=cfg.train_prompt_strategy)
    return ArmRun(cfg.ablation, cfg.seed, cfg.train_prompt_strategy, report,
                  model if keep_model else None, history, time.perf_counter() - t0)


def run_ablation(profile: Profile, base=None, corpus=None, arms=ABLATIONS, out_dir=None):
    """Every arm of the ladder for every seed. Returns ``(runs, base)``."""
    corpus = corpus or generate_corpus(profile.corpus)
    if base is None:
        base = pretrain_base(profile, select(corpus, "source", "train"))
    train, test = select(corpus, "target", "train"), select(corpus, "target", "test")
    runs = []
    for seed in profile.seeds:
        for arm in arms:
            cfg = replace(profile.finetune, ablation=arm, seed=seed, alpha=None)
            run = train_and_score(base, train, test, cfg)
            log.info("%s seed=%d dice=%.4f (%.0fs)", arm, seed, run.report.mean_dice, run.seconds)
            runs.append(run)
            if out_dir is not None:
                _persist(run, Path(out_dir), f"{arm}-seed{seed}", base)
    return runs, base


def run_prompt_study(profile: Profile, base=None, corpus=None, reuse=(), out_dir=None,
                     strategies=("none", "random_point", "gt_center_point")):
    """Fine-tune the full method under each training prompt strategy; evaluate promptless.

    ``reuse`` may hold finished ``lora_sp_kd`` runs (strategy ``none``) from a ladder.
    """
    corpus = corpus or generate_corpus(profile.corpus)
    if base is None:
        base = pretrain_base(profile, select(corpus, "source", "train"))
    train, test = select(corpus, "target", "train"), select(corpus, "target", "test")
    cached = {(r.strategy, r.seed): r for r in reuse if r.ablation == "lora_sp_kd"}
    runs = []
    for seed in profile.seeds:
        for strategy in strategies:
            run = cached.get((strategy, seed))
            if run is None:
                cfg = replace(profile.finetune, ablation="lora_sp_kd", seed=seed, alpha=None,
                              train_prompt_strategy=strategy)
                run = train_and_score(base, train, test, cfg, keep_model=False)
            runs.append(run)
            if out_dir is not None:
                _persist(run, Path(out_dir), f"{strategy}-seed{seed}", base)
    return runs, base


def iteration_sweep(models_by_seed: dict, test_samples, ks=(0, 1, 2, 3), threshold=0.5):
    """Seed-indexed Dice for each number of self-prompting iterations."""
    return {k: {seed: evaluate(m, test_samples, k=k, threshold=threshold, seed=seed).mean_dice
                for seed, m in models_by_seed.items()}
            for k in ks}


def summarize(runs, key="ablation", order=ABLATIONS):
    """Rows ``(name, n, mean dice, std dice, mean iou, std iou)`` in ``order``."""
    rows = []
    for name in order:
        sel = [r for r in runs if getattr(r, key) == name]
        if not sel:
            continue
        d = np.array([r.report.mean_dice for r in sel])
        i = np.array([r.report.mean_iou for r in sel])
        rows.append({"name": name, "n": len(sel), "dice": float(d.mean()), "dice_std": float(d.std()),
                     "iou": float(i.mean()), "iou_std": float(i.std())})
    return rows


def format_summary(rows, labels=ARM_LABELS) -> str:
    with_std = any(r["n"] > 1 for r in rows)
    head = f"{'row':<14} {'DICE':>8} {'IoU':>8}"
    if with_std:
        head += f" {'DICE sd':>8} {'IoU sd':>8}"
    out = [head]
    for r in rows:
        line = f"{labels.get(r['name'], r['name']):<14} {100 * r['dice']:8.2f} {100 * r['iou']:8.2f}"
        if with_std:
            line += f" {100 * r['dice_std']:8.2f} {100 * r['iou_std']:8.2f}"
        out.append(line)
    return "\n".join(out) + "\n"


def _persist(run: ArmRun, out: Path, stem: str, base) -> None:
    emit_report(run.report, out / f"{stem}.jsonl")
    if run.model is not None:
        save_checkpoint(run.model, out / f"{stem}.ckpt",
                        meta={"ablation": run.ablation, "seed": run.seed,
                              "train_prompt_strategy": run.strategy,
                              "base_digest": state_digest(base)})
