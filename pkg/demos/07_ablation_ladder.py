"""
The four-arm ladder: vanilla, + LoRA, + self-prompting, + distillation
======================================================================

The desk profile (64-d tokens, 30 epochs) over three seeds takes about 15
minutes on one CPU core. Pass a single seed for a quicker look:

    python demos/07_ablation_ladder.py 0
"""

import sys

import numpy as np

from selfprompt.data import generate_corpus, select
from selfprompt.experiments import desk_profile, format_summary, iteration_sweep, run_ablation, summarize

seeds = tuple(int(s) for s in sys.argv[1:]) or (0, 1, 2)
profile = desk_profile(seeds)
corpus = generate_corpus(profile.corpus)

runs, base = run_ablation(profile, corpus=corpus)
print(format_summary(summarize(runs)))

kd = {r.seed: r.model for r in runs if r.ablation == "lora_sp_kd"}
for k, by_seed in iteration_sweep(kd, select(corpus, "target", "test"), ks=(0, 1, 2, 3)).items():
    print(f"k={k}  Dice {100 * np.mean(list(by_seed.values())):.2f}")
