"""
Pretrain on the source domain, adapt to the target, score with and without self-prompting
=========================================================================================

Small sizes so this finishes in about a minute on one CPU core.
"""

from selfprompt.data import CorpusSpec, generate_corpus, select
from selfprompt.metrics import evaluate, format_report
from selfprompt.model import ModelConfig
from selfprompt.train import PretrainConfig, TrainConfig, finetune, pretrain_source

corpus = generate_corpus(CorpusSpec(n_train=48, n_test=16, image_size=32, min_radius=3, max_radius=9))
source = select(corpus, "source", "train")
train, test = select(corpus, "target", "train"), select(corpus, "target", "test")

cfg = ModelConfig(image_size=32, embed_dim=32, encoder_depth=2, num_heads=2, decoder_depth=1)
base, log = pretrain_source(cfg, source, PretrainConfig(epochs=15, lr=3e-3))
print("pretraining loss", round(log.records[0]["total"], 3), "->", round(log.records[-1]["total"], 3))
print("base on target, promptless:", round(evaluate(base, test, k=0).mean_dice, 3))

model, log = finetune(base, train, TrainConfig(ablation="lora_sp_kd", epochs=15, lr=3e-3, batch_size=8))
last = log.records[-1]
print("final step: dice term %.3f, kl term %.4f, alpha %.1f" % (last["dice_term"], last["kl_term"], last["alpha"]))
for k in (0, 1, 2):
    print(f"k={k}: Dice {evaluate(model, test, k=k).mean_dice:.3f}")
print(format_report(evaluate(model, test, k=1)))
