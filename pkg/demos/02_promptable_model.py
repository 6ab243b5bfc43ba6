"""
Encoding an image once, decoding under different prompts
========================================================
"""

from selfprompt.data import CorpusSpec, generate_corpus
from selfprompt.model import ModelConfig, PromptSpec, build_model

cfg = ModelConfig()  # 64x64 input, 4x4 patches, 128-d tokens
model = build_model(cfg, seed=0)
print("grid", cfg.grid_size, "x", cfg.grid_size, "upsampling stages", cfg.upsample_stages)

sample = generate_corpus(CorpusSpec(n_train=1, n_test=1))[0]
emb = model.encode_image(sample.image)
print("embedding", tuple(emb.grid.shape), "digest", emb.source_hash[:12])

# prompts become tokens: one learned token for "no prompt", one per point, two per box
for prompt in (PromptSpec.none(), PromptSpec.at_point(30, 30), PromptSpec.at_box(10, 12, 40, 50)):
    tokens = model.encode_prompt(prompt)
    pred = model.decode_mask(emb, tokens)
    print(f"{prompt.describe():18s} tokens={tokens.shape[0]}  foreground px={int(pred.binary_mask.sum())}")

# an untrained model gives arbitrary masks, but always probabilities in [0, 1]
pred = model.forward_no_prompt(sample.image)
p = pred.prob_map.detach().numpy()
print("prob range", p.min().round(3), p.max().round(3), "threshold", pred.threshold)
