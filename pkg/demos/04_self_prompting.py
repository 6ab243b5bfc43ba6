"""
Self-prompting: the box of the first prediction prompts the second
==================================================================
"""

import numpy as np

from selfprompt.model import ModelConfig, PromptSpec, build_model
from selfprompt.self_prompt import self_prompt_forward, sp_box

m = np.zeros((8, 8), np.uint8)
m[2, 3] = m[5, 7] = 1
print(sp_box(m).describe())            # box 2 3 5 7
print(sp_box(np.zeros((8, 8))))         # empty -> no prompt

model = build_model(ModelConfig(), seed=0)
image = np.random.default_rng(0).random((64, 64)).astype(np.float32)
result = self_prompt_forward(model, image, k=3)
for i, (pred, prompt) in enumerate(zip(result.passes, result.prompts_used)):
    print(f"pass {i}: prompt {prompt.describe():16s} foreground px {int(pred.binary_mask.sum())}")

# the same first pass with an explicit prompt instead of none
result = self_prompt_forward(model, image, k=1, first_prompts=[PromptSpec.at_point(32, 32)])
print("first prompt", result.prompts_used[0].describe(), "-> then", result.prompts_used[1].describe())
