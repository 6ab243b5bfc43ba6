"""
Low-rank adapters on a frozen encoder
=====================================
"""

import numpy as np
import torch

from selfprompt.lora import adapters_of, attach_adapters, effective_weight, lora_parameter_count, merge_adapters
from selfprompt.model import ModelConfig, build_model, trainable_parameter_count

model = build_model(ModelConfig(), seed=0)
total = sum(p.numel() for p in model.parameters())
print("parameters", total, "trainable", trainable_parameter_count(model))

adapters = attach_adapters(model, r=4)
print(len(adapters), "adapters, e.g.", adapters[0].host_name)
print("adapter parameters", lora_parameter_count(model), "trainable now", trainable_parameter_count(model))

# W + BA on a 2x2 example
print(effective_weight(np.eye(2), (np.array([[1.0, 0.0]]), np.array([[0.0], [1.0]]))))

# B starts at zero, so nothing changes until training moves it
x = np.random.default_rng(0).random((2, 64, 64)).astype(np.float32)
with torch.no_grad():
    before = model.forward_no_prompt(x).logits
    for a in adapters_of(model):
        a.B.normal_(0, 0.05)
    adapted = model.forward_no_prompt(x).logits
    merged = merge_adapters(model).forward_no_prompt(x).logits
print("adapted vs base", float((adapted - before).abs().max()))
print("merged vs adapted", float((merged - adapted).abs().max()))
