"""Independent oracles shared by unit and acceptance tests."""

import numpy as np
import torch

from selfprompt.losses import LossConfig, dice_loss, kl_self_distill, total_loss
from selfprompt.model import PromptSpec
from selfprompt.self_prompt import sp_box


def scan_box(mask):
    """Min/max row and column by visiting every pixel."""
    rows, cols = [], []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                rows.append(r)
                cols.append(c)
    if not rows:
        return None
    return min(rows), min(cols), max(rows), max(cols)


def self_prompt_objective(model, image, target, alpha):
    """Closures for the two-pass objective, for autograd and for differencing.

    The self-prompt box is piecewise constant in the parameters and the
    teacher is gradient-stopped, so the differencing objective holds both at
    their unperturbed values. Returns ``(analytic, numeric, prompts)``.
    """
    with torch.no_grad():
        emb = model.encode_image(image)
        first = model.decode_prompts(emb, [PromptSpec.none()])
        prompts = [sp_box(first[0])]
        teacher = model.decode_prompts(emb, prompts).prob_map[0].clone()
    cfg = LossConfig(alpha=alpha)

    def passes():
        emb = model.encode_image(image)
        return model.decode_prompts(emb, [PromptSpec.none()])[0], model.decode_prompts(emb, prompts)[0]

    def analytic():
        y0, y1 = passes()
        return total_loss(y0, y1, target, cfg).total

    def numeric():
        y0, y1 = passes()
        return dice_loss(y1.prob_map, target) + alpha * kl_self_distill(y0.prob_map, teacher)

    return analytic, numeric, prompts


def finite_difference_check(model, analytic, numeric, n_params=20, step=1e-3, seed=0):
    """Compare autograd against central differences on ``n_params`` random entries.

    Returns a list of ``(name, index, analytic, numeric)``.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    analytic().backward()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_params):
        name, p = named[rng.integers(len(named))]
        flat = int(rng.integers(p.numel()))
        idx = np.unravel_index(flat, tuple(p.shape))
        analytic = float(p.grad[idx]) if p.grad is not None else 0.0
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + step
            up = float(numeric())
            p[idx] = orig - step
            down = float(numeric())
            p[idx] = orig
        out.append((name, idx, analytic, (up - down) / (2 * step)))
    return out


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
