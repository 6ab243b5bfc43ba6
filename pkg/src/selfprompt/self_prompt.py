"""Self-prompting: decode once without a prompt, then re-decode with the box of
the previous prediction, reusing a single image embedding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .model import DEFAULT_THRESHOLD, MaskPrediction, PromptSpec


def sp_box(pred) -> PromptSpec:
    """Bounding box of the foreground of a 2-D prediction, or ``none`` if empty.

    Accepts a :class:`MaskPrediction` or a binary array. Uses the global row and
    column extremes, so several blobs give one enclosing box.
    """
    mask = pred.binary_mask if isinstance(pred, MaskPrediction) else pred
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"sp_box expects a single 2-D mask, got shape {mask.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return PromptSpec.none()
    cols = np.flatnonzero(mask.any(axis=0))
    return PromptSpec.at_box(rows[0], cols[0], rows[-1], cols[-1])


@dataclass
class SelfPromptResult:
    passes: list  # MaskPrediction per pass; passes[0] is the promptless one
    prompts_used: list  # PromptSpec (or a list per batch element) per pass
    iterations: int

    @property
    def final(self) -> MaskPrediction:
        return self.passes[-1]


def self_prompt_forward(model, images, k: int = 1, threshold: float = DEFAULT_THRESHOLD,
                        first_prompts: Sequence[PromptSpec] | None = None) -> SelfPromptResult:
    """Run ``k`` self-prompting iterations on top of the promptless pass.

    The image is encoded exactly once. ``first_prompts`` replaces the promptless
    first pass (used only by training-time prompt-strategy experiments).
    Single images give unbatched predictions and plain ``PromptSpec`` entries.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    batched = _batched(images, model)
    emb = model.encode_image(images)
    b = emb.grid.shape[0]
    prompts = list(first_prompts) if first_prompts is not None else [PromptSpec.none()] * b
    passes, used = [], []
    for i in range(k + 1):
        pred = model.decode_prompts(emb, prompts, threshold)
        passes.append(pred)
        used.append(prompts)
        if i < k:
            prompts = [sp_box(pred[j]) for j in range(b)]
    if not batched:
        passes = [p[0] for p in passes]
        used = [u[0] for u in used]
    return SelfPromptResult(passes, used, k)


def _batched(images, model) -> bool:
    from .model import _is_batched

    cfg = getattr(model, "cfg", None)
    if cfg is None:
        return np.ndim(images) in (3, 4) and not (np.ndim(images) == 3 and np.shape(images)[-1] in (1, 3))
    return _is_batched(images, cfg)
