"""Source pretraining, LoRA fine-tuning arms, warmup/cosine schedule, grid search."""

from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .data import GT_PROMPT_COUNTER, gt_box, gt_point, select
from .errors import ConfigError, TrainingError
from .lora import attach_adapters
from .losses import LossConfig, dice_loss, total_loss
from .metrics import evaluate
from .model import DEFAULT_THRESHOLD, ModelConfig, PromptSpec, build_model
from .self_prompt import self_prompt_forward

log = logging.getLogger(__name__)

ABLATIONS = ("vanilla", "lora", "lora_sp", "lora_sp_kd")
PROMPT_STRATEGIES = ("none", "random_point", "gt_center_point")
SEARCH_SET = (1e-2, 1e-3, 1e-4, 1e-5)
EPOCH_SET = (100, 200, 300)
DEFAULT_ALPHA = 0.5


def eval_iterations(ablation: str) -> int:
    """Self-prompting iterations used when scoring an arm."""
    return 1 if ablation in ("lora_sp", "lora_sp_kd") else 0


@dataclass
class TrainConfig:
    ablation: str = "lora_sp_kd"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 100
    warmup_steps: int | None = None  # None: 5% of total steps
    batch_size: int = 8
    alpha: float | None = None  # None: 0.5 for lora_sp_kd, 0 otherwise
    lora_rank: int = 4
    train_prompt_strategy: str = "none"
    seed: int = 0
    grad_clip: float | None = 1.0
    schedule: str = "cosine"
    aux_first_pass_dice: bool = False
    threshold: float = DEFAULT_THRESHOLD
    lr_grid: list | None = None
    wd_grid: list | None = None
    epoch_grid: list | None = None

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.train_prompt_strategy not in PROMPT_STRATEGIES:
            raise ConfigError(f"train_prompt_strategy must be one of {PROMPT_STRATEGIES}")
        if self.alpha is None:
            self.alpha = DEFAULT_ALPHA if self.ablation == "lora_sp_kd" else 0.0
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.alpha > 0 and self.ablation != "lora_sp_kd":
            raise ConfigError(f"alpha={self.alpha} has no effect without distillation (ablation lora_sp_kd)")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.epochs <= 0 or self.batch_size <= 0 or self.lora_rank <= 0:
            raise ConfigError("epochs, batch_size and lora_rank must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be 'cosine' or 'constant'")
        for name, allowed in (("lr_grid", SEARCH_SET), ("wd_grid", SEARCH_SET), ("epoch_grid", EPOCH_SET)):
            values = getattr(self, name)
            if values is None:
                continue
            if not values:
                raise ConfigError(f"{name} must be nonempty")
            bad = [v for v in values if not any(math.isclose(v, a) for a in allowed)]
            if bad:
                raise ConfigError(f"{name} values {bad} not in {allowed}")

    @property
    def has_grid(self) -> bool:
        return any(g is not None for g in (self.lr_grid, self.wd_grid, self.epoch_grid))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    warmup_steps: int | None = None
    batch_size: int = 8
    seed: int = 0
    grad_clip: float | None = 1.0
    instance_prompts: bool = True
    box_jitter: int = 2
    bce_weight: float = 1.0
    threshold: float = DEFAULT_THRESHOLD

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def append(self, **rec) -> None:
        self.records.append(rec)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]


def lr_schedule(step: int, warmup_steps: int, base_lr: float, total_steps: int, kind: str = "cosine") -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if kind == "constant":
        return base_lr
    if step >= total_steps:
        return 0.0
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _resolve_warmup(warmup, total):
    return max(1, int(round(0.05 * total))) if warmup is None else warmup


def _optimise(model, samples, *, lr, weight_decay, epochs, batch_size, warmup_steps, seed,
              grad_clip, schedule, step_loss):
    """Shared AdamW loop. ``step_loss(images, masks, idx, rng)`` returns (loss, record)."""
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(len(samples) / batch_size)
    total = epochs * steps_per_epoch
    warmup = _resolve_warmup(warmup_steps, total)
    rng = np.random.default_rng([seed, 17])
    images = np.stack([s.image for s in samples])
    masks = torch.as_tensor(np.stack([s.mask for s in samples]))
    history = TrainingLog()
    step = 0
    model.train()
    for _ in range(epochs):
        for idx in _batches(len(samples), batch_size, rng):
            cur_lr = lr_schedule(step, warmup, lr, total, schedule)
            for group in opt.param_groups:
                group["lr"] = cur_lr
            loss, rec = step_loss(images[idx], masks[idx], idx, rng)
            if not torch.isfinite(loss):
                raise TrainingError("loss became non-finite", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if grad_clip:
                torch.nn.utils.clip_grad_norm_(params, grad_clip)
            opt.step()
            history.append(step=step, lr=cur_lr, **rec)
            step += 1
    model.eval()
    return history


def pretrain_source(model, source_samples, cfg: PretrainConfig | None = None):
    """Train the whole model on source-domain data.

    Each step supervises the promptless pass against the full mask. With
    ``instance_prompts`` it also decodes a jittered box and a point on one
    randomly chosen shape and supervises those passes against that shape alone,
    so the prompt pathway is meaningful before any fine-tuning. A passed model
    is copied, not modified. Returns ``(model, log)``.
    """
    cfg = cfg or PretrainConfig()
    if isinstance(model, ModelConfig) or model is None:
        model = build_model(model, seed=cfg.seed)
    else:
        model = copy.deepcopy(model)
    if not source_samples:
        raise TrainingError("no source samples to pretrain on")
    for p in model.parameters():
        p.requires_grad_(True)
    torch.manual_seed(cfg.seed)
    size = model.cfg.image_size

    def step_loss(images, masks, idx, rng):
        emb = model.encode_image(images)
        pred0 = model.decode_prompts(emb, [PromptSpec.none()] * len(idx), cfg.threshold)
        d0 = _seg_loss(pred0, masks, cfg.bce_weight)
        loss = d0
        rec = {"dice_term": d0.item(), "kl_term": 0.0, "alpha": 0.0}
        if cfg.instance_prompts:
            chosen = [_pick_instance(source_samples[i], rng) for i in idx]
            inst = torch.as_tensor(np.stack(chosen))
            boxes = [_jittered_box(m, cfg.box_jitter, size, rng) for m in chosen]
            d1 = _seg_loss(model.decode_prompts(emb, boxes, cfg.threshold), inst, cfg.bce_weight)
            points = [gt_point(m, "random", rng) for m in chosen]
            d2 = _seg_loss(model.decode_prompts(emb, points, cfg.threshold), inst, cfg.bce_weight)
            loss = d0 + d1 + d2
            rec.update(box_dice_term=d1.item(), point_dice_term=d2.item())
        rec["total"] = loss.item()
        return loss, rec

    history = _optimise(model, source_samples, lr=cfg.lr, weight_decay=cfg.weight_decay,
                        epochs=cfg.epochs, batch_size=cfg.batch_size, warmup_steps=cfg.warmup_steps,
                        seed=cfg.seed, grad_clip=cfg.grad_clip, schedule="cosine", step_loss=step_loss)
    return model, history


def _seg_loss(pred, target, bce_weight):
    loss = dice_loss(pred.prob_map, target)
    if bce_weight:
        # keeps gradients alive where the sigmoid saturates
        loss = loss + bce_weight * F.binary_cross_entropy_with_logits(pred.logits, target.to(pred.logits.dtype))
    return loss


def _pick_instance(sample, rng) -> np.ndarray:
    if sample.instances is None or len(sample.instances) == 0:
        return sample.mask
    return sample.instances[rng.integers(len(sample.instances))]


def _jittered_box(mask, jitter, size, rng) -> PromptSpec:
    GT_PROMPT_COUNTER.record("box")
    r0, c0, r1, c1 = gt_box(mask)
    if jitter:
        r0, c0 = (int(v) for v in np.array([r0, c0]) - rng.integers(0, jitter + 1, size=2))
        r1, c1 = (int(v) for v in np.array([r1, c1]) + rng.integers(0, jitter + 1, size=2))
    clip = lambda v: min(max(v, 0), size - 1)  # noqa: E731
    return PromptSpec.at_box(clip(r0), clip(c0), clip(r1), clip(c1))


def _first_prompts(masks, strategy, rng):
    if strategy == "none":
        return None
    kind = "random" if strategy == "random_point" else "center"
    return [gt_point(m, kind, rng) for m in masks.numpy()]


def finetune(base_model, target_samples, cfg: TrainConfig):
    """Fine-tune one ablation arm; returns ``(model, log)``.

    ``vanilla`` returns an untouched copy. Every other arm attaches LoRA to the
    encoder (which stays frozen) and trains adapters, prompt encoder and decoder.
    """
    model = copy.deepcopy(base_model)
    if cfg.ablation == "vanilla":
        return model, TrainingLog()
    if not target_samples:
        raise TrainingError("no target samples to fine-tune on")
    torch.manual_seed(cfg.seed)
    for p in model.parameters():
        p.requires_grad_(True)
    attach_adapters(model, r=cfg.lora_rank, seed=cfg.seed)
    loss_cfg = LossConfig(alpha=cfg.alpha, aux_first_pass_dice=cfg.aux_first_pass_dice)
    k = eval_iterations(cfg.ablation)

    def step_loss(images, masks, idx, rng):
        first = _first_prompts(masks, cfg.train_prompt_strategy, rng)
        result = self_prompt_forward(model, images, k=k, threshold=cfg.threshold, first_prompts=first)
        if k == 0:
            d = dice_loss(result.passes[0].prob_map, masks, loss_cfg.dice_smooth)
            return d, {"dice_term": d.item(), "kl_term": 0.0, "alpha": 0.0, "total": d.item()}
        br = total_loss(result.passes[0], result.passes[1], masks, loss_cfg)
        return br.total, br.record()

    history = _optimise(model, target_samples, lr=cfg.lr, weight_decay=cfg.weight_decay,
                        epochs=cfg.epochs, batch_size=cfg.batch_size, warmup_steps=cfg.warmup_steps,
                        seed=cfg.seed, grad_clip=cfg.grad_clip, schedule=cfg.schedule,
                        step_loss=step_loss)
    return model, history


def holdout_split(samples, fraction: float = 0.2, seed: int = 0):
    """Deterministic (train, validation) split of ``samples``."""
    rng = np.random.default_rng([seed, 99])
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(fraction * len(samples))))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


@dataclass
class GridCell:
    lr: float
    weight_decay: float
    epochs: int
    val_dice: float
    val_iou: float


def grid_search(base_model, target_samples, cfg: TrainConfig, train_fn=None):
    """Train every (lr, weight_decay, epochs) cell and pick the best by held-out Dice.

    20% of ``target_samples`` is held out for selection. Ties go to the lower
    learning rate, then the lower weight decay. Returns ``(best_cfg, cells)``.
    """
    lrs = cfg.lr_grid or [cfg.lr]
    wds = cfg.wd_grid or [cfg.weight_decay]
    eps = cfg.epoch_grid or [cfg.epochs]
    train_part, val_part = holdout_split(select(target_samples, split="train") or target_samples,
                                         0.2, cfg.seed)
    train_fn = train_fn or finetune
    k = eval_iterations(cfg.ablation)
    cells = []
    for lr, wd, ep in itertools.product(lrs, wds, eps):
        cell_cfg = replace(cfg, lr=lr, weight_decay=wd, epochs=ep, lr_grid=None, wd_grid=None, epoch_grid=None)
        model, _ = train_fn(base_model, train_part, cell_cfg)
        rep = evaluate(model, val_part, k=k, threshold=cfg.threshold, ablation=cfg.ablation, seed=cfg.seed)
        cells.append(GridCell(lr, wd, ep, rep.mean_dice, rep.mean_iou))
        log.info("grid cell lr=%g wd=%g epochs=%d val_dice=%.4f", lr, wd, ep, rep.mean_dice)
    best = min(cells, key=lambda c: (-c.val_dice, c.lr, c.weight_decay))
    best_cfg = replace(cfg, lr=best.lr, weight_decay=best.weight_decay, epochs=best.epochs,
                       lr_grid=None, wd_grid=None, epoch_grid=None)
    return best_cfg, cells
