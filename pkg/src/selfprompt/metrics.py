"""Dice / IoU scoring, promptless evaluation and report files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import GT_PROMPT_COUNTER
from .errors import InputError
from .model import DEFAULT_THRESHOLD
from .self_prompt import self_prompt_forward


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred_binary, target) -> ConfusionCounts:
    p = np.asarray(pred_binary)
    g = np.asarray(target)
    if p.shape != g.shape:
        raise InputError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not (np.isin(p, (0, 1)).all() and np.isin(g, (0, 1)).all()):
        raise InputError("confusion expects binary masks")
    p = p.astype(bool)
    g = g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice_score(c: ConfusionCounts) -> float:
    """2TP / (FP + 2TP + FN); 1.0 when prediction and target are both empty."""
    denom = c.fp + 2 * c.tp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def iou_score(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); 1.0 when prediction and target are both empty."""
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


@dataclass
class ImageScore:
    id: str
    dice: float
    iou: float
    k: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0


@dataclass
class MetricsReport:
    per_image: list
    ablation: str = ""
    seed: int = 0
    train_prompt_strategy: str = "none"
    k: int = 0
    gt_prompt_reads: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([s.dice for s in self.per_image]))

    @property
    def mean_iou(self) -> float:
        return float(np.mean([s.iou for s in self.per_image]))

    def micro(self) -> tuple[float, float]:
        c = ConfusionCounts(*(sum(getattr(s, f) for s in self.per_image) for f in ("tp", "fp", "fn", "tn")))
        return dice_score(c), iou_score(c)

    def aggregate(self) -> dict:
        micro_dice, micro_iou = self.micro()
        return {"aggregate": True, "n": len(self.per_image), "dice": self.mean_dice,
                "iou": self.mean_iou, "micro_dice": micro_dice, "micro_iou": micro_iou,
                "k": self.k, "ablation": self.ablation, "seed": self.seed,
                "train_prompt_strategy": self.train_prompt_strategy,
                "gt_prompt_reads": self.gt_prompt_reads, "extra": self.extra}


def evaluate(model, samples, k: int = 1, threshold: float = DEFAULT_THRESHOLD, batch_size: int = 25,
             ablation: str = "", seed: int = 0, train_prompt_strategy: str = "none",
             return_predictions: bool = False):
    """Score the k-th self-prompted pass of every sample against its mask.

    Prompts come only from the model's own predictions; the ground-truth prompt
    counter must not move while this runs.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if not samples:
        raise InputError("cannot evaluate an empty corpus")
    before = GT_PROMPT_COUNTER.count
    scores, predictions = [], []
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images = np.stack([s.image for s in chunk])
            result = self_prompt_forward(model, images, k=k, threshold=threshold)
            masks = result.final.numpy_mask()
            for s, m in zip(chunk, masks):
                c = confusion(m, s.mask)
                scores.append(ImageScore(s.id, dice_score(c), iou_score(c), k, c.tp, c.fp, c.fn, c.tn))
                if return_predictions:
                    predictions.append(m)
    if was_training:
        model.train()
    reads = GT_PROMPT_COUNTER.count - before
    if reads:
        raise RuntimeError(f"evaluation consulted ground truth for {reads} prompts")
    report = MetricsReport(scores, ablation, seed, train_prompt_strategy, k, reads)
    return (report, predictions) if return_predictions else report


# --------------------------------------------------------------------------- files


def emit_report(report: MetricsReport, path) -> Path:
    """Write JSON-lines records (one per image, then one aggregate) and a text table.

    The table goes to ``<path>.txt`` beside the JSONL file.
    """
    if not report.per_image:
        raise InputError("refusing to write an empty report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in report.per_image:
        rec = asdict(s)
        rec.update(ablation=report.ablation, seed=report.seed)
        lines.append(json.dumps(rec, sort_keys=True))
    lines.append(json.dumps(report.aggregate(), sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    path.with_suffix(path.suffix + ".txt").write_text(format_report(report), encoding="utf-8")
    return path


def read_report(path) -> MetricsReport:
    per_image, agg = [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("aggregate"):
            agg = rec
            continue
        rec.pop("ablation", None)
        rec.pop("seed", None)
        per_image.append(ImageScore(**rec))
    if agg is None:
        raise InputError(f"{path}: no aggregate record")
    return MetricsReport(per_image, agg["ablation"], agg["seed"], agg["train_prompt_strategy"],
                         agg["k"], agg["gt_prompt_reads"], agg.get("extra", {}))


def format_report(report: MetricsReport) -> str:
    rows = [f"{'id':<24} {'dice':>8} {'iou':>8}"]
    rows += [f"{s.id:<24} {s.dice:8.4f} {s.iou:8.4f}" for s in report.per_image]
    micro_dice, micro_iou = report.micro()
    rows.append(f"{'mean':<24} {report.mean_dice:8.4f} {report.mean_iou:8.4f}")
    rows.append(f"{'micro':<24} {micro_dice:8.4f} {micro_iou:8.4f}")
    rows.append(f"ablation={report.ablation} seed={report.seed} k={report.k} "
                f"train_prompt_strategy={report.train_prompt_strategy}")
    return "\n".join(rows) + "\n"
