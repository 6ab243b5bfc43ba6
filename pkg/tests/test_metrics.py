import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from selfprompt.data import select
from selfprompt.errors import InputError
from selfprompt.metrics import (ConfusionCounts, ImageScore, MetricsReport, confusion, dice_score,
                                emit_report, evaluate, iou_score, read_report)
from selfprompt.model import ImageEmbedding, MaskPrediction
from selfprompt.self_prompt import self_prompt_forward


def tally(pred, target):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), target.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_confusion_identical():
    m = np.zeros((5, 5), np.uint8)
    m[1:3, 1:4] = 1
    assert confusion(m, m) == ConfusionCounts(6, 0, 0, 19)


def test_confusion_all_ones_vs_zeros():
    c = confusion(np.ones((4, 4), np.uint8), np.zeros((4, 4), np.uint8))
    assert (c.tp, c.fp, c.fn, c.tn) == (0, 16, 0, 0)


def test_confusion_matches_tally(rng):
    for _ in range(100):
        p = rng.integers(0, 2, (8, 8))
        g = rng.integers(0, 2, (8, 8))
        c = confusion(p, g)
        assert (c.tp, c.fp, c.fn, c.tn) == tally(p, g)
        assert c.total == 64


def test_confusion_rejects_bad_input():
    with pytest.raises(InputError):
        confusion(np.zeros((3, 3)), np.zeros((4, 4)))
    with pytest.raises(InputError):
        confusion(np.full((3, 3), 2), np.zeros((3, 3)))


def test_scores_hand_values():
    c = ConfusionCounts(tp=2, fp=1, fn=1, tn=0)
    assert dice_score(c) == pytest.approx(4 / 6)
    assert iou_score(c) == 0.5
    assert dice_score(ConfusionCounts(0, 3, 2, 1)) == 0.0
    assert dice_score(ConfusionCounts(5, 0, 0, 1)) == 1.0
    assert iou_score(ConfusionCounts(5, 0, 0, 1)) == 1.0
    # both empty
    assert dice_score(ConfusionCounts(0, 0, 0, 9)) == 1.0
    assert iou_score(ConfusionCounts(0, 0, 0, 9)) == 1.0


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_dice_iou_identity(tp, fp, fn):
    c = ConfusionCounts(tp, fp, fn, 0)
    iou = iou_score(c)
    assert dice_score(c) == pytest.approx(2 * iou / (1 + iou), abs=1e-12)


@given(st.lists(st.booleans(), min_size=16, max_size=16), st.lists(st.booleans(), min_size=16, max_size=16))
def test_confusion_symmetry(a, b):
    a = np.array(a, np.uint8).reshape(4, 4)
    b = np.array(b, np.uint8).reshape(4, 4)
    ab, ba = confusion(a, b), confusion(b, a)
    assert ab.tp == ba.tp and ab.fp == ba.fn and ab.fn == ba.fp


@given(st.floats(0.01, 0.98), st.floats(0.01, 0.98))
@settings(max_examples=50)
def test_threshold_monotonicity(t1, t2):
    lo, hi = sorted((t1, t2))
    logits = torch.as_tensor(np.random.default_rng(0).normal(0, 2, (8, 8)))
    target = np.random.default_rng(1).integers(0, 2, (8, 8))
    c_lo = confusion(MaskPrediction(logits, lo).numpy_mask(), target)
    c_hi = confusion(MaskPrediction(logits, hi).numpy_mask(), target)
    assert c_hi.tp + c_hi.fp <= c_lo.tp + c_lo.fp


class OracleStub:
    """Returns each sample's ground truth regardless of prompt."""

    def __init__(self, samples):
        self.by_hash = {s.image.tobytes(): s.mask for s in samples}

    def encode_image(self, images):
        masks = np.stack([self.by_hash[im.tobytes()] for im in np.asarray(images)])
        return ImageEmbedding(torch.as_tensor(masks, dtype=torch.float64), "stub", None)

    def decode_prompts(self, emb, prompts, threshold=0.5):
        return MaskPrediction((emb.grid * 2 - 1) * 20, threshold)


def test_evaluate_with_oracle_stub(tiny_corpus):
    test = select(tiny_corpus, split="test")
    report = evaluate(OracleStub(test), test, k=1)
    assert report.mean_dice == 1.0 and report.mean_iou == 1.0


def test_evaluate_k0_matches_forward_no_prompt(tiny_model, tiny_corpus):
    test = select(tiny_corpus, "target", "test")
    report = evaluate(tiny_model, test, k=0)
    with torch.no_grad():
        masks = tiny_model.forward_no_prompt(np.stack([s.image for s in test])).numpy_mask()
    for s, m, row in zip(test, masks, report.per_image):
        assert row.dice == dice_score(confusion(m, s.mask))


def test_evaluate_deterministic_and_promptless(tiny_model, tiny_corpus):
    test = select(tiny_corpus, "target", "test")
    a = evaluate(tiny_model, test, k=2)
    b = evaluate(tiny_model, test, k=2)
    assert a == b
    assert a.gt_prompt_reads == 0


def test_evaluate_scores_final_pass(tiny_model, tiny_corpus):
    test = select(tiny_corpus, "target", "test")
    report = evaluate(tiny_model, test, k=2)
    with torch.no_grad():
        res = self_prompt_forward(tiny_model, np.stack([s.image for s in test]), k=2)
    masks = res.passes[2].numpy_mask()
    assert [r.dice for r in report.per_image] == [dice_score(confusion(m, s.mask)) for m, s in zip(masks, test)]


def test_report_roundtrip(tmp_path):
    rep = MetricsReport([ImageScore("a", 0.5, 1 / 3, 1, 1, 1, 1, 5), ImageScore("b", 0.8, 2 / 3, 1, 4, 1, 1, 2)],
                        ablation="lora_sp_kd", seed=2, k=1)
    path = emit_report(rep, tmp_path / "r.jsonl")
    back = read_report(path)
    assert back == rep
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert (tmp_path / "r.jsonl.txt").exists()
    assert back.mean_dice == pytest.approx(np.mean([0.5, 0.8]), abs=1e-9)


def test_empty_report_and_corpus_rejected(tmp_path, tiny_model):
    with pytest.raises(InputError):
        emit_report(MetricsReport([]), tmp_path / "r.jsonl")
    with pytest.raises(InputError):
        evaluate(tiny_model, [], k=0)


def test_micro_average():
    rep = MetricsReport([ImageScore("a", 1.0, 1.0, 0, 2, 0, 0, 2), ImageScore("b", 0.0, 0.0, 0, 0, 2, 0, 2)])
    d, i = rep.micro()
    assert d == pytest.approx(4 / 6) and i == pytest.approx(0.5)
