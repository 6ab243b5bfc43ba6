import json

import numpy as np
import pytest
from PIL import Image

from selfprompt.cli import MANIFEST, main
from selfprompt.data import corpus_digest

TINY_DATA = ["--n-train", "6", "--n-test", "4", "--image-size", "16", "--min-radius", "2", "--max-radius", "5"]
TINY_MODEL = ["--patch-size", "4", "--embed-dim", "16", "--encoder-depth", "2", "--num-heads", "2",
              "--decoder-depth", "1"]
PRE = ["--pretrain-epochs", "1", "--pretrain-batch-size", "4", "--quiet"]
FAST = ["--epochs", "1", "--batch-size", "4", *PRE]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", *TINY_DATA, "--out", str(root / "data"), "--quiet"]) == 0
    assert main(["train", "--stage", "pretrain", *TINY_DATA, *TINY_MODEL, *PRE,
                 "--data", str(root / "data"), "--out", str(root / "base")]) == 0
    assert main(["train", *TINY_MODEL, *FAST, "--data", str(root / "data"), "--base",
                 str(root / "base" / "model.ckpt"), "--alpha", "0.5", "--epochs", "3",
                 "--out", str(root / "kd")]) == 0
    return root


def _manifest(d):
    return json.loads((d / MANIFEST).read_text())


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", *TINY_DATA, "--seed", "7", "--out", str(tmp_path / name), "--quiet"]) == 0
    assert corpus_digest(tmp_path / "a") == corpus_digest(tmp_path / "b")
    m = _manifest(tmp_path / "a")
    assert m["command"] == "gen-data" and m["seed"] == 7 and m["config"]["data_seed"] == 7


def test_gen_data_default_counts(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--quiet"]) == 0
    rows = (tmp_path / "d" / "manifest.tsv").read_text().splitlines()[1:]
    counts = {}
    for row in rows:
        _, _, _, split, domain = row.split("\t")
        counts[(domain, split)] = counts.get((domain, split), 0) + 1
    assert counts == {("source", "train"): 200, ("target", "train"): 200, ("target", "test"): 50}
    assert len(list((tmp_path / "d" / "images").iterdir())) == 450


def test_usage_errors(tmp_path, capsys):
    assert main(["gen-data", "--quiet"]) == 1
    assert main(["gen-data", "--image-size", "16", "--out", str(tmp_path / "x")]) == 1
    assert main(["train", "--ablation", "vanilla", "--epochs", "100", "--out", str(tmp_path / "v")]) == 1
    assert main(["train", "--ablation", "lora", "--alpha", "0.5", "--out", str(tmp_path / "v")]) == 1
    assert main(["nonsense"]) == 1
    assert main([]) == 1
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "e")]) == 1
    assert "missing.ckpt" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("data_seed = 3\nn_train=5\n# comment\nn_test=2\nimage_size=16\nmin_radius=2\nmax_radius=5\n")
    assert main(["gen-data", "--config", str(cfg), "--n-train", "4", "--out", str(tmp_path / "c"), "--quiet"]) == 0
    m = _manifest(tmp_path / "c")
    assert m["config"]["n_train"] == 4 and m["config"]["data_seed"] == 3
    assert m["config_path"] == str(cfg.resolve())
    cfg.write_text("bogus=1\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c2")]) == 1


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SELFPROMPT_OUTPUT_ROOT", str(tmp_path))
    assert main(["gen-data", *TINY_DATA, "--out", "rel", "--quiet"]) == 0
    assert (tmp_path / "rel" / MANIFEST).exists()


def test_train_log_has_distillation_terms(workdir):
    recs = [json.loads(line) for line in (workdir / "kd" / "train_log.jsonl").read_text().splitlines()]
    assert recs and all(r["alpha"] == 0.5 for r in recs)
    assert any(r["kl_term"] > 0 for r in recs)
    m = _manifest(workdir / "kd")
    assert {a["path"] for a in m["artifacts"]} == {"model.ckpt", "train_log.jsonl"}


def test_train_grid_table(workdir, tmp_path, capsys):
    code = main(["train", *TINY_MODEL, *FAST, "--ablation", "lora", "--data", str(workdir / "data"),
                 "--base", str(workdir / "base" / "model.ckpt"), "--lr-grid", "1e-2,1e-3",
                 "--wd-grid", "1e-4", "--out", str(tmp_path / "g")])
    assert code == 0
    rows = (tmp_path / "g" / "grid.tsv").read_text().splitlines()
    assert len(rows) == 1 + 2
    assert "selected" in _manifest(tmp_path / "g")


def test_eval_k_recorded_and_masks_exported(workdir, tmp_path):
    ckpt = str(workdir / "kd" / "model.ckpt")
    for k in (0, 1):
        assert main(["eval", "--checkpoint", ckpt, "--data", str(workdir / "data"), "--k", str(k),
                     "--export-masks", "--out", str(tmp_path / f"k{k}"), "--quiet"]) == 0
    aggs = [json.loads((tmp_path / f"k{k}" / "report.jsonl").read_text().splitlines()[-1]) for k in (0, 1)]
    assert [a["k"] for a in aggs] == [0, 1]
    assert all(a["gt_prompt_reads"] == 0 for a in aggs)
    assert len(list((tmp_path / "k0" / "masks").iterdir())) == 4


def test_predict_outputs_and_determinism(workdir, tmp_path):
    ckpt = str(workdir / "kd" / "model.ckpt")
    img = sorted((workdir / "data" / "images").iterdir())[0]
    for name in ("a", "b"):
        assert main(["predict", "--checkpoint", ckpt, "--image", str(img), "--k", "1",
                     "--out", str(tmp_path / name), "--quiet"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["boxes.tsv", "pass0.png", "pass1.png", MANIFEST]
    trace = (tmp_path / "a" / "boxes.tsv").read_text().splitlines()
    assert len(trace) == 2 and trace[1].startswith("1\t")
    for f in ("boxes.tsv", "pass0.png", "pass1.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_predict_empty_first_pass_records_fallback(workdir, tmp_path):
    from selfprompt.checkpoint import load_checkpoint, save_checkpoint
    import torch

    model, _ = load_checkpoint(workdir / "kd" / "model.ckpt")
    with torch.no_grad():
        last = model.mask_decoder.hyper_mlp.layers[-1]
        last.weight.zero_()
        last.bias.zero_()  # every logit is exactly 0, i.e. probability 0.5
    ckpt = save_checkpoint(model, tmp_path / "neg.ckpt")
    Image.fromarray(np.zeros((16, 16), np.uint8)).save(tmp_path / "black.png")
    assert main(["predict", "--checkpoint", str(ckpt), "--image", str(tmp_path / "black.png"),
                 "--threshold", "0.6", "--out", str(tmp_path / "p"), "--quiet"]) == 0
    assert (tmp_path / "p" / "boxes.tsv").read_text().splitlines()[1] == "1\tnone"


def test_predict_unreadable_image_is_runtime_error(workdir, tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_text("not an image")
    assert main(["predict", "--checkpoint", str(workdir / "kd" / "model.ckpt"), "--image", str(bad),
                 "--out", str(tmp_path / "p")]) == 2


def test_ablate_and_prompt_study_structure(workdir, tmp_path):
    common = [*TINY_DATA, *TINY_MODEL, *FAST, "--data", str(workdir / "data"),
              "--base", str(workdir / "base" / "model.ckpt"), "--seeds", "0,1"]
    assert main(["ablate", *common, "--sweep-k", "0,1", "--out", str(tmp_path / "ab")]) == 0
    for arm in ("vanilla", "lora", "lora_sp", "lora_sp_kd"):
        for seed in (0, 1):
            assert (tmp_path / "ab" / f"{arm}-seed{seed}.jsonl").exists()
    rows = (tmp_path / "ab" / "summary.tsv").read_text().splitlines()[1:]
    assert [r.split("\t")[0] for r in rows] == ["vanilla", "lora", "lora_sp", "lora_sp_kd"]
    for r in rows:
        name, _, dice = r.split("\t")[:3]
        per_seed = [json.loads((tmp_path / "ab" / f"{name}-seed{s}.jsonl").read_text().splitlines()[-1])["dice"]
                    for s in (0, 1)]
        assert abs(float(dice) - np.mean(per_seed)) < 1e-9
    assert "DICE sd" in (tmp_path / "ab" / "summary.txt").read_text()
    assert len((tmp_path / "ab" / "iteration_sweep.tsv").read_text().splitlines()) == 3

    assert main(["prompt-study", *common, "--out", str(tmp_path / "ps")]) == 0
    rows = (tmp_path / "ps" / "summary.tsv").read_text().splitlines()[1:]
    assert [r.split("\t")[:2] for r in rows] == [["none", "2"], ["random_point", "2"], ["gt_center_point", "2"]]
    m = _manifest(tmp_path / "ps")
    assert set(m["eval_gt_prompt_reads"].values()) == {0}
    assert m["base_digest"] == _manifest(tmp_path / "ab")["base_digest"]


def test_single_seed_summary_has_no_std(workdir, tmp_path):
    assert main(["ablate", *TINY_DATA, *TINY_MODEL, *FAST, "--data", str(workdir / "data"),
                 "--base", str(workdir / "base" / "model.ckpt"), "--seeds", "1", "--sweep-k", "",
                 "--out", str(tmp_path / "one")]) == 0
    assert "sd" not in (tmp_path / "one" / "summary.txt").read_text()


def test_replay_reproduces_digests(workdir, tmp_path):
    assert main(["replay", str(workdir / "kd" / MANIFEST), "--out", str(tmp_path / "again"), "--quiet"]) == 0
    assert main(["replay", str(workdir / "base"), "--out", str(tmp_path / "again_base"), "--quiet"]) == 0
