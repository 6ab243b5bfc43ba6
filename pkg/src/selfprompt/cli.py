"""Command-line entry point: ``selfprompt <command> [flags]``.

Commands: gen-data, train, eval, predict, ablate, prompt-study, replay.

Settings resolve in three layers, later ones winning: the ``--profile``
defaults, a flat ``key=value`` file given with ``--config``, then explicit
flags. Every command writes ``run_manifest.json`` into its output directory.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .checkpoint import file_digest, load_checkpoint, save_checkpoint, state_digest
from .data import (CorpusSpec, corpus_digest, generate_corpus, read_corpus, select,
                   write_corpus)
from .errors import ConfigError, GenerationError, IngestionError, InputError, SelfPromptError, TrainingError
from .experiments import (ARM_LABELS, STRATEGY_LABELS, Profile, desk_profile, format_summary,
                          iteration_sweep, pretrain_base, run_ablation, run_prompt_study, summarize)
from .metrics import emit_report, evaluate
from .model import ModelConfig
from .self_prompt import self_prompt_forward
from .train import (EPOCH_SET, PROMPT_STRATEGIES, SEARCH_SET, PretrainConfig, TrainConfig,
                    finetune, grid_search, pretrain_source)

log = logging.getLogger("selfprompt")

MANIFEST = "run_manifest.json"
OUTPUT_ROOT_ENV = "SELFPROMPT_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- settings

def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    return lambda text: None if str(text).strip().lower() == "none" else conv(text)


# key -> (section, field name, parser). Keys double as flag names (with dashes)
# and config-file keys.
CORPUS_KEYS = {
    "n_train": ("corpus", "n_train", int),
    "n_test": ("corpus", "n_test", int),
    "n_source_test": ("corpus", "n_source_test", int),
    "image_size": ("corpus", "image_size", int),
    "shapes": ("corpus", "shapes", lambda t: tuple(s.strip() for s in str(t).split(",") if s.strip())),
    "source_contrast": ("corpus", "source_contrast", float),
    "target_contrast": ("corpus", "target_contrast", float),
    "target_noise_std": ("corpus", "target_noise_std", float),
    "target_blur": ("corpus", "target_blur", float),
    "target_noise_corr": ("corpus", "target_noise_corr", float),
    "min_radius": ("corpus", "min_radius", float),
    "max_radius": ("corpus", "max_radius", float),
    "data_seed": ("corpus", "seed", int),
}
MODEL_KEYS = {
    name: ("model", name, int)
    for name in ("patch_size", "embed_dim", "encoder_depth", "num_heads", "decoder_depth",
                 "num_prompt_tokens_per_point", "in_chans", "mlp_ratio")
}
FINETUNE_KEYS = {
    "ablation": ("finetune", "ablation", str),
    "lr": ("finetune", "lr", float),
    "weight_decay": ("finetune", "weight_decay", float),
    "epochs": ("finetune", "epochs", int),
    "warmup_steps": ("finetune", "warmup_steps", _opt(int)),
    "batch_size": ("finetune", "batch_size", int),
    "alpha": ("finetune", "alpha", _opt(float)),
    "lora_rank": ("finetune", "lora_rank", int),
    "train_prompt_strategy": ("finetune", "train_prompt_strategy", str),
    "seed": ("finetune", "seed", int),
    "grad_clip": ("finetune", "grad_clip", _opt(float)),
    "schedule": ("finetune", "schedule", str),
    "aux_first_pass_dice": ("finetune", "aux_first_pass_dice", _bool),
    "threshold": ("finetune", "threshold", float),
    "lr_grid": ("finetune", "lr_grid", _opt(_floats)),
    "wd_grid": ("finetune", "wd_grid", _opt(_floats)),
    "epoch_grid": ("finetune", "epoch_grid", _opt(_ints)),
}
PRETRAIN_KEYS = {
    f"pretrain_{name}": ("pretrain", name, conv)
    for name, conv in (("lr", float), ("weight_decay", float), ("epochs", int), ("warmup_steps", _opt(int)),
                       ("batch_size", int), ("seed", int), ("grad_clip", _opt(float)),
                       ("instance_prompts", _bool), ("box_jitter", int), ("bce_weight", float))
}
ALL_KEYS = {**CORPUS_KEYS, **MODEL_KEYS, **FINETUNE_KEYS, **PRETRAIN_KEYS}

PROFILES = {"default": lambda: Profile(), "desk": desk_profile}


def _add_keys(parser, keys):
    group = parser.add_argument_group("settings (flags override --config)")
    for key in keys:
        group.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V")


def _add_common(parser, default_profile="default"):
    parser.add_argument("--out", help="output directory (relative paths resolve under $%s)" % OUTPUT_ROOT_ENV)
    parser.add_argument("--config", help="flat key=value settings file")
    parser.add_argument("--profile", choices=sorted(PROFILES), default=default_profile)
    parser.add_argument("--quiet", action="store_true")


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    items = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in ALL_KEYS:
            raise UsageError(f"{path}:{n}: unknown setting {raw.strip()!r}")
        items[key] = value.strip()
    return items


def resolve_settings(args, keys):
    """Return ``(profile, snapshot, explicit)``.

    ``snapshot`` is the flat resolved map written to manifests; ``explicit`` is
    the set of keys given as command-line flags (conflict checks look only at
    these, so a shared config file never trips them).
    """
    profile = PROFILES[args.profile]()
    raw = read_config_file(args.config) if args.config else {}
    raw = {k: v for k, v in raw.items() if k in keys}
    explicit = set()
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
            explicit.add(key)
    sections = {name: getattr(profile, name).to_dict() for name in ("corpus", "model", "finetune", "pretrain")}
    sections["finetune"]["alpha"] = None  # re-derived from the ablation unless given
    for key, text in raw.items():
        section, name, conv = ALL_KEYS[key]
        try:
            sections[section][name] = conv(text)
        except ValueError as exc:
            raise UsageError(f"--{key.replace('_', '-')}: {exc}") from None
    if "image_size" in raw:
        sections["model"]["image_size"] = sections["corpus"]["image_size"]
    sections["corpus"]["shapes"] = tuple(sections["corpus"]["shapes"])
    try:
        corpus = CorpusSpec(**sections["corpus"])
        corpus.validate()
        model = ModelConfig(**sections["model"])
        ft = TrainConfig(**sections["finetune"])
        pre = PretrainConfig(**sections["pretrain"])
    except (ConfigError, GenerationError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    if corpus.image_size != model.image_size:
        raise UsageError(f"corpus image_size {corpus.image_size} != model image_size {model.image_size}")
    profile = Profile(corpus=corpus, model=model, pretrain=pre, finetune=ft, seeds=profile.seeds)
    snapshot = {"profile": args.profile}
    for key in keys:
        section, name, _ = ALL_KEYS[key]
        value = getattr(getattr(profile, section), name)
        snapshot[key] = ",".join(map(str, value)) if isinstance(value, (list, tuple)) else value
    return profile, snapshot, explicit


# --------------------------------------------------------------------------- manifests

def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out is required")
    out = Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def artifact_digests(out: Path) -> list:
    """``[{path, sha256}]`` for every file under ``out`` except the manifest."""
    records = []
    for dirpath, dirs, files in os.walk(out):
        dirs.sort()
        for name in sorted(files):
            if name == MANIFEST:
                continue
            p = Path(dirpath) / name
            records.append({"path": p.relative_to(out).as_posix(), "sha256": file_digest(p)})
    return records


def write_manifest(out: Path, args, argv, snapshot, seed, started, extra=None) -> Path:
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config_path": str(Path(args.config).resolve()) if getattr(args, "config", None) else None,
        "config": snapshot,
        "seed": seed,
        "artifacts": artifact_digests(out),
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# --------------------------------------------------------------------------- helpers

def _corpus(args, profile):
    if getattr(args, "data", None):
        root = Path(args.data)
        if not root.is_dir():
            raise UsageError(f"corpus directory {root} does not exist")
        return read_corpus(root)
    return generate_corpus(profile.corpus)


def _load_model(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _base_model(args, profile, corpus, out: Path):
    """Load ``--base`` or pretrain a fresh base (saved as ``base.ckpt``)."""
    if getattr(args, "base", None):
        model, _ = _load_model(args.base)
        return model
    source = select(corpus, "source", "train")
    if not source:
        raise UsageError("no source/train samples to pretrain on; pass --base")
    model = pretrain_base(profile, source)
    save_checkpoint(model, out / "base.ckpt", meta={"stage": "pretrain", **profile.pretrain.to_dict()})
    return model


def _write_log(path: Path, history) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in history.records]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _save_mask(mask, path: Path) -> None:
    Image.fromarray((np.asarray(mask) * 255).astype(np.uint8)).save(path)


# --------------------------------------------------------------------------- commands

def cmd_gen_data(args, argv):
    started = _now()
    profile, snapshot, _ = resolve_settings(args, CORPUS_KEYS)
    out = _out_dir(args)
    samples = generate_corpus(profile.corpus)
    write_corpus(samples, out)
    digest = corpus_digest(out)
    write_manifest(out, args, argv, snapshot, profile.corpus.seed, started, {"corpus_digest": digest})
    counts = {f"{d}/{s}": len(select(samples, d, s)) for d, s in
              (("source", "train"), ("target", "train"), ("target", "test"), ("source", "test"))}
    print(json.dumps({"out": str(out), "corpus_digest": digest, "counts": counts}, sort_keys=True))


def cmd_train(args, argv):
    started = _now()
    profile, snapshot, explicit = resolve_settings(args, ALL_KEYS)
    cfg = profile.finetune
    grid = bool(args.grid) or cfg.has_grid
    if args.stage == "pretrain":
        if args.base or grid or explicit & set(FINETUNE_KEYS) - {"threshold"}:
            raise UsageError("--stage pretrain takes pretrain-* settings, not fine-tuning ones")
    elif cfg.ablation == "vanilla":
        trained = explicit & {"epochs", "lr", "weight_decay", "warmup_steps", "alpha", "lora_rank",
                              "train_prompt_strategy", "lr_grid", "wd_grid", "epoch_grid"}
        if trained or args.grid:
            raise UsageError(f"ablation vanilla trains nothing; drop {sorted(trained) or ['--grid']}")
    out = _out_dir(args)
    corpus = _corpus(args, profile)
    extra = {}

    if args.stage == "pretrain":
        model, history = pretrain_source(profile.model, select(corpus, "source", "train"), profile.pretrain)
        save_checkpoint(model, out / "model.ckpt", meta={"stage": "pretrain", **profile.pretrain.to_dict()})
        _write_log(out / "train_log.jsonl", history)
        write_manifest(out, args, argv, snapshot, profile.pretrain.seed, started)
        print(json.dumps({"checkpoint": str(out / "model.ckpt"), "steps": len(history.records)}))
        return

    base = _base_model(args, profile, corpus, out)
    extra["base_digest"] = state_digest(base)
    target = select(corpus, "target", "train")
    if not target and cfg.ablation != "vanilla":
        raise UsageError("no target/train samples to fine-tune on")
    if grid:
        if args.grid and not cfg.has_grid:
            cfg = replace(cfg, lr_grid=list(SEARCH_SET), wd_grid=list(SEARCH_SET), epoch_grid=list(EPOCH_SET))
        cfg, cells = grid_search(base, target, cfg)
        rows = ["lr\tweight_decay\tepochs\tval_dice\tval_iou"]
        rows += [f"{c.lr:g}\t{c.weight_decay:g}\t{c.epochs}\t{c.val_dice:.6f}\t{c.val_iou:.6f}" for c in cells]
        (out / "grid.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        print("\n".join(rows))
        extra["selected"] = {"lr": cfg.lr, "weight_decay": cfg.weight_decay, "epochs": cfg.epochs}
    model, history = finetune(base, target, cfg)
    save_checkpoint(model, out / "model.ckpt",
                    meta={"stage": "finetune", "base_digest": extra["base_digest"], **cfg.to_dict()})
    _write_log(out / "train_log.jsonl", history)
    write_manifest(out, args, argv, snapshot, cfg.seed, started, extra)
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "ablation": cfg.ablation,
                      "steps": len(history.records)}))


def cmd_eval(args, argv):
    started = _now()
    profile, snapshot, _ = resolve_settings(args, {**CORPUS_KEYS, "threshold": FINETUNE_KEYS["threshold"]})
    model, meta = _load_model(args.checkpoint)
    if args.k < 0:
        raise UsageError("--k must be >= 0")
    out = _out_dir(args)
    samples = select(_corpus(args, profile), args.domain, args.split)
    if not samples:
        raise UsageError(f"no {args.domain}/{args.split} samples to evaluate")
    threshold = profile.finetune.threshold
    report, masks = evaluate(model, samples, k=args.k, threshold=threshold,
                             ablation=str(meta.get("ablation", "")), seed=int(meta.get("seed", 0)),
                             train_prompt_strategy=str(meta.get("train_prompt_strategy", "none")),
                             return_predictions=True)
    emit_report(report, out / "report.jsonl")
    if args.export_masks:
        (out / "masks").mkdir(exist_ok=True)
        for s, m in zip(samples, masks):
            _save_mask(m, out / "masks" / f"{s.id}.png")
    snapshot.update(k=args.k, checkpoint=str(args.checkpoint), domain=args.domain, split=args.split)
    write_manifest(out, args, argv, snapshot, int(meta.get("seed", 0)), started,
                   {"checkpoint_digest": file_digest(args.checkpoint), "gt_prompt_reads": report.gt_prompt_reads})
    print(json.dumps(report.aggregate(), sort_keys=True))


def cmd_predict(args, argv):
    started = _now()
    model, meta = _load_model(args.checkpoint)
    if args.k < 0:
        raise UsageError("--k must be >= 0")
    out = _out_dir(args)
    path = Path(args.image)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot read image ({exc})") from None
    size = model.cfg.image_size
    img = img.convert("RGB" if model.cfg.in_chans == 3 else "L")
    if img.size != (size, size):
        log.info("resizing %s from %s to %dx%d", path, img.size, size, size)
        img = img.resize((size, size), Image.BILINEAR)
    array = np.asarray(img).astype(np.float32) / 255.0
    result = self_prompt_forward(model, array, k=args.k, threshold=args.threshold)
    trace = ["pass\tprompt"]
    for i, (pred, prompt) in enumerate(zip(result.passes, result.prompts_used)):
        _save_mask(pred.numpy_mask(), out / f"pass{i}.png")
        if i > 0:
            trace.append(f"{i}\t{prompt.describe()}")
    (out / "boxes.tsv").write_text("\n".join(trace) + "\n", encoding="utf-8")
    snapshot = {"k": args.k, "threshold": args.threshold, "checkpoint": str(args.checkpoint),
                "image": str(path)}
    write_manifest(out, args, argv, snapshot, int(meta.get("seed", 0)), started,
                   {"checkpoint_digest": file_digest(args.checkpoint)})
    print("\n".join(trace))


def _seeds(args, profile):
    if args.seeds is None:
        return tuple(profile.seeds)
    try:
        seeds = _ints(args.seeds)
    except ValueError:
        raise UsageError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    return tuple(seeds)


def _summary_files(out: Path, rows, labels, stem):
    (out / f"{stem}.txt").write_text(format_summary(rows, labels), encoding="utf-8")
    lines = ["name\tn\tdice\tdice_std\tiou\tiou_std"]
    lines += [f"{r['name']}\t{r['n']}\t{r['dice']:.10f}\t{r['dice_std']:.10f}\t{r['iou']:.10f}\t{r['iou_std']:.10f}"
              for r in rows]
    (out / f"{stem}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_ablate(args, argv):
    started = _now()
    profile, snapshot, _ = resolve_settings(args, ALL_KEYS)
    profile.seeds = _seeds(args, profile)
    out = _out_dir(args)
    corpus = _corpus(args, profile)
    base = _base_model(args, profile, corpus, out)
    runs, _ = run_ablation(profile, base=base, corpus=corpus, out_dir=out)
    rows = summarize(runs)
    _summary_files(out, rows, ARM_LABELS, "summary")
    extra = {"base_digest": state_digest(base), "seeds": list(profile.seeds)}
    if args.sweep_k:
        kd = {r.seed: r.model for r in runs if r.ablation == "lora_sp_kd"}
        sweep = iteration_sweep(kd, select(corpus, "target", "test"), _ints(args.sweep_k),
                                profile.finetune.threshold)
        lines = ["k\tmean_dice\t" + "\t".join(f"seed{s}" for s in profile.seeds)]
        for k, by_seed in sweep.items():
            vals = [by_seed[s] for s in profile.seeds]
            lines.append(f"{k}\t{np.mean(vals):.10f}\t" + "\t".join(f"{v:.10f}" for v in vals))
        (out / "iteration_sweep.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    snapshot["seeds"] = ",".join(map(str, profile.seeds))
    write_manifest(out, args, argv, snapshot, profile.seeds[0], started, extra)
    print(format_summary(rows), end="")


def cmd_prompt_study(args, argv):
    started = _now()
    profile, snapshot, _ = resolve_settings(args, ALL_KEYS)
    profile.seeds = _seeds(args, profile)
    out = _out_dir(args)
    corpus = _corpus(args, profile)
    base = _base_model(args, profile, corpus, out)
    runs, _ = run_prompt_study(profile, base=base, corpus=corpus, out_dir=out)
    rows = summarize(runs, key="strategy", order=PROMPT_STRATEGIES)
    _summary_files(out, rows, STRATEGY_LABELS, "summary")
    snapshot["seeds"] = ",".join(map(str, profile.seeds))
    reads = {f"{r.strategy}-seed{r.seed}": r.report.gt_prompt_reads for r in runs}
    write_manifest(out, args, argv, snapshot, profile.seeds[0], started,
                   {"base_digest": state_digest(base), "seeds": list(profile.seeds),
                    "eval_gt_prompt_reads": reads})
    print(format_summary(rows, STRATEGY_LABELS), end="")


def cmd_replay(args, argv):
    """Re-run a manifest's command into a new directory and compare artifact digests."""
    path = Path(args.manifest)
    if path.is_dir():
        path = path / MANIFEST
    if not path.is_file():
        raise UsageError(f"manifest {path} does not exist")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if not args.out:
        raise UsageError("replay: --out is required")
    old = list(manifest["argv"])
    rerun = []
    skip = False
    for tok in old:
        if skip:
            skip = False
            continue
        if tok in ("--out", "--config"):
            skip = True
            continue
        if tok.startswith(("--out=", "--config=")):
            continue
        rerun.append(tok)
    with tempfile.TemporaryDirectory() as tmp:
        cfg_keys = {k: v for k, v in manifest.get("config", {}).items() if k in ALL_KEYS}
        cfg_path = Path(tmp) / "replay.cfg"
        cfg_path.write_text("".join(f"{k}={'none' if v is None else v}\n" for k, v in cfg_keys.items()),
                            encoding="utf-8")
        extra = ["--out", args.out]
        if cfg_keys:
            extra += ["--config", str(cfg_path)]
        code = main(rerun + extra)
    if code != EXIT_OK:
        return code
    out = Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    fresh = {a["path"]: a["sha256"] for a in artifact_digests(out)}
    recorded = {a["path"]: a["sha256"] for a in manifest["artifacts"]}
    diffs = sorted(p for p in set(fresh) | set(recorded) if fresh.get(p) != recorded.get(p))
    for p in diffs:
        print(f"MISMATCH {p}: recorded {recorded.get(p)} now {fresh.get(p)}")
    same = sum(1 for p in recorded if p not in diffs)
    print(f"replay: {same}/{len(recorded)} artifacts identical")
    return EXIT_RUNTIME if diffs else EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selfprompt", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic corpus as PNG pairs plus manifest")
    _add_common(p)
    _add_keys(p, CORPUS_KEYS)
    p.add_argument("--seed", dest="data_seed", default=None, metavar="V", help="alias of --data-seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain a base model or fine-tune one ablation arm")
    _add_common(p)
    p.add_argument("--stage", choices=("pretrain", "finetune"), default="finetune")
    p.add_argument("--data", help="corpus directory from gen-data (default: generate from settings)")
    p.add_argument("--base", help="pretrained base checkpoint (default: pretrain one)")
    p.add_argument("--grid", action="store_true", help="grid-search lr, weight decay and epochs")
    _add_keys(p, ALL_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--k", type=int, default=1, help="self-prompting iterations")
    p.add_argument("--domain", default="target")
    p.add_argument("--split", default="test")
    p.add_argument("--export-masks", action="store_true")
    _add_keys(p, {**CORPUS_KEYS, "threshold": None})
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image and trace the self-prompt boxes")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    for name, func, helptext in (("ablate", cmd_ablate, "run the vanilla/LoRA/SP/KD ladder over seeds"),
                                 ("prompt-study", cmd_prompt_study,
                                  "compare training prompt strategies under promptless evaluation")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p, default_profile="desk")
        p.add_argument("--data")
        p.add_argument("--base")
        p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
        p.set_defaults(func=func)
        if name == "ablate":
            p.add_argument("--sweep-k", default="0,1,2,3",
                           help="k values for the iteration sweep on the KD models ('' to skip)")
        _add_keys(p, ALL_KEYS)

    p = sub.add_parser("replay", help="re-run a manifest and compare artifact digests")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        code = args.func(args, argv)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, IngestionError, InputError, SelfPromptError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
