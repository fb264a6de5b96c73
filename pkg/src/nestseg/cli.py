"""``nestseg`` command line: phantom, pretrain, finetune, segment, evaluate, plot, config.

Exit codes: 0 success, 1 usage, 2 invalid input or configuration, 3 runtime failure.

Configuration is one YAML or JSON file with the sections ``model``, ``train``,
``data``, ``preprocess``, ``inference`` and ``evaluation``; ``--set
section.key=value`` overrides single entries (values parsed as YAML). Every
command writes the fully resolved configuration next to its outputs, and that
echo can be fed back through ``--config``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core import MNI, Grid, load_volume, save_label_map, save_mask
from .evaluation import build_report, emit_report, score_subject
from .inference import array_checksum, inverse_transform, model_predictor, plan_windows, segment_volume
from .losses import LossWeights
from .model.checkpoint import CheckpointError, load_model, load_pretrained_into_finetune, read_manifest
from .model.config import PRESETS, ConfigError, ModelConfig
from .phantom import PhantomSpec, generate_cohort, load_subject, read_cohort
from .preprocess import PreprocessConfig, PreprocessError, ToolAdapter, ToolError
from .training import (
    NonFiniteLoss,
    TrainConfig,
    create_state,
    fit,
    load_state,
    prepare_subject,
    read_log,
    split_dataset,
    toy_train_config,
)

log = logging.getLogger("nestseg")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3
ECHO_NAME = "nestseg_config.json"
TOOL_PATH_ENV = "NESTSEG_TOOL_PATH"

SECTION_DEFAULTS = {
    "model": {"preset": "default"},
    "train": {},
    "data": {"split": [32, 8, 5], "split_seed": 0},
    "preprocess": {"low_pct": 0.0, "high_pct": 99.5, "n4": None, "register": None, "skull_strip": None, "timeout": 3600.0},
    "inference": {
        "overlap": 0.5,
        "weighting": "gaussian",
        "sw_batch_size": 4,
        "keep_largest_component": False,
        "save_probabilities": False,
    },
    "evaluation": {"level": 0.95, "resamples": 10_000, "seed": 0, "brain_metric": "mean"},
}
# informational section written into echoes; accepted and ignored on input
_INFO_SECTIONS = ("command",)


class UsageError(Exception):
    pass


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- config


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError([f"override {item!r} is not of the form section.key=value"])
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2:
        raise ConfigError([f"override key {key!r} needs a section, e.g. train.{key}"])
    return parts, yaml.safe_load(raw)


def load_config(path: str | Path | None, overrides=()) -> dict:
    """Merge defaults, a config file and ``--set`` overrides; unknown sections fail."""
    cfg = copy.deepcopy(SECTION_DEFAULTS)
    problems = []
    if path:
        path = Path(path)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        for section, body in doc.items():
            if section in _INFO_SECTIONS:
                continue
            if section not in cfg:
                problems.append(f"unknown config section {section!r}")
            elif not isinstance(body, dict):
                problems.append(f"section {section!r} must be a mapping")
            else:
                cfg[section].update(body)
    for item in overrides:
        try:
            parts, value = _parse_override(item)
        except ConfigError as exc:
            problems += exc.problems
            continue
        if parts[0] not in cfg:
            problems.append(f"unknown config section {parts[0]!r} in override {item!r}")
            continue
        node = cfg[parts[0]]
        for p in parts[1:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"override {item!r} descends into a non-mapping")
                break
        else:
            node[parts[-1]] = value
    for name in ("data", "preprocess", "inference", "evaluation"):
        unknown = sorted(set(cfg[name]) - set(SECTION_DEFAULTS[name]))
        problems += [f"unknown {name} key {k!r}" for k in unknown]
    if problems:
        raise ConfigError(problems)
    return cfg


def resolve_model(cfg: dict, icv: bool) -> ModelConfig:
    body = dict(cfg["model"])
    preset = body.pop("preset", "default")
    if preset not in PRESETS:
        raise ConfigError([f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}"])
    known = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(body) - known)
    if unknown:
        raise ConfigError([f"unknown model key {k!r}" for k in unknown])
    model = PRESETS[preset]().replace(**body, icv_heads_enabled=icv)
    model.validate()
    return model


def resolve_train(cfg: dict, stage: str, model: ModelConfig) -> TrainConfig:
    body = dict(cfg["train"])
    body["stage"] = stage
    body.setdefault("crop_size", list(model.crop_size))
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(body) - known)
    problems = [f"unknown train key {k!r}" for k in unknown]
    if isinstance(body.get("loss_weights"), dict):
        lw_known = {f.name for f in fields(LossWeights)}
        problems += [f"unknown train.loss_weights key {k!r}" for k in sorted(set(body["loss_weights"]) - lw_known)]
    if problems:
        raise ConfigError(problems)
    if isinstance(body.get("loss_weights"), dict):
        base = toy_train_config(stage) if cfg["model"].get("preset") == "toy" else TrainConfig(stage=stage)
        merged = {**vars(base.loss_weights), **body["loss_weights"]}
        body["loss_weights"] = LossWeights(**merged)
    if cfg["model"].get("preset") == "toy":
        train = toy_train_config(**body)
    else:
        train = TrainConfig(**body)
    train.validate(model)
    return train


def preprocess_config(cfg: dict, skull_stripped: bool) -> PreprocessConfig:
    p = cfg["preprocess"]

    def adapter(name, kind="volume"):
        spec = p.get(name)
        if spec is None:
            return ToolAdapter(name, None, p["timeout"], kind)
        if isinstance(spec, (str, list)):
            spec = {"command": spec}
        return ToolAdapter(name, spec.get("command"), spec.get("timeout", p["timeout"]), kind, spec.get("reference"))

    return PreprocessConfig(
        skull_strip=adapter("skull_strip") if p.get("skull_strip") is not None else None,
        n4=adapter("n4"),
        register=adapter("register", "registration"),
        low_pct=p["low_pct"],
        high_pct=p["high_pct"],
        skull_stripped=skull_stripped,
    )


def write_echo(out_dir: Path, cfg: dict, command: dict, name: str = ECHO_NAME) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True, default=str))
    return path


def _command_record(args) -> dict:
    skip = {"func", "config", "set", "verbose", "quiet"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


def _use_tool_path():
    extra = os.environ.get(TOOL_PATH_ENV)
    if extra:
        os.environ["PATH"] = extra + os.pathsep + os.environ.get("PATH", "")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------- phantom


def cmd_phantom(args) -> int:
    cfg = load_config(args.config, args.set)
    shape = tuple(args.shape) * 3 if len(args.shape) == 1 else tuple(args.shape)
    if len(shape) != 3:
        raise CliError(f"--shape takes 1 or 3 values, got {args.shape}")
    spec = PhantomSpec(
        shape=shape,
        num_regions=args.regions,
        noise_sigma=args.noise,
        skull=not args.skull_stripped,
        jitter=args.jitter,
    )
    out = Path(args.out)
    generate_cohort(args.n, spec, args.seed, out)
    write_echo(out, cfg, _command_record(args))
    print(f"wrote {args.n} phantom subjects to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- training


def _load_training_data(data_dir: Path, cfg: dict, out: Path):
    cohort = read_cohort(data_dir)
    entries = cohort["subjects"]
    split = cfg["data"]["split"]
    if not (isinstance(split, (list, tuple)) and len(split) == 3):
        raise ConfigError([f"data.split must be three counts (train, val, test), got {split!r}"])
    train_e, val_e, test_e = split_dataset(entries, split, cfg["data"]["split_seed"])
    ids = {"train": [e["id"] for e in train_e], "val": [e["id"] for e in val_e], "test": [e["id"] for e in test_e]}
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(json.dumps(ids, indent=2))
    train = [prepare_subject(load_subject(data_dir, e)) for e in train_e]
    val = [prepare_subject(load_subject(data_dir, e)) for e in val_e]
    return train, val, bool(cohort.get("skull_stripped", False))


def _run_training(args, stage: str) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    model_cfg = resolve_model(cfg, icv=stage == "finetune")
    train_cfg = resolve_train(cfg, stage, model_cfg)
    data_dir = Path(args.data)
    if not (data_dir / "cohort.json").exists():
        raise CliError(f"{data_dir} is not a dataset directory (no cohort.json)")
    train, val, stripped = _load_training_data(data_dir, cfg, out)
    train_cfg = train_cfg.replace(skull_stripped=stripped)
    cfg["train"] = {k: v for k, v in train_cfg.to_dict().items() if k != "stage"}
    echo = {"command": _command_record(args), **cfg}
    if args.resume:
        state = load_state(args.resume, run_dir=out, cfg=train_cfg)
    elif stage == "finetune":
        model, _ = load_pretrained_into_finetune(args.pretrained, model_cfg, seed=train_cfg.seed)
        state = create_state(model_cfg, train_cfg, model=model, run_dir=out)
    else:
        state = create_state(model_cfg, train_cfg, run_dir=out)
    write_echo(out, cfg, _command_record(args))
    state = fit(state, train, val, run_dir=out, config_echo=echo)
    best = state.best or {}
    print(f"{stage} finished at iteration {state.iteration}; best brain DSC {best.get('brain', float('nan')):.4f} -> {out / 'best'}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _run_training(args, "pretrain")


def cmd_finetune(args) -> int:
    if not args.pretrained and not args.resume:
        raise CliError("finetune needs --pretrained CHECKPOINT (or --resume)")
    if args.pretrained and not (Path(args.pretrained) / "manifest.json").exists():
        raise CliError(f"pretrained checkpoint not found: {args.pretrained}")
    return _run_training(args, "finetune")


# --------------------------------------------------------------------------- segment


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _inputs(paths: list[str]) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found += sorted(q for q in p.iterdir() if q.name.endswith((".nii", ".nii.gz")))
        elif p.exists():
            found.append(p)
        else:
            raise CliError(f"input not found: {p}")
    if not found:
        raise CliError("no NIfTI inputs found")
    return found


def output_paths(out: Path, stem: str) -> dict[str, Path]:
    return {
        "labels": out / f"{stem}_seg.nii.gz",
        "ticv": out / f"{stem}_ticv.nii.gz",
        "pfv": out / f"{stem}_pfv.nii.gz",
        "manifest": out / f"{stem}_manifest.json",
    }


def segment_file(path: Path, out: Path, model, ckpt_manifest: dict, cfg: dict, skull_stripped: bool, allow_passthrough: bool) -> dict:
    import nibabel
    import torch

    stem = _stem(path)
    paths = output_paths(out, stem)
    stage = "load"
    try:
        volume = load_volume(path, skull_stripped=skull_stripped)
        stage = "preprocess"
        from .preprocess import preprocess

        mni, record = preprocess(volume, preprocess_config(cfg, skull_stripped), allow_passthrough)
        stage = "inference"
        inf = cfg["inference"]
        plan = plan_windows(MNI.shape, model.cfg.crop_size, inf["overlap"], inf["weighting"])
        sink = None
        if inf["save_probabilities"]:
            channels = model.cfg.num_classes + (2 if model.cfg.icv_heads_enabled else 0)
            sink = np.lib.format.open_memmap(out / f"{stem}_prob_mni.npy", "w+", np.float32, (channels, *MNI.shape))
        result = segment_volume(
            mni,
            model_predictor(model),
            plan,
            model.cfg.num_classes,
            inf["sw_batch_size"],
            inf["keep_largest_component"],
            sink,
        )
        if result.ticv is None:
            raise CliError("checkpoint has no TICV/PFV heads; segment needs a finetuned checkpoint", EXIT_INVALID)
        stage = "inverse_transform"
        native = inverse_transform(result, record.forward, Grid(volume.shape, volume.affine))
        stage = "write"
        save_label_map(native.labels, paths["labels"])
        save_mask(native.ticv, paths["ticv"])
        save_mask(native.pfv, paths["pfv"])
        manifest = {
            "input": str(path),
            "input_sha256": _sha256(path),
            "versions": {"nestseg": __version__, "torch": torch.__version__, "numpy": np.__version__, "nibabel": nibabel.__version__},
            "checkpoint": {"blob_sha256": ckpt_manifest["blob_sha256"], "iteration": ckpt_manifest.get("iteration"), "stage": ckpt_manifest.get("stage")},
            "skull_stripped": skull_stripped,
            "preprocess": record.to_dict(),
            "window_plan": plan.to_dict(),
            "affine_chain": {"forward_native_to_mni": record.forward.tolist(), "mni_grid": {"shape": list(MNI.shape), "affine": MNI.grid.affine.tolist()}},
            "outputs": {
                k: {"file": paths[k].name, "sha256": array_checksum(getattr(native, k).data)} for k in ("labels", "ticv", "pfv")
            },
            "volumes_mm3": {"ticv": native.ticv.volume_mm3(), "pfv": native.pfv.volume_mm3()},
        }
        paths["manifest"].write_text(json.dumps(manifest, indent=2))
        return manifest
    except BaseException as exc:
        for p in paths.values():
            p.unlink(missing_ok=True)
        if isinstance(exc, CliError):
            raise
        if isinstance(exc, (PreprocessError, ToolError)):
            raise CliError(f"{stem}: {exc}", EXIT_RUNTIME) from exc
        if isinstance(exc, (ValueError, FileNotFoundError)) and stage == "load":
            raise CliError(f"{stem}: cannot load input: {exc}", EXIT_INVALID) from exc
        if isinstance(exc, Exception):
            raise CliError(f"{stem}: {stage} failed: {exc}", EXIT_RUNTIME) from exc
        raise


def cmd_segment(args) -> int:
    _use_tool_path()
    cfg = load_config(args.config, args.set)
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise CliError(f"checkpoint not found: {ckpt} (expected a directory with manifest.json)")
    manifest = read_manifest(ckpt)
    stripped_model = bool(manifest.get("skull_stripped", False))
    if args.skull_stripped != stripped_model:
        want = "skull-stripped" if args.skull_stripped else "non-stripped"
        have = "skull-stripped" if stripped_model else "non-stripped"
        raise CliError(
            f"input declared {want} but checkpoint {ckpt} is a {have} model variant; "
            f"use the matching checkpoint{' or drop --skull-stripped' if args.skull_stripped else ' or pass --skull-stripped'}"
        )
    inputs = _inputs(args.input)
    model, manifest = load_model(ckpt)
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_echo(out, cfg, _command_record(args))

    def run(p):
        return segment_file(p, out, model, manifest, cfg, args.skull_stripped, args.allow_passthrough)

    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            results = list(pool.map(run, inputs))
    else:
        results = [run(p) for p in inputs]
    for p, m in zip(inputs, results):
        print(f"{_stem(p)}: TICV {m['volumes_mm3']['ticv']:.0f} mm3, PFV {m['volumes_mm3']['pfv']:.0f} mm3")
    return EXIT_OK


# --------------------------------------------------------------------------- evaluate


def _label_dir(d: Path) -> Path:
    return d / "labels" if (d / "cohort.json").exists() else d


def _subject_list(spec: str | None, default: list[str]) -> list[str]:
    if spec is None:
        return default
    p = Path(spec)
    if p.exists():
        doc = json.loads(p.read_text())
        return list(doc["test"] if isinstance(doc, dict) else doc)
    return [s for s in spec.split(",") if s]


def cmd_evaluate(args) -> int:
    from .core import Structure, load_label_map, load_mask

    cfg = load_config(args.config, args.set)
    ev = cfg["evaluation"]
    pred_dir, gt_dir = Path(args.pred), _label_dir(Path(args.gt))
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise CliError(f"not a directory: {d}")
    gt_stems = sorted(q.name[: -len("_seg.nii.gz")] for q in gt_dir.glob("*_seg.nii.gz"))
    stems = _subject_list(args.subjects, gt_stems)
    if not stems:
        raise CliError(f"no ground-truth label maps (*_seg.nii.gz) in {gt_dir}")
    missing_pred = [s for s in stems if not (pred_dir / f"{s}_seg.nii.gz").exists()]
    missing_gt = [s for s in stems if not (gt_dir / f"{s}_seg.nii.gz").exists()]
    problems = [f"no prediction for subject {s}" for s in missing_pred] + [f"no ground truth for subject {s}" for s in missing_gt]
    structures = [s.lower() for s in args.structures]
    for s in stems:
        for name in structures:
            if not (gt_dir / f"{s}_{name}.nii.gz").exists():
                problems.append(f"ground truth for {s} lacks {name.upper()} ({s}_{name}.nii.gz)")
            elif not (pred_dir / f"{s}_{name}.nii.gz").exists():
                problems.append(f"prediction for {s} lacks {name.upper()} ({s}_{name}.nii.gz)")
    if problems:
        raise CliError("unmatched subjects: " + "; ".join(problems))

    def score(s):
        kw = {}
        for name in structures:
            st = Structure(name.upper())
            kw[f"pred_{name}"] = load_mask(pred_dir / f"{s}_{name}.nii.gz", st)
            kw[f"gt_{name}"] = load_mask(gt_dir / f"{s}_{name}.nii.gz", st)
        return score_subject(
            s, load_label_map(pred_dir / f"{s}_seg.nii.gz"), load_label_map(gt_dir / f"{s}_seg.nii.gz"), **kw
        )

    with ThreadPoolExecutor(max(1, args.workers)) as pool:
        scores = list(pool.map(score, stems))
    report = build_report(scores, ev["level"], ev["resamples"], ev["seed"], ev["brain_metric"])
    out = Path(args.out)
    formats = ["markdown" if f == "md" else f for f in args.format]
    written = emit_report(report, out, formats)
    write_echo(out, cfg, _command_record(args))
    if "markdown" in written:
        print(written["markdown"].read_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------- plot


def _switch_from_run(log_path: Path) -> int | None:
    for name in ("last", "best"):
        m = log_path.parent / name / "manifest.json"
        if m.exists():
            return json.loads(m.read_text())["train_config"]["loss_weights"]["switch_iteration"]
    return None


def plot_curves(rows: list[dict], out: Path, switch: int | None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    val = [r for r in rows if r.get("kind") == "val"]
    if not val:
        raise CliError("training log has no validation rows to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    its = [r["iteration"] for r in val]
    for key, label in (("brain", "Brain"), ("ticv", "TICV"), ("pfv", "PFV")):
        if all(key in r for r in val):
            ax.plot(its, [r[key] for r in val], marker="o", ms=3, label=label)
    if switch is not None:
        ax.axvline(switch, color="grey", ls="--", lw=1, label=f"weight switch @ {switch}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("validation DSC")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right")
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return out


def cmd_plot(args) -> int:
    cfg = load_config(args.config, args.set)
    log_path = Path(args.log)
    if not log_path.exists():
        raise CliError(f"training log not found: {log_path}")
    rows = read_log(log_path)
    if not rows:
        raise CliError(f"training log {log_path} is empty")
    switch = args.switch if args.switch is not None else _switch_from_run(log_path)
    if switch is None:
        switch = LossWeights().switch_iteration
    out = plot_curves(rows, Path(args.out), switch)
    write_echo(out.parent, cfg, _command_record(args), name=out.name + ".config.json")
    print(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- config


def cmd_config(args) -> int:
    cfg = load_config(args.config, args.set)
    model = resolve_model(cfg, icv=args.stage == "finetune")
    train = resolve_train(cfg, args.stage, model)
    lw = train.loss_weights
    doc = {
        **cfg,
        "model": {"preset": cfg["model"].get("preset", "default"), **model.to_dict()},
        "train": train.to_dict(),
        "loss_schedule": {
            "pre_switch": list(lw.pre_switch),
            "post_switch": list(lw.post_switch),
            "switch_iteration": lw.switch_iteration,
        },
    }
    text = yaml.safe_dump(doc, sort_keys=False) if args.format == "yaml" else json.dumps(doc, indent=2)
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML or JSON config file (sections: model, train, data, preprocess, inference, evaluation)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config entry; repeatable")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeat for debug)")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nestseg", description="Whole-brain segmentation with TICV and PFV estimation.")
    parser.add_argument("--version", action="version", version=f"nestseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic phantom cohort")
    _common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=1, help="number of subjects (default 1)")
    p.add_argument("--shape", type=int, nargs="+", default=[96], help="grid extent: one value (cube) or three")
    p.add_argument("--regions", type=int, default=5, help="number of labelled regions K (default 5)")
    p.add_argument("--noise", type=float, default=10.0, help="Gaussian noise sigma (default 10)")
    p.add_argument("--jitter", type=float, default=0.05, help="relative per-subject semi-axis jitter (default 0.05)")
    p.add_argument("--seed", type=int, default=0, help="cohort seed (default 0)")
    p.add_argument("--skull-stripped", action="store_true", help="omit the skull shell")
    p.set_defaults(func=cmd_phantom)

    for name, fn, text in (("pretrain", cmd_pretrain, "train the brain head"), ("finetune", cmd_finetune, "train all heads from a pretrained checkpoint")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--data", required=True, help="dataset directory containing cohort.json")
        p.add_argument("--out", required=True, help="run directory (log, split, best/ and last/ checkpoints)")
        p.add_argument("--resume", help="continue from a checkpoint written by an earlier run")
        if name == "finetune":
            p.add_argument("--pretrained", help="pretrained checkpoint directory (required unless --resume)")
        p.set_defaults(func=fn)

    p = sub.add_parser("segment", help="segment T1w volumes into labels, TICV and PFV")
    _common(p)
    p.add_argument("--input", required=True, nargs="+", help="NIfTI files or directories")
    p.add_argument("--checkpoint", required=True, help="finetuned checkpoint directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--skull-stripped", action="store_true", help="inputs are skull-stripped; requires the stripped model variant")
    p.add_argument("--allow-passthrough", action="store_true", help="run unconfigured tool adapters (N4, registration) as identity")
    p.add_argument("--workers", type=int, default=1, help="subjects processed concurrently (default 1)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--pred", required=True, help="directory of <stem>_seg/_ticv/_pfv.nii.gz predictions")
    p.add_argument("--gt", required=True, help="ground-truth directory (or a phantom dataset root)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--subjects", help="comma list of stems, or a split.json whose 'test' list is used")
    p.add_argument("--structures", nargs="*", default=["ticv", "pfv"], help="mask structures to score (default: ticv pfv)")
    p.add_argument("--format", nargs="+", default=["json", "csv", "markdown"], choices=["json", "csv", "markdown", "md"])
    p.add_argument("--workers", type=int, default=1, help="subjects scored concurrently (default 1)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="plot validation DSC curves from a training log")
    _common(p)
    p.add_argument("--log", required=True, help="train_log.jsonl")
    p.add_argument("--out", required=True, help="image path (.png or .svg)")
    p.add_argument("--switch", type=int, help="iteration of the loss-weight switch (default: from the run checkpoint)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("config", help="print the resolved configuration")
    _common(p)
    p.add_argument("--stage", choices=["pretrain", "finetune"], default="finetune")
    p.add_argument("--format", choices=["json", "yaml"], default="json")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"nestseg {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"nestseg {args.command}: invalid configuration:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"nestseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteLoss as exc:
        print(f"nestseg {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"nestseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("unhandled error", exc_info=True)
        print(f"nestseg {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
