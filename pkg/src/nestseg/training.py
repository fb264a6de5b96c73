"""Pretrain / finetune loop: crop sampling, cosine LR, validation, checkpoints, JSONL log."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import LabelMap, Volume
from .evaluation import dsc, region_dsc
from .inference import model_predictor, plan_windows, segment_volume
from .losses import LossBreakdown, LossWeights, beta_schedule, composite_loss
from .model.checkpoint import read_checkpoint, write_checkpoint
from .model.config import ConfigError, ModelConfig
from .model.network import UNesT, build_model, init_icv_heads
from .phantom import Subject
from .preprocess import normalize_intensity

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")
_STAGE_DEFAULTS = {
    "pretrain": {"base_lr": 1e-4, "total_iterations": 200_000},
    "finetune": {"base_lr": 1e-5, "total_iterations": 25_000},
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    base_lr: float | None = None  # None -> stage default
    weight_decay: float = 1e-5
    total_iterations: int | None = None  # None -> stage default
    crop_size: tuple[int, int, int] = (96, 96, 96)
    batch_size: int = 1
    seed: int = 0
    validation_interval: int = 2_500
    loss_weights: LossWeights = field(default_factory=LossWeights)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_min: float = 0.0
    include_background: bool = True
    sw_overlap: float = 0.5
    sw_batch_size: int = 2
    skull_stripped: bool = False

    def __post_init__(self):
        if self.stage in _STAGE_DEFAULTS:
            for k, v in _STAGE_DEFAULTS[self.stage].items():
                if getattr(self, k) is None:
                    object.__setattr__(self, k, v)
        object.__setattr__(self, "crop_size", tuple(int(c) for c in self.crop_size))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))

    def problems(self, model_cfg: ModelConfig | None = None) -> list[str]:
        out = []
        if self.stage not in STAGES:
            out.append(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not (isinstance(self.base_lr, (int, float)) and self.base_lr > 0):
            out.append(f"base_lr must be > 0, got {self.base_lr}")
        if not (isinstance(self.total_iterations, int) and self.total_iterations > 0):
            out.append(f"total_iterations must be a positive integer, got {self.total_iterations}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sw_batch_size < 1:
            out.append(f"sw_batch_size must be >= 1, got {self.sw_batch_size}")
        if self.validation_interval < 1:
            out.append(f"validation_interval must be >= 1, got {self.validation_interval}")
        if not 0.0 <= self.sw_overlap < 1.0:
            out.append(f"sw_overlap must lie in [0, 1), got {self.sw_overlap}")
        if not all(0.0 <= b < 1.0 for b in self.adam_betas) or len(self.adam_betas) != 2:
            out.append(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")
        if self.lr_min < 0 or (isinstance(self.base_lr, (int, float)) and self.lr_min > self.base_lr):
            out.append(f"lr_min must lie in [0, base_lr], got {self.lr_min}")
        if len(self.crop_size) != 3 or min(self.crop_size) < 1:
            out.append(f"crop_size must be three positive extents, got {self.crop_size}")
        if model_cfg is not None:
            out += [f"model: {p}" for p in model_cfg.problems()]
            if self.crop_size != model_cfg.crop_size:
                out.append(f"crop_size {self.crop_size} differs from the model crop {model_cfg.crop_size}")
            if self.stage == "finetune" and not model_cfg.icv_heads_enabled:
                out.append("finetune stage needs a model config with icv_heads_enabled")
            if self.stage == "pretrain" and model_cfg.icv_heads_enabled:
                out.append("pretrain stage needs a model config without TICV/PFV heads")
        return out

    def validate(self, model_cfg: ModelConfig | None = None) -> "TrainConfig":
        problems = self.problems(model_cfg)
        if problems:
            raise ConfigError(problems)
        return self

    def lr_at(self, iteration: int) -> float:
        return cosine_lr(iteration, self.base_lr, self.total_iterations, self.lr_min)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown training config key {k!r}" for k in unknown])
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            lw_known = {f.name for f in fields(LossWeights)}
            bad = sorted(set(d["loss_weights"]) - lw_known)
            if bad:
                raise ConfigError([f"unknown loss_weights key {k!r}" for k in bad])
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def toy_train_config(stage: str = "finetune", **kw) -> TrainConfig:
    """Desk-scale recipe for the toy model preset (crop 32, minutes on one CPU core)."""
    base = dict(
        stage=stage,
        base_lr=2e-3,
        total_iterations=1_600,
        crop_size=(32, 32, 32),
        batch_size=2,
        validation_interval=100,
        loss_weights=LossWeights(switch_iteration=1_280),
    )
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------------------- schedule


def cosine_lr(iteration: int, base_lr: float, total: int, lr_min: float = 0.0) -> float:
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return lr_min + (base_lr - lr_min) * (1.0 + math.cos(math.pi * iteration / total)) / 2.0


# --------------------------------------------------------------------------- data


@dataclass(frozen=True)
class TrainingSubject:
    """Normalised image (1, H, W, D) float32 with aligned targets."""

    id: str
    image: np.ndarray
    labels: np.ndarray
    ticv: np.ndarray | None = None
    pfv: np.ndarray | None = None
    affine: np.ndarray | None = None

    @property
    def shape(self):
        return self.labels.shape

    def volume(self) -> Volume:
        return Volume(self.image, self.affine if self.affine is not None else np.eye(4))


def prepare_subject(subject: Subject) -> TrainingSubject:
    vol, _ = normalize_intensity(subject.volume)
    return TrainingSubject(
        subject.id,
        vol.data,
        subject.labels.data,
        subject.ticv.data if subject.ticv is not None else None,
        subject.pfv.data if subject.pfv is not None else None,
        vol.affine,
    )


def _pad_to(arr: np.ndarray, size: Sequence[int]) -> np.ndarray:
    spatial = arr.shape[-3:]
    pads = [(max(0, s - e) // 2, max(0, s - e) - max(0, s - e) // 2) for e, s in zip(spatial, size)]
    if not any(p for pair in pads for p in pair):
        return arr
    return np.pad(arr, [(0, 0)] * (arr.ndim - 3) + pads)


def random_crop(image: np.ndarray, targets: Sequence[np.ndarray | None], size, rng: np.random.Generator):
    """One uniformly placed window cut identically from the image and every target.

    Arrays smaller than ``size`` are zero-padded symmetrically first. Returns
    ``(image_crop, *target_crops)``; ``None`` targets pass through.
    """
    size = tuple(int(s) for s in size)
    image = _pad_to(image, size)
    targets = [None if t is None else _pad_to(t, size) for t in targets]
    spatial = image.shape[-3:]
    corner = [int(rng.integers(0, e - s + 1)) for e, s in zip(spatial, size)]
    sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
    out = [image[(Ellipsis, *sl)]]
    out += [None if t is None else t[(Ellipsis, *sl)] for t in targets]
    return tuple(out)


@dataclass(frozen=True)
class RandomCrop:
    size: tuple[int, int, int]

    def __call__(self, subject: TrainingSubject, rng: np.random.Generator):
        return random_crop(subject.image, (subject.labels, subject.ticv, subject.pfv), self.size, rng)


def transform_pipeline(cfg: TrainConfig) -> tuple:
    # random cropping is the only augmentation
    return (RandomCrop(cfg.crop_size),)


@dataclass
class Batch:
    image: torch.Tensor  # (B, 1, *crop)
    labels: torch.Tensor  # (B, *crop) int64
    ticv: torch.Tensor | None
    pfv: torch.Tensor | None
    subjects: list[str]


def sample_batch(subjects: Sequence[TrainingSubject], cfg: TrainConfig, rng: np.random.Generator, dtype=torch.float32) -> Batch:
    (crop,) = transform_pipeline(cfg)
    imgs, labs, ticvs, pfvs, ids = [], [], [], [], []
    for _ in range(cfg.batch_size):
        s = subjects[int(rng.integers(0, len(subjects)))]
        img, lab, t, p = crop(s, rng)
        imgs.append(img)
        labs.append(lab)
        ticvs.append(t)
        pfvs.append(p)
        ids.append(s.id)
    has_icv = all(t is not None for t in ticvs) and all(p is not None for p in pfvs)
    return Batch(
        torch.from_numpy(np.stack(imgs)).to(dtype),
        torch.from_numpy(np.stack(labs).astype(np.int64)),
        torch.from_numpy(np.stack(ticvs)[:, None]).to(dtype) if has_icv else None,
        torch.from_numpy(np.stack(pfvs)[:, None]).to(dtype) if has_icv else None,
        ids,
    )


def split_dataset(items: Sequence, counts: Sequence[int] = (32, 8, 5), seed: int = 0) -> tuple[list, ...]:
    counts = tuple(int(c) for c in counts)
    if any(c < 0 for c in counts):
        raise ValueError(f"split counts must be non-negative, got {counts}")
    if len(items) < sum(counts):
        raise ValueError(f"need at least {sum(counts)} items for a {counts} split, got {len(items)}")
    order = np.random.default_rng(seed).permutation(len(items))
    out, start = [], 0
    for c in counts:
        out.append([items[i] for i in order[start : start + c]])
        start += c
    return tuple(out)


# --------------------------------------------------------------------------- state


class NonFiniteLoss(RuntimeError):
    def __init__(self, message: str, dump: dict, dump_path: Path | None = None):
        super().__init__(message + (f" (diagnostics in {dump_path})" if dump_path else ""))
        self.dump = dump
        self.dump_path = dump_path


@dataclass
class TrainState:
    model: UNesT
    optimizer: torch.optim.AdamW
    rng: np.random.Generator
    cfg: TrainConfig
    iteration: int = 0
    best: dict | None = None  # {"iteration": int, "brain": float, ...}
    run_dir: Path | None = None

    @property
    def finetune(self) -> bool:
        return self.cfg.stage == "finetune"


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.base_lr, betas=cfg.adam_betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay
    )


def create_state(model_cfg: ModelConfig, cfg: TrainConfig, model: UNesT | None = None, run_dir=None) -> TrainState:
    """Fresh state; ``model`` (e.g. from ``load_pretrained_into_finetune``) overrides the seeded init."""
    if model is None:
        model_cfg = model_cfg.replace(icv_heads_enabled=cfg.stage == "finetune")
        model = build_model(model_cfg, seed=cfg.seed)
        if cfg.stage == "finetune":
            init_icv_heads(model, torch.Generator().manual_seed(cfg.seed))
    cfg.validate(model.cfg)
    return TrainState(model, make_optimizer(model, cfg), np.random.default_rng(cfg.seed), cfg, run_dir=Path(run_dir) if run_dir else None)


def _diagnostics(state: TrainState, batch: Batch, lr: float, breakdown: LossBreakdown) -> dict:
    params = {
        n: {"finite": bool(torch.isfinite(p).all()), "norm": float(p.detach().double().norm())}
        for n, p in state.model.named_parameters()
    }
    return {
        "iteration": state.iteration,
        "lr": lr,
        "loss": breakdown.to_dict(),
        "subjects": batch.subjects,
        "input": {
            "finite": bool(torch.isfinite(batch.image).all()),
            "min": float(batch.image.min()),
            "max": float(batch.image.max()),
        },
        "nonfinite_parameters": [n for n, v in params.items() if not v["finite"]],
        "parameter_norms": {n: v["norm"] for n, v in params.items()},
    }


def train_step(state: TrainState, batch: Batch) -> tuple[TrainState, LossBreakdown]:
    """One AdamW update. Iteration ``k`` (0-based) uses lr(k) and the betas for step ``k + 1``."""
    cfg = state.cfg
    if state.iteration >= cfg.total_iterations:
        raise ValueError(f"training already finished ({state.iteration}/{cfg.total_iterations})")
    lr = cfg.lr_at(state.iteration)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    out = state.model(batch.image, finetune_mode=state.finetune)
    loss, breakdown = composite_loss(
        out,
        batch.labels,
        batch.ticv,
        batch.pfv,
        cfg.loss_weights,
        state.iteration + 1,
        include_background=cfg.include_background,
        brain_only=not state.finetune,
    )
    if not torch.isfinite(loss):
        dump = _diagnostics(state, batch, lr, breakdown)
        path = None
        if state.run_dir is not None:
            path = state.run_dir / f"nonfinite_{state.iteration + 1}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(dump, indent=2))
        raise NonFiniteLoss(f"non-finite loss at iteration {state.iteration + 1}", dump, path)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return state, breakdown


# --------------------------------------------------------------------------- validation


def validate(state: TrainState, subjects: Sequence[TrainingSubject]) -> dict:
    """Full-volume sliding-window DSC per structure, averaged over subjects.

    ``brain`` is the mean over regions present in either map; ``brain_all``
    scores all 132 ids (absent ones count 1.0).
    """
    if not subjects:
        raise ValueError("validation set is empty")
    cfg = state.cfg
    predictor = model_predictor(state.model, finetune_mode=state.finetune)
    rows = []
    for s in subjects:
        plan = plan_windows(s.shape, cfg.crop_size, cfg.sw_overlap)
        res = segment_volume(s.volume(), predictor, plan, batch_size=cfg.sw_batch_size)
        regions = region_dsc(res.labels.data, s.labels)
        row = {"subject": s.id, "brain": regions.mean_present, "brain_all": regions.mean}
        if state.finetune and s.ticv is not None and s.pfv is not None:
            row["ticv"] = dsc(res.ticv.data, s.ticv)
            row["pfv"] = dsc(res.pfv.data, s.pfv)
        rows.append(row)
    keys = [k for k in ("brain", "brain_all", "ticv", "pfv") if all(k in r for r in rows)]
    return {**{k: float(np.mean([r[k] for r in rows])) for k in keys}, "subjects": rows}


# --------------------------------------------------------------------------- checkpoints


def save_state(state: TrainState, path, config_echo: dict | None = None) -> Path:
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    steps = {}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            steps[n] = float(st["step"])
            tensors[f"optim.{n}.exp_avg"] = st["exp_avg"]
            tensors[f"optim.{n}.exp_avg_sq"] = st["exp_avg_sq"]
    manifest = {
        "model_config": state.model.cfg.to_dict(),
        "train_config": state.cfg.to_dict(),
        "config_echo": config_echo or {},
        "iteration": state.iteration,
        "stage": state.cfg.stage,
        "skull_stripped": bool(state.cfg.skull_stripped),
        "extra": {
            "rng_state": state.rng.bit_generator.state,
            "best": state.best,
            "optimizer_steps": steps,
        },
    }
    return write_checkpoint(path, tensors, manifest)


def load_state(path, run_dir=None, cfg: TrainConfig | None = None) -> TrainState:
    """Rebuild model, optimizer moments, RNG and counters from ``save_state`` output."""
    tensors, manifest = read_checkpoint(path)
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    cfg = cfg or TrainConfig.from_dict(manifest["train_config"])
    model = UNesT(model_cfg)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")}, strict=True)
    cfg.validate(model_cfg)
    opt = make_optimizer(model, cfg)
    steps = manifest["extra"]["optimizer_steps"]
    for n, p in model.named_parameters():
        if n in steps:
            opt.state[p] = {
                "step": torch.tensor(steps[n], dtype=torch.float32),
                "exp_avg": tensors[f"optim.{n}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"optim.{n}.exp_avg_sq"].clone(),
            }
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["extra"]["rng_state"]
    return TrainState(model, opt, rng, cfg, manifest["iteration"], manifest["extra"]["best"], Path(run_dir) if run_dir else None)


# --------------------------------------------------------------------------- loop


class JsonlLog:
    def __init__(self, path: Path | None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a")

    def write(self, row: dict):
        self.rows.append(row)
        if self.path:
            self._fh.write(json.dumps(row) + "\n")
            self._fh.flush()

    def close(self):
        if self.path:
            self._fh.close()


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def fit(
    state: TrainState,
    train: Sequence[TrainingSubject],
    val: Sequence[TrainingSubject],
    run_dir=None,
    config_echo: dict | None = None,
    stop_at: int | None = None,
    on_validation: Callable[[dict], None] | None = None,
) -> TrainState:
    """Train until ``total_iterations`` (or ``stop_at``).

    Validation runs every ``validation_interval`` iterations and at the final
    iteration; the best mean brain DSC is checkpointed to ``run_dir/best`` and
    the final state to ``run_dir/last``. An empty ``val`` validates on ``train``
    (the single-subject overfit setting).
    """
    if not train:
        raise ValueError("training set is empty")
    cfg = state.cfg
    val = list(val) or list(train)
    run_dir = Path(run_dir) if run_dir else state.run_dir
    state.run_dir = run_dir
    log_file = JsonlLog(run_dir / "train_log.jsonl" if run_dir else None)
    end = min(cfg.total_iterations, stop_at if stop_at is not None else cfg.total_iterations)
    t0 = time.perf_counter()
    try:
        while state.iteration < end:
            batch = sample_batch(train, cfg, state.rng)
            lr = cfg.lr_at(state.iteration)
            state, br = train_step(state, batch)
            n = state.iteration
            log_file.write({"kind": "step", "iteration": n, "lr": lr, **br.to_dict()})
            if n % cfg.validation_interval == 0 or n == cfg.total_iterations:
                scores = validate(state, val)
                b1, b2 = beta_schedule(n, cfg.loss_weights)
                row = {"kind": "val", "iteration": n, "beta1": b1, "beta2": b2, "elapsed_s": time.perf_counter() - t0}
                row.update({k: v for k, v in scores.items() if k != "subjects"})
                log_file.write(row)
                log.info("iteration %d: %s", n, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
                if on_validation:
                    on_validation(row)
                if state.best is None or scores["brain"] > state.best["brain"]:
                    state.best = {k: v for k, v in row.items() if k != "kind"}
                    if run_dir:
                        save_state(state, run_dir / "best", config_echo)
        if run_dir:
            save_state(state, run_dir / "last", config_echo)
    finally:
        log_file.close()
    return state
