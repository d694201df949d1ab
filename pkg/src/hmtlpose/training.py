"""Training loops, LR schedules, evaluation and the flag-point sweep."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import augment, bt_view_pair
from .config import RunConfig, SSLBranchSpec, ScheduleConfig, config_to_dict, dump_config
from .datasets import DatasetHandle, PoseSample
from .errors import ConfigurationError, InvalidInputError, TrainingDiverged
from .geometry import BinSpec, Metrics, expectation, mean_absolute_error
from .losses import LossBreakdown, barlow_twins_loss, total_loss
from .model import apply_init, build_bt_encoder, build_model, save_checkpoint, strip_ssl_branches
from .pretext import TileGrid, sample_pretext

log = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

TASK_LABELS = {"puzzle": "puzzling", "rotation": "rotation", "puzzle_rotation": "puzzling-rotation"}


def lr_at(schedule: ScheduleConfig, epoch: int, base_lr: float, epochs: int | None = None) -> float:
    """Learning rate for ``epoch`` (0-based): linear warmup, then step or cosine decay."""
    warm = schedule.warmup_epochs
    if epoch < warm:
        return base_lr * epoch / warm
    if schedule.kind == "step_decay":
        return base_lr * schedule.factor ** sum(epoch >= s for s in schedule.steps)
    if epochs is None:
        raise InvalidInputError("cosine schedule needs the total epoch count")
    span = max(epochs - warm, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - warm) / span))


def make_optimizer(config: RunConfig, params) -> torch.optim.Optimizer:
    opt = config.optimizer
    if opt.name == "adabelief":
        from adabelief_pytorch import AdaBelief

        # the package prints its change log on construction
        with contextlib.redirect_stdout(io.StringIO()):
            return AdaBelief(
                params, lr=opt.lr, betas=opt.betas, eps=opt.eps, weight_decay=opt.weight_decay,
                print_change_log=False,
            )
    if opt.name == "adam":
        return torch.optim.Adam(params, lr=opt.lr, betas=opt.betas, eps=opt.eps, weight_decay=opt.weight_decay)
    return torch.optim.SGD(params, lr=opt.lr, momentum=opt.betas[0], weight_decay=opt.weight_decay)


# -- batches --------------------------------------------------------------------------------


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    x = np.stack(images).astype(np.float32) / 255.0
    x = (x - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


class ImageSource:
    """Decodes and resizes samples to the model input size, caching small datasets."""

    def __init__(self, data: DatasetHandle, size: int, cache_limit: int = 20000):
        self.data = data
        self.size = size
        self.cache: dict[int, np.ndarray] | None = {} if len(data) <= cache_limit else None

    def __call__(self, i: int) -> np.ndarray:
        if self.cache is not None and i in self.cache:
            return self.cache[i]
        import cv2

        img = self.data[i].load()
        if img.shape[:2] != (self.size, self.size):
            img = cv2.resize(img, (self.size, self.size), interpolation=cv2.INTER_AREA)
        if self.cache is not None:
            self.cache[i] = img
        return img


def pretext_plan(config: RunConfig) -> tuple[str, int] | None:
    """(task, grid) used to perturb training images, or None."""
    if config.mode == "hmtl" or (config.mode in ("linear_eval", "fine_tune") and config.model.ssl_branches):
        return config.model.pretext_task, config.model.grid_n
    if config.mode == "hmtl_wo_sshs":
        return config.augmentation.pretext_task, config.augmentation.pretext_grid or 2
    return None


def sample_rngs(seed: int, epoch: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent per-sample streams for augmentation and pretext perturbation."""
    aug, pre = np.random.SeedSequence([seed, epoch, index]).spawn(2)
    return np.random.default_rng(aug), np.random.default_rng(pre)


def training_batch(
    source: ImageSource,
    indices: Sequence[int],
    config: RunConfig,
    epoch: int,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    plan = pretext_plan(config)
    level = config.augmentation.level_config() if config.augmentation.enabled else None
    images, puzzles, rotations = [], [], []
    for i in indices:
        rng_aug, rng_pre = sample_rngs(config.seed, epoch, int(i))
        img = source(int(i))
        if level is not None:
            img = augment(img, level, rng_aug)
        if plan is not None:
            task, n = plan
            grid = TileGrid(n)
            if rng_pre.random() < config.augmentation.pretext_probability:
                s = sample_pretext(rng_pre, task, grid, img)
                img = s.image
                puzzles.append(s.puzzle_labels if s.puzzle_labels is not None else np.arange(grid.regions))
                rotations.append(s.rotation_labels if s.rotation_labels is not None else np.zeros(grid.regions))
            else:
                puzzles.append(np.arange(grid.regions))
                rotations.append(np.zeros(grid.regions))
        images.append(img)
    targets = {}
    samples = [source.data[int(i)] for i in indices]
    for angle in samples[0].pose.angle_names:
        targets[angle] = torch.tensor([getattr(s.pose, angle) for s in samples], dtype=torch.float32)
    if plan is not None:
        targets["puzzle"] = torch.as_tensor(np.stack(puzzles), dtype=torch.long)
        targets["rotation"] = torch.as_tensor(np.stack(rotations), dtype=torch.long)
    return to_tensor(images), targets


def bt_batch(source: ImageSource, indices, config: RunConfig, epoch: int):
    view_cfg = config.augmentation.bt_config(config.model.input_size)
    va, vb = [], []
    for i in indices:
        rng, _ = sample_rngs(config.seed, epoch, int(i))
        a, b = bt_view_pair(source(int(i)), view_cfg, rng)
        va.append(a)
        vb.append(b)
    return to_tensor(va), to_tensor(vb)


def batches(n: int, batch_size: int, seed: int, epoch: int, max_steps: int | None = None):
    order = np.random.default_rng([seed, epoch, 7]).permutation(n)
    out = [order[k:k + batch_size] for k in range(0, n, batch_size)]
    out = [b for b in out if len(b) >= 2]  # batch norm needs two samples
    return out[:max_steps] if max_steps else out


# -- evaluation -----------------------------------------------------------------------------


class LabelOracle:
    """Predictor that returns the ground truth; used to check the metric path."""

    def __call__(self, samples: Sequence[PoseSample]) -> dict[str, np.ndarray]:
        names = samples[0].pose.angle_names
        return {a: np.array([getattr(s.pose, a) for s in samples]) for a in names}


@torch.no_grad()
def predict(model: nn.Module, data: DatasetHandle, batch_size: int = 64, bin_spec: BinSpec | None = None):
    """Decoded angle predictions (degrees) for every sample, clean inputs only."""
    if isinstance(model, nn.Module):
        size = model.config.input_size
        source = ImageSource(data, size)
        angles = list(model.config.supervised.angles)
        spec = bin_spec or model.config.supervised.bin_spec
        model.eval()
        cols: dict[str, list] = {a: [] for a in angles}
        for k in range(0, len(data), batch_size):
            idx = range(k, min(k + batch_size, len(data)))
            out = model(to_tensor([source(i) for i in idx]))
            for a in angles:
                value = expectation(out[f"{a}_probs"], spec) if f"{a}_probs" in out else out[a]
                cols[a].append(value.double().cpu().numpy())
        return {a: np.concatenate(v) for a, v in cols.items()}
    preds: dict[str, list] = {}
    for k in range(0, len(data), batch_size):
        for a, v in model(data.samples[k:k + batch_size]).items():
            preds.setdefault(a, []).append(np.asarray(v, dtype=np.float64))
    return {a: np.concatenate(v) for a, v in preds.items()}


def evaluate(
    model: nn.Module | Callable,
    data: DatasetHandle,
    bin_spec: BinSpec | None = None,
    batch_size: int = 64,
) -> Metrics:
    """Per-angle MAE; bin heads are decoded by expectation, no pretext perturbation."""
    if not len(data):
        raise InvalidInputError("cannot evaluate on an empty dataset")
    if isinstance(model, nn.Module):
        model_angles = set(model.config.supervised.angles)
        if model_angles != set(data.angle_set):
            raise InvalidInputError(
                f"model predicts {sorted(model_angles)} but the data is labelled with {sorted(data.angle_set)}"
            )
    return mean_absolute_error(predict(model, data, batch_size, bin_spec), data.labels())


# -- runs -----------------------------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict[str, Any]
    seed: int
    run_dir: Path | None = None
    steps: list[dict[str, float]] = field(default_factory=list)
    epochs: list[dict[str, Any]] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    status: str = "running"
    diagnostic: str | None = None
    pipeline: list[str] = field(default_factory=list)
    model: nn.Module | None = field(default=None, repr=False)

    @property
    def final_metrics(self) -> dict[str, Any] | None:
        return self.epochs[-1] if self.epochs else None

    def summary(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "seed": self.seed,
            "diagnostic": self.diagnostic,
            "checkpoints": self.checkpoints,
            "pipeline": self.pipeline,
            "final": self.final_metrics,
            "steps": len(self.steps),
        }


class _CsvLog:
    """Append-only CSV whose header is fixed by the first row."""

    def __init__(self, path: Path | None):
        self.path = path
        self.fields: list[str] | None = None

    def write(self, row: dict[str, Any]):
        if self.path is None:
            return
        if self.fields is None:
            self.fields = list(row)
            with self.path.open("w", newline="") as f:
                csv.DictWriter(f, self.fields).writeheader()
        with self.path.open("a", newline="") as f:
            csv.DictWriter(f, self.fields, extrasaction="ignore").writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _set_determinism(config: RunConfig):
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def _metrics_row(prefix: str, m: Metrics) -> dict[str, float]:
    row = {f"{prefix}_{k}": v for k, v in m.per_angle_mae.items()}
    row[f"{prefix}_average"] = m.average_mae
    row[f"{prefix}_n"] = m.count
    return row


def train(
    config: RunConfig,
    train_data: DatasetHandle,
    val_data: DatasetHandle | None = None,
    run_dir: str | Path | None = None,
) -> RunRecord:
    """Run one training job; writes the run directory when ``run_dir`` is given."""
    if not len(train_data):
        raise InvalidInputError("training data is empty")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(dump_config(config))
    record = RunRecord(config=config_to_dict(config), seed=config.seed, run_dir=run_dir)
    _set_determinism(config)
    if config.mode == "bt_pretrain":
        return _train_bt(config, train_data, record)
    return _train_pose(config, train_data, val_data, record)


def _check_angles(config: RunConfig, data: DatasetHandle):
    missing = set(config.model.supervised.angles) - set(data.angle_set)
    if missing:
        raise ConfigurationError(f"model.supervised.angles needs labels the data lacks: {sorted(missing)}")


def _train_pose(config: RunConfig, train_data, val_data, record: RunRecord) -> RunRecord:
    _check_angles(config, train_data)
    model = build_model(config.model, seed=config.seed)
    apply_init(config.init, model)
    frozen = config.mode == "linear_eval"
    if frozen:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    optimizer = make_optimizer(config, [p for p in model.parameters() if p.requires_grad])
    torch.manual_seed(config.seed + 1)  # dropout stream
    source = ImageSource(train_data, config.model.input_size)
    bin_spec = config.model.supervised.bin_spec
    angles = tuple(config.model.supervised.angles)
    weights = config.loss.weights
    plan = pretext_plan(config)
    record.pipeline = ["augment" if config.augmentation.enabled else "none"]
    if plan:
        record.pipeline.append(f"pretext:{plan[0]}:{plan[1]}x{plan[1]}")

    run_dir = record.run_dir
    step_log = _CsvLog(run_dir / "losses.csv" if run_dir else None)
    epoch_log = _CsvLog(run_dir / "metrics.csv" if run_dir else None)
    best = math.inf
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, epoch, config.optimizer.lr, config.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        if frozen:
            model.backbone.eval()
        t0 = time.perf_counter()
        epoch_losses = []
        for idx in batches(len(train_data), config.batch_size, config.seed, epoch, config.max_steps_per_epoch):
            x, targets = training_batch(source, idx, config, epoch)
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=config.mixed_precision):
                outputs = model(x)
            outputs = {k: v.float() for k, v in outputs.items()}
            breakdown = total_loss(config.loss.mode, outputs, targets, weights, bin_spec, angles)
            row = {"step": step, "epoch": epoch, **breakdown.as_record(), "lr": lr}
            if not torch.isfinite(breakdown.total):
                record.status = "aborted"
                record.diagnostic = f"non-finite loss at step {step} (epoch {epoch}): {row}"
                _write_diagnostic(record)
                log.error(record.diagnostic)
                record.model = model
                return record
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            optimizer.step()
            record.steps.append(row)
            step_log.write(row)
            epoch_losses.append(row["total"])
            step += 1
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan")}
        if config.eval_train:
            row.update(_metrics_row("train", evaluate(model, train_data.subset(range(len(train_data))))))
        if val_data is not None and len(val_data):
            val = evaluate(model, val_data)
            row.update(_metrics_row("val", val))
        row["seconds"] = round(time.perf_counter() - t0, 3)
        record.epochs.append(row)
        epoch_log.write(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
        score = row.get("val_average", row.get("train_average", row["train_loss"]))
        if run_dir is not None and config.output.save_checkpoints:
            meta = {"mode": config.mode, "seed": config.seed, "epoch": epoch, "metrics": row}
            record.checkpoints["last"] = str(save_checkpoint(run_dir / "checkpoints" / "last.pt", model, **meta))
            if score < best:
                record.checkpoints["best"] = str(save_checkpoint(run_dir / "checkpoints" / "best.pt", model, **meta))
        best = min(best, score)
    record.status = "completed"
    record.model = model
    _finish(record)
    return record


def _train_bt(config: RunConfig, train_data, record: RunRecord) -> RunRecord:
    if len(train_data) < 2:
        raise ConfigurationError("Barlow Twins pretraining needs at least two images")
    encoder = build_bt_encoder(config.model, seed=config.seed)
    apply_init(config.init, encoder)
    optimizer = make_optimizer(config, encoder.parameters())
    source = ImageSource(train_data, config.model.input_size)
    record.pipeline = config.augmentation.bt_config(config.model.input_size).stages()
    run_dir = record.run_dir
    step_log = _CsvLog(run_dir / "losses.csv" if run_dir else None)
    epoch_log = _CsvLog(run_dir / "metrics.csv" if run_dir else None)
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, epoch, config.optimizer.lr, config.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        encoder.train()
        losses = []
        for idx in batches(len(train_data), config.batch_size, config.seed, epoch, config.max_steps_per_epoch):
            va, vb = bt_batch(source, idx, config, epoch)
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=config.mixed_precision):
                za, zb = encoder(va), encoder(vb)
            loss = barlow_twins_loss(za.float(), zb.float(), config.loss.bt_lambda)
            row = {"step": step, "epoch": epoch, "barlow_twins": float(loss.detach()), "total": float(loss.detach()), "lr": lr}
            if not torch.isfinite(loss):
                record.status = "aborted"
                record.diagnostic = f"non-finite loss at step {step} (epoch {epoch})"
                _write_diagnostic(record)
                record.model = encoder
                return record
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            record.steps.append(row)
            step_log.write(row)
            losses.append(row["total"])
            step += 1
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        record.epochs.append(row)
        epoch_log.write(row)
        if run_dir is not None and config.output.save_checkpoints:
            meta = {"mode": config.mode, "seed": config.seed, "epoch": epoch, "pipeline": record.pipeline}
            record.checkpoints["last"] = str(save_checkpoint(run_dir / "checkpoints" / "last.pt", encoder, **meta))
            record.checkpoints["backbone"] = str(
                save_checkpoint(run_dir / "checkpoints" / "backbone.pt", encoder, backbone_only=True, **meta)
            )
    record.status = "completed"
    record.model = encoder
    _finish(record)
    return record


def _write_diagnostic(record: RunRecord):
    if record.run_dir is not None:
        (record.run_dir / "diagnostic.json").write_text(json.dumps(record.summary(), indent=2, default=str))


def _finish(record: RunRecord):
    if record.run_dir is None:
        return
    (record.run_dir / "summary.json").write_text(json.dumps(record.summary(), indent=2, default=str))
    if record.config["output"]["plot"] and record.epochs:
        from .reports import plot_curves

        plot_curves(record.epochs, record.run_dir / "curves.png")


def run_training(config: RunConfig, train_data, val_data=None, run_dir=None, raise_on_abort=False) -> RunRecord:
    record = train(config, train_data, val_data, run_dir)
    if raise_on_abort and record.status == "aborted":
        raise TrainingDiverged(record.diagnostic)
    return record


# -- flag sweep -----------------------------------------------------------------------------


def branches_for(task: str, flag: int, grid_n: int, dropout: float = 0.2) -> list[SSLBranchSpec]:
    tasks = ("puzzle", "rotation") if task == "puzzle_rotation" else (task,)
    return [SSLBranchSpec(task=t, grid_n=grid_n, flag=flag, dropout=dropout) for t in tasks]


def method_name(task: str | None, grid_n: int, suffix: str = "") -> str:
    if task is None:
        return "SL" + suffix
    return f"HMTL {TASK_LABELS[task]} {grid_n}×{grid_n}{suffix}"


def flag_sweep(
    base: RunConfig,
    train_data: DatasetHandle,
    val_data: DatasetHandle,
    flags: Sequence[int] = (1, 2, 3, 4),
    tasks: Sequence[str] = ("puzzle_rotation", "rotation", "puzzle"),
    grid_n: int = 2,
    out_dir: str | Path | None = None,
    include_sl: bool = False,
) -> list[dict[str, Any]]:
    """One HMTL run per (task, flag) with the base seed; rows follow the Table-1 columns."""
    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    dropout = base.model.ssl_branches[0].dropout if base.model.ssl_branches else 0.2
    for task in tasks:
        for flag in flags:
            model = base.model.model_copy(update={"ssl_branches": branches_for(task, flag, grid_n, dropout)})
            cfg = base.model_copy(update={"mode": "hmtl", "model": model, "name": f"{task}_flag{flag}"})
            cfg = RunConfig.model_validate(cfg.model_dump())
            rec = train(cfg, train_data, val_data, out_dir / cfg.name if out_dir else None)
            rows.append(_sweep_row(method_name(task, grid_n), flag, rec, val_data))
    if include_sl:
        cfg = base.model_copy(update={"mode": "sl", "model": base.model.model_copy(update={"ssl_branches": []}), "name": "sl"})
        cfg = RunConfig.model_validate(cfg.model_dump())
        rec = train(cfg, train_data, val_data, out_dir / "sl" if out_dir else None)
        rows.append(_sweep_row("SL", "-", rec, val_data))
    return rows


def _sweep_row(method: str, flag, record: RunRecord, val_data) -> dict[str, Any]:
    if record.status != "completed":
        nan = float("nan")
        return {"Method": method, "Flag": flag, "Yaw (MAE)": nan, "Pitch (MAE)": nan, "Average": nan}
    m = evaluate(strip_ssl_branches(record.model), val_data)
    return {
        "Method": method,
        "Flag": flag,
        "Yaw (MAE)": m.per_angle_mae["yaw"],
        "Pitch (MAE)": m.per_angle_mae["pitch"],
        "Average": m.average_mae,
    }
