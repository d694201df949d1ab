"""Named experiment presets, their expansion into runs, and desk-scale rescaling.

Full-scale presets expect the real datasets and 110-epoch ResNet-50 runs. They
are documented configurations whose numbers should land near the published
tables but are not verified here. ``desk_scale`` maps any preset onto the mini
backbone and synthetic data while keeping its run structure.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .config import RunConfig, config_to_dict, validate_config
from .datasets import prepare_data
from .errors import ConfigurationError
from .model import strip_ssl_branches
from .reports import plot_average_bars, plot_flag_sweep, write_rows
from .training import branches_for, evaluate, method_name, train

REF_PREFIX = "@"


@dataclass(frozen=True)
class PresetRun:
    name: str
    config: RunConfig
    row: dict[str, str] = field(default_factory=dict)
    pretrain: bool = False

    @property
    def reference(self) -> str | None:
        return self.config.init[1:] if self.config.init.startswith(REF_PREFIX) else None


@dataclass(frozen=True)
class Preset:
    name: str
    anchor: str
    description: str
    columns: tuple[str, ...]
    metrics: dict[str, str]
    base: dict[str, Any]
    runs: tuple[dict[str, Any], ...] = ()
    pretrain: tuple[dict[str, Any], ...] = ()
    sweep: dict[str, Any] | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Preset":
        return cls(
            name=data["name"],
            anchor=data["anchor"],
            description=" ".join(str(data.get("description", "")).split()),
            columns=tuple(data["columns"]),
            metrics=dict(data["metrics"]),
            base=data["base"],
            runs=tuple(data.get("runs") or ()),
            pretrain=tuple(data.get("pretrain") or ()),
            sweep=data.get("sweep"),
        )

    def run_specs(self) -> list[dict[str, Any]]:
        """Raw run entries; a sweep block generates one entry per (task, flag)."""
        if self.sweep is None:
            return [dict(r) for r in self.runs]
        s = self.sweep
        specs = []
        for task in s["tasks"]:
            for flag in s["flags"]:
                branches = [b.model_dump() for b in branches_for(task, flag, s["grid_n"])]
                specs.append({
                    "name": f"{task}_flag{flag}",
                    "row": {"Method": method_name(task, s["grid_n"]), "Flag": str(flag)},
                    "set": {"mode": "hmtl", "model": {"ssl_branches": branches}},
                })
        if s.get("include_sl"):
            specs.append({
                "name": "sl",
                "row": {"Method": "SL", "Flag": "-"},
                "set": {"mode": "sl", "model": {"ssl_branches": []}},
            })
        return list(self.runs) + specs

    def expand(self) -> list[PresetRun]:
        """Pretraining runs first, then the table rows; every config validated."""
        out = []
        names = set()
        for spec, is_pre in [(p, True) for p in self.pretrain] + [(r, False) for r in self.run_specs()]:
            data = deep_merge(self.base, spec.get("set") or {})
            data["name"] = spec["name"]
            try:
                config = validate_config(data)
            except ConfigurationError as err:
                raise ConfigurationError(f"preset {self.name}, run {spec['name']}:\n{err}") from None
            if spec["name"] in names:
                raise ConfigurationError(f"preset {self.name}: duplicate run name {spec['name']}")
            names.add(spec["name"])
            out.append(PresetRun(spec["name"], config, dict(spec.get("row") or {}), is_pre))
        pre = {r.name for r in out if r.pretrain}
        for r in out:
            if r.reference and r.reference not in pre:
                raise ConfigurationError(f"preset {self.name}: run {r.name} refers to unknown pretraining {r.reference}")
        return out


def deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _preset_files():
    return sorted(
        (p for p in resources.files("hmtlpose").joinpath("preset_configs").iterdir() if p.name.endswith(".yaml")),
        key=lambda p: p.name,
    )


def list_presets() -> list[Preset]:
    return [Preset.from_dict(yaml.safe_load(p.read_text())) for p in _preset_files()]


def get_preset(name: str) -> Preset:
    for p in list_presets():
        if p.name == name:
            return p
    known = ", ".join(p.name for p in list_presets())
    raise ConfigurationError(f"unknown preset {name!r}; known presets: {known}")


def load_preset(path: str | Path) -> Preset:
    return Preset.from_dict(yaml.safe_load(Path(path).read_text()))


# -- desk scale -----------------------------------------------------------------------------


@dataclass(frozen=True)
class DeskBudget:
    """Resources for a scaled-down run."""

    epochs: int = 5
    images: int = 512
    val_images: int = 128
    input_size: int = 112
    mini_width: int = 16
    batch_size: int = 64
    projector_dim: int = 128
    max_steps: int | None = None  # total optimizer steps allowed per run

    def steps_per_epoch(self) -> int:
        return max(1, self.images // self.batch_size)


def scale_epochs(steps: list[int], old: int, new: int) -> list[int]:
    """Map decay epochs proportionally; collisions are pushed up to stay strictly increasing."""
    out: list[int] = []
    for s in steps:
        v = max(1, round(s * new / old))
        if out and v <= out[-1]:
            v = out[-1] + 1
        out.append(v)
    return out


def desk_scale_config(config: RunConfig, budget: DeskBudget) -> RunConfig:
    """Mini backbone, synthetic data and fewer epochs; losses, heads and branches untouched."""
    if budget.epochs < 1:
        raise ConfigurationError("budget allows no full epoch (epochs < 1)")
    if budget.max_steps is not None and budget.max_steps < budget.epochs * budget.steps_per_epoch():
        raise ConfigurationError(
            f"budget of {budget.max_steps} steps is below {budget.epochs} full epochs "
            f"of {budget.steps_per_epoch()} steps"
        )
    d = config_to_dict(config)
    old_epochs = d["epochs"]
    d["epochs"] = budget.epochs
    d["batch_size"] = min(d["batch_size"], budget.batch_size)
    sched = d["schedule"]
    sched["steps"] = scale_epochs(sched["steps"], old_epochs, budget.epochs)
    if sched["warmup_epochs"]:
        warm = max(1, round(sched["warmup_epochs"] * budget.epochs / old_epochs))
        sched["warmup_epochs"] = min(warm, budget.epochs - 1)
    model = d["model"]
    model.update(backbone="mini", mini_width=budget.mini_width, input_size=budget.input_size)
    if model["projector"] is not None:
        model["projector"]["dims"] = [budget.projector_dim] * len(model["projector"]["dims"])
    with_roll = "roll" in model["supervised"]["angles"]
    data = d["data"]
    held = len(data["held_out_subjects"])
    subjects = max(4, data["take_subjects"] or 0) + held
    synth = {
        "count": budget.images, "seed": config.seed, "subjects": subjects,
        "image_size": budget.input_size, "with_roll": with_roll,
    }
    data["train"] = _synthetic_spec(data["train"], synth)
    data["held_out_subjects"] = [f"s{subjects - held + i:03d}" for i in range(held)]
    if data["val"] is not None:
        val = dict(synth, count=budget.val_images, seed=config.seed + 1, subjects=1)
        data["val"] = _synthetic_spec(data["val"], val)
    if d["init"] == "imagenet":
        d["init"] = "random"  # no ImageNet weights for the mini backbone
    d["max_steps_per_epoch"] = None
    return validate_config(d)


def _synthetic_spec(spec: dict[str, Any], synth: dict[str, Any]) -> dict[str, Any]:
    # extreme-angle filtering stays on so the variant label keeps its meaning
    return {
        "kind": "synthetic", "synthetic": synth,
        "filter_extreme": spec["filter_extreme"], "extreme_threshold": spec["extreme_threshold"],
    }


def desk_scale(preset: Preset, budget: DeskBudget) -> list[PresetRun]:
    return [
        PresetRun(r.name, desk_scale_config(r.config, budget), r.row, r.pretrain)
        for r in preset.expand()
    ]


def catalog_rows() -> list[dict[str, Any]]:
    rows = []
    for p in list_presets():
        runs = p.expand()
        rows.append({
            "name": p.name,
            "anchor": p.anchor,
            "runs": sum(not r.pretrain for r in runs),
            "pretraining": sum(r.pretrain for r in runs),
            "columns": ", ".join(p.columns),
            "description": p.description,
        })
    return rows


def resolve_reference(run: PresetRun, out_dir: Path) -> RunConfig:
    """Point ``@name`` inits at the pretraining run's backbone checkpoint."""
    ref = run.reference
    if ref is None:
        return run.config
    ckpt = out_dir / ref / "checkpoints"
    path = ckpt / "backbone.pt" if (ckpt / "backbone.pt").exists() else ckpt / "last.pt"
    return run.config.model_copy(update={"init": str(path)})


def report_row(preset: Preset, run: PresetRun, metrics) -> dict[str, Any]:
    row = {c: run.row.get(c, "") for c in preset.columns if c not in preset.metrics.values()}
    for angle, column in preset.metrics.items():
        if metrics is None:
            row[column] = math.nan
        elif angle == "average":
            row[column] = metrics.average_mae
        else:
            row[column] = metrics.per_angle_mae.get(angle, math.nan)
    return {c: row.get(c, "") for c in preset.columns}


def run_preset(
    preset: Preset,
    runs: list[PresetRun],
    out_dir: str | Path,
    data_root: str | None = None,
    deterministic: bool = False,
) -> list[dict[str, Any]]:
    """Train every run in order and write ``report.csv`` plus a plot under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in runs:
        config = resolve_reference(run, out_dir)
        if deterministic:
            config = config.model_copy(update={"deterministic": True})
        train_data, val_data = prepare_data(config.data, data_root)
        record = train(config, train_data, val_data, out_dir / run.name)
        if run.pretrain:
            continue
        metrics = None
        if record.status == "completed":
            metrics = evaluate(strip_ssl_branches(record.model), val_data if val_data is not None else train_data)
        rows.append(report_row(preset, run, metrics))
    write_rows(rows, out_dir / "report.csv")
    if "Flag" in preset.columns:
        plot_flag_sweep(rows, out_dir / "report.png", average=preset.metrics["average"])
    else:
        plot_average_bars(rows, out_dir / "report.png", average=preset.metrics["average"])
    return rows
