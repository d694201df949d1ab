"""Run configuration schema (YAML on disk, pydantic in memory).

Unknown keys are rejected everywhere.  ``load_config`` returns a validated
``RunConfig``; ``dump_config`` writes it back losslessly.
"""

from __future__ import annotations

import os
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError
from .geometry import ANGLES, BinSpec

DATA_ROOT_ENV = "HMTL_DATA_ROOT"

Mode = Literal["sl", "hmtl", "hmtl_wo_sshs", "bt_pretrain", "linear_eval", "fine_tune"]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


def _split_csv(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


class SupervisedHeadSpec(Strict):
    style: Literal["plain_regression", "bin_expectation"] = "bin_expectation"
    angles: list[Literal["yaw", "pitch", "roll"]] = Field(default_factory=lambda: list(ANGLES))
    bin_width: float = Field(3.0, gt=0)
    bin_min: float = -99.0
    bin_max: float = 99.0
    dropout: float = Field(0.5, ge=0, lt=1)

    _split = field_validator("angles", mode="before")(_split_csv)

    @field_validator("angles")
    @classmethod
    def _unique_angles(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("angles must be a non-empty list without repeats")
        return [a for a in ANGLES if a in v]

    @property
    def bin_spec(self) -> BinSpec:
        return BinSpec(self.bin_min, self.bin_max, self.bin_width)


class SSLBranchSpec(Strict):
    task: Literal["puzzle", "rotation"]
    grid_n: int = Field(2, ge=2)
    flag: int = Field(3, ge=1, le=4)
    dropout: float = Field(0.2, ge=0, lt=1)

    @property
    def classes(self) -> int:
        return self.grid_n * self.grid_n if self.task == "puzzle" else 4


class ProjectorSpec(Strict):
    dims: list[int] = Field(default_factory=lambda: [2048, 2048, 2048])

    @field_validator("dims")
    @classmethod
    def _three_layers(cls, v):
        if len(v) != 3 or min(v) < 1:
            raise ValueError("projector needs three positive layer widths")
        return v


class ModelConfig(Strict):
    backbone: Literal["resnet50", "mini"] = "resnet50"
    mini_width: int = Field(16, ge=1)
    input_size: int = Field(224, ge=32)
    supervised: SupervisedHeadSpec = Field(default_factory=SupervisedHeadSpec)
    ssl_branches: list[SSLBranchSpec] = Field(default_factory=list)
    projector: ProjectorSpec | None = None

    @model_validator(mode="after")
    def _branches_consistent(self):
        tasks = [b.task for b in self.ssl_branches]
        if len(set(tasks)) != len(tasks):
            raise ValueError("at most one SSL branch per task")
        if len({(b.flag, b.grid_n) for b in self.ssl_branches}) > 1:
            raise ValueError("puzzle and rotation branches must share flag point and grid size")
        return self

    @property
    def pretext_task(self) -> str | None:
        tasks = {b.task for b in self.ssl_branches}
        if tasks == {"puzzle", "rotation"}:
            return "puzzle_rotation"
        return tasks.pop() if tasks else None

    @property
    def grid_n(self) -> int | None:
        return self.ssl_branches[0].grid_n if self.ssl_branches else None


class SyntheticSpec(Strict):
    count: int = Field(512, ge=1)
    seed: int = 0
    subjects: int = Field(4, ge=1)
    image_size: int = Field(224, ge=32)
    yaw_range: tuple[float, float] = (-60.0, 60.0)
    pitch_range: tuple[float, float] = (-40.0, 40.0)
    roll_range: tuple[float, float] = (-30.0, 30.0)
    with_roll: bool = True


class DataSpec(Strict):
    kind: Literal["w300lp", "aflw2000", "biwi", "ethxgaze", "manifest", "synthetic"] = "synthetic"
    root: str | None = None
    manifest: str | None = None
    synthetic: SyntheticSpec | None = None
    filter_extreme: bool = False
    extreme_threshold: float = 99.0
    limit: int | None = Field(None, ge=1)
    crop_margin: float | None = Field(None, ge=0)


class DataConfig(Strict):
    train: DataSpec = Field(default_factory=lambda: DataSpec(synthetic=SyntheticSpec()))
    val: DataSpec | None = None
    held_out_subjects: list[str] = Field(default_factory=list)
    take_subjects: int | None = Field(None, ge=1)

    _split = field_validator("held_out_subjects", mode="before")(
        lambda v: [str(x) for x in _split_csv(v)] if isinstance(v, (str, list)) else v
    )


class BTViewSettings(Strict):
    p_color_jitter: float = Field(0.8, ge=0, le=1)
    p_grayscale: float = Field(0.3, ge=0, le=1)
    p_blur: float = Field(0.2, ge=0, le=1)
    p_resize: float = Field(0.2, ge=0, le=1)
    jitter_strength: float = Field(0.4, ge=0)
    crop_scale: tuple[float, float] = (0.6, 1.0)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    downscale_range: tuple[float, float] = (0.25, 1.0)
    cutout_range: tuple[float, float] = (0.1, 0.3)
    puzzling_variant: bool = False
    puzzle_grid: int = Field(3, ge=2)


class AugmentationConfig(Strict):
    enabled: bool = True
    level: Literal[1, 2] = 1
    zoom_range: tuple[float, float] = (0.85, 1.0)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    p_blur: float = Field(0.3, ge=0, le=1)
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    p_downscale: float = Field(0.3, ge=0, le=1)
    downscale_range: tuple[float, float] = (0.25, 1.0)
    p_cutout: float = Field(0.5, ge=0, le=1)
    cutout_range: tuple[float, float] = (0.1, 0.3)
    p_hue: float = Field(0.0, ge=0, le=1)
    hue_shift: float = 0.05
    p_brightness: float = Field(0.0, ge=0, le=1)
    brightness_range: tuple[float, float] = (0.8, 1.2)
    p_noise: float = Field(0.0, ge=0, le=1)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    # pretext perturbation of training batches (hmtl and hmtl_wo_sshs)
    pretext_probability: float = Field(1.0, ge=0, le=1)
    pretext_task: Literal["puzzle", "rotation", "puzzle_rotation"] | None = None
    pretext_grid: int | None = Field(None, ge=2)
    bt: BTViewSettings = Field(default_factory=BTViewSettings)

    def level_config(self):
        from .augment import AugmentConfig

        fields = self.model_dump(exclude={"enabled", "pretext_probability", "pretext_task", "pretext_grid", "bt"})
        return AugmentConfig(**fields)

    def bt_config(self, output_size: int):
        from .augment import BTViewConfig

        return BTViewConfig(output_size=output_size, **self.bt.model_dump())


class LossConfig(Strict):
    mode: Literal["eq1", "eq2", "eq3", "bt"] = "eq2"
    alpha: float = Field(2.0, gt=0)
    ssl_scale: float = Field(50.0, gt=0)
    bt_lambda: float = Field(5e-3, gt=0)

    @property
    def weights(self):
        from .losses import LossWeights

        return LossWeights(self.alpha, self.ssl_scale, self.bt_lambda)


class ScheduleConfig(Strict):
    kind: Literal["step_decay", "cosine"] = "step_decay"
    steps: list[int] = Field(default_factory=lambda: [20, 100])
    factor: float = Field(0.1, gt=0)
    warmup_epochs: int = Field(0, ge=0)

    @field_validator("steps", mode="before")
    @classmethod
    def _parse_steps(cls, v):
        return [int(x) for x in _split_csv(v)] if isinstance(v, str) else v

    @field_validator("steps")
    @classmethod
    def _increasing(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"step epochs must be strictly increasing, got {v}")
        return v


class OptimizerConfig(Strict):
    name: Literal["adabelief", "adam", "sgd"] = "adabelief"
    lr: float = Field(1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-16, gt=0)
    weight_decay: float = Field(0.0, ge=0)


class OutputConfig(Strict):
    dir: str = "runs/run"
    save_checkpoints: bool = True
    plot: bool = True


class SweepConfig(Strict):
    tasks: list[Literal["puzzle", "rotation", "puzzle_rotation"]] = Field(
        default_factory=lambda: ["puzzle_rotation", "rotation", "puzzle"]
    )
    flags: list[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    grid_n: int = Field(2, ge=2)
    include_sl: bool = False

    _split = field_validator("tasks", "flags", mode="before")(_split_csv)

    @field_validator("flags")
    @classmethod
    def _valid_flags(cls, v):
        if not v or any(int(f) not in (1, 2, 3, 4) for f in v):
            raise ValueError("flags must be drawn from 1..4")
        return [int(f) for f in v]


class RunConfig(Strict):
    name: str = "run"
    mode: Mode = "sl"
    seed: int = 0
    epochs: int = Field(110, ge=1)
    batch_size: int = Field(64, ge=1)
    init: str = "random"
    mixed_precision: bool = False
    deterministic: bool = False
    eval_train: bool = False
    max_steps_per_epoch: int | None = Field(None, ge=1)
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    sweep: SweepConfig | None = None

    @model_validator(mode="after")
    def _mode_consistent(self):
        style = self.model.supervised.style
        if self.mode == "hmtl" and not self.model.ssl_branches:
            raise ValueError("mode hmtl needs at least one SSL branch (model.ssl_branches)")
        if self.mode in ("sl", "hmtl_wo_sshs") and self.model.ssl_branches:
            raise ValueError(f"mode {self.mode} trains without SSL branches; remove model.ssl_branches")
        if self.mode == "bt_pretrain":
            if self.loss.mode != "bt":
                raise ValueError("bt_pretrain needs loss.mode: bt")
            if self.batch_size < 2:
                raise ValueError("bt_pretrain needs batch_size >= 2 for batch statistics")
            if self.model.projector is None:
                raise ValueError("bt_pretrain needs model.projector")
        elif self.loss.mode == "bt":
            raise ValueError(f"loss.mode bt is only valid with mode bt_pretrain, not {self.mode}")
        elif self.loss.mode == "eq2" and style != "bin_expectation":
            raise ValueError("loss.mode eq2 needs model.supervised.style: bin_expectation")
        elif self.loss.mode in ("eq1", "eq3") and style != "plain_regression":
            raise ValueError(f"loss.mode {self.loss.mode} needs model.supervised.style: plain_regression")
        if self.loss.mode == "eq3" and any(b.task == "rotation" for b in self.model.ssl_branches):
            raise ValueError("loss.mode eq3 covers puzzle branches only")
        if self.mode == "hmtl_wo_sshs" and not self.augmentation.pretext_task:
            raise ValueError("mode hmtl_wo_sshs needs augmentation.pretext_task")
        if self.mode == "fine_tune" and self.init == "random":
            raise ValueError("mode fine_tune needs init: <checkpoint path>")
        if self.schedule.warmup_epochs >= self.epochs:
            raise ValueError("schedule.warmup_epochs must be smaller than epochs")
        return self


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        key = ".".join(str(p) for p in e["loc"]) or "<root>"
        if e["type"] == "extra_forbidden":
            lines.append(f"{key}: unknown key")
        else:
            lines.append(f"{key}: {e['msg']}")
    return "\n".join(lines)


def validate_config(data: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigurationError(_format_errors(err)) from None


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    return key.strip().split("."), value


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    data = dict(data)
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
            elif not isinstance(child, dict):
                raise ConfigurationError(f"{'.'.join(path)}: {part} is not a section")
            node[part] = dict(child)
            node = node[part]
        node[path[-1]] = value
    return data


def named_configs() -> list[str]:
    """Run configs shipped with the package, usable in place of a file path."""
    folder = resources.files("hmtlpose").joinpath("run_configs")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".yaml"))


def read_config_data(source: str | os.PathLike) -> dict[str, Any]:
    """Raw mapping from a YAML file, or from a named config when no such file exists."""
    path = Path(source)
    if not path.exists() and str(source) in named_configs():
        text = resources.files("hmtlpose").joinpath("run_configs").joinpath(f"{source}.yaml").read_text()
    else:
        try:
            text = path.read_text()
        except OSError as err:
            known = ", ".join(named_configs())
            raise FileNotFoundError(f"cannot read config {source}: {err.strerror} (named configs: {known})") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigurationError(f"{source}: not valid YAML ({err})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    return data


def load_config(source: str | os.PathLike | None, overrides: list[str] = ()) -> RunConfig:
    data = read_config_data(source) if source is not None else {}
    return validate_config(apply_overrides(data, list(overrides)))


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    return config.model_dump(mode="json")


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def resolve_data_root(spec: DataSpec, cli_root: str | None = None) -> DataSpec:
    """Data root precedence: ``--data-root`` flag, then environment, then the file."""
    if spec.kind == "synthetic":
        return spec
    root = cli_root or os.environ.get(DATA_ROOT_ENV) or spec.root
    return spec.model_copy(update={"root": root})
