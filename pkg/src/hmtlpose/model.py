"""Backbone with stage taps, supervised heads, SSL branches and BT encoder."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .config import ModelConfig, ProjectorSpec, SSLBranchSpec, SupervisedHeadSpec
from .errors import CheckpointIncompatibleError, ConfigurationError
from .geometry import expectation

STAGE_NAMES = ("stage1", "stage2", "stage3", "stage4")
RESNET50_CHANNELS = (256, 512, 1024, 2048)
CHECKPOINT_FORMAT = "hmtlpose-checkpoint/1"


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """Stem followed by four stages; ``forward`` returns every stage output."""

    def __init__(self, stem: nn.Module, stages: list[nn.Module], channels: tuple[int, ...]):
        super().__init__()
        self.stem = stem
        self.stages = nn.ModuleList(stages)
        self.channels = tuple(channels)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


def resnet50_backbone(weights: str | None = None) -> Backbone:
    net = torchvision.models.resnet50(weights=weights)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    return Backbone(stem, [net.layer1, net.layer2, net.layer3, net.layer4], RESNET50_CHANNELS)


def mini_backbone(width: int = 16) -> Backbone:
    """Width-reduced stand-in with the same stride pattern as ResNet50."""
    channels = tuple(width * m for m in (1, 2, 4, 8))
    stem = nn.Sequential(
        nn.Conv2d(3, width, 7, 2, 3, bias=False),
        nn.BatchNorm2d(width),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, 2, 1),
    )
    stages, cin = [], width
    for i, cout in enumerate(channels):
        stages.append(BasicBlock(cin, cout, stride=1 if i == 0 else 2))
        cin = cout
    return Backbone(stem, stages, channels)


def make_backbone(config: ModelConfig) -> Backbone:
    if config.backbone == "resnet50":
        return resnet50_backbone()
    return mini_backbone(config.mini_width)


class ResidualBranchBlock(nn.Module):
    """Three 3x3 conv + BN layers inside an identity skip; channel count preserved."""

    def __init__(self, channels: int):
        super().__init__()
        layers = []
        for i in range(3):
            layers += [nn.Conv2d(channels, channels, 3, 1, 1, bias=False), nn.BatchNorm2d(channels)]
            if i < 2:
                layers.append(nn.ReLU(inplace=True))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return F.relu(x + self.body(x))


class SSLBranch(nn.Module):
    def __init__(self, spec: SSLBranchSpec, channels: int):
        super().__init__()
        self.spec = spec
        self.block = ResidualBranchBlock(channels)
        self.dropout = nn.Dropout(spec.dropout)
        self.heads = nn.ModuleList(nn.Linear(channels, spec.classes) for _ in range(spec.grid_n ** 2))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        pooled = torch.flatten(F.adaptive_avg_pool2d(self.block(x), 1), 1)
        return [head(self.dropout(pooled)) for head in self.heads]


class SupervisedHeads(nn.Module):
    def __init__(self, spec: SupervisedHeadSpec, features: int):
        super().__init__()
        self.spec = spec
        self.dropout = nn.Dropout(spec.dropout)
        out = spec.bin_spec.count if spec.style == "bin_expectation" else 1
        self.heads = nn.ModuleDict({a: nn.Linear(features, out) for a in spec.angles})

    def forward(self, pooled: torch.Tensor) -> dict[str, torch.Tensor]:
        outputs = {}
        x = self.dropout(pooled)
        for angle, head in self.heads.items():
            y = head(x)
            if self.spec.style == "plain_regression":
                outputs[angle] = y.squeeze(-1)
            else:
                probs = torch.softmax(y, dim=-1)
                outputs[f"{angle}_logits"] = y
                outputs[f"{angle}_probs"] = probs
                outputs[angle] = expectation(probs, self.spec.bin_spec)
        return outputs


def _seeded(seed: int | None, offset: int, build):
    if seed is None:
        return build()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + offset)
        return build()


class HMTLNet(nn.Module):
    """Backbone + supervised heads, with SSL branches tapping a stage output.

    Output names: ``<angle>`` (degrees), ``<angle>_logits``/``<angle>_probs``
    for bin heads, ``<task>_region_<j>`` logits and ``<task>_region_<j>_probs``.
    """

    def __init__(self, config: ModelConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        self.backbone = _seeded(seed, 0, lambda: make_backbone(config))
        features = self.backbone.channels[-1]
        self.supervised = _seeded(seed, 1, lambda: SupervisedHeads(config.supervised, features))
        self.branches = nn.ModuleDict()
        for i, spec in enumerate(config.ssl_branches):
            channels = self.backbone.channels[spec.flag - 1]
            self.branches[spec.task] = _seeded(seed, 2 + i, lambda: SSLBranch(spec, channels))

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        taps = self.backbone(x)
        pooled = torch.flatten(F.adaptive_avg_pool2d(taps[-1], 1), 1)
        outputs = self.supervised(pooled)
        for task, branch in self.branches.items():
            for j, logits in enumerate(branch(taps[branch.spec.flag - 1])):
                outputs[f"{task}_region_{j}"] = logits
                outputs[f"{task}_region_{j}_probs"] = torch.softmax(logits, dim=-1)
        return outputs


def build_model(config: ModelConfig, seed: int | None = None) -> HMTLNet:
    if config.projector is not None and config.ssl_branches:
        raise ConfigurationError("a projector belongs to the BT encoder, not to an HMTL model")
    if config.backbone == "resnet50" and config.input_size % 32:
        raise ConfigurationError("resnet50 input size must be a multiple of 32")
    return HMTLNet(config, seed=seed)


def strip_ssl_branches(model: HMTLNet) -> HMTLNet:
    """Copy of ``model`` without SSL branches; supervised outputs are unchanged."""
    stripped = copy.deepcopy(model)
    stripped.branches = nn.ModuleDict()
    stripped.config = model.config.model_copy(update={"ssl_branches": []})
    return stripped


class Projector(nn.Sequential):
    def __init__(self, spec: ProjectorSpec, features: int):
        d1, d2, d3 = spec.dims
        super().__init__(
            nn.Linear(features, d1, bias=False),
            nn.BatchNorm1d(d1),
            nn.ReLU(inplace=True),
            nn.Linear(d1, d2, bias=False),
            nn.BatchNorm1d(d2),
            nn.ReLU(inplace=True),
            nn.Linear(d2, d3, bias=False),
        )


class BTEncoder(nn.Module):
    def __init__(self, config: ModelConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        self.backbone = _seeded(seed, 0, lambda: make_backbone(config))
        spec = config.projector or ProjectorSpec()
        self.projector = _seeded(seed, 1, lambda: Projector(spec, self.backbone.channels[-1]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.flatten(F.adaptive_avg_pool2d(self.backbone(x)[-1], 1), 1)
        return self.projector(pooled)


def build_bt_encoder(config: ModelConfig, seed: int | None = None) -> BTEncoder:
    if config.projector is None:
        raise ConfigurationError("the BT encoder needs model.projector")
    return BTEncoder(config, seed=seed)


def stage_shapes(config: ModelConfig) -> list[tuple[int, int, int]]:
    """(H, W, C) of each stage output, computed on the meta device."""
    with torch.device("meta"):
        backbone = make_backbone(config)
        taps = backbone(torch.empty(1, 3, config.input_size, config.input_size))
    return [(t.shape[2], t.shape[3], t.shape[1]) for t in taps]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_macs(model: nn.Module, input_size: int, batch: int = 1) -> int:
    """Multiply-accumulates of one forward pass (FLOP counter / 2)."""
    from torch.utils.flop_counter import FlopCounterMode

    was_training = model.training
    model.eval()
    counter = FlopCounterMode(display=False)
    with counter, torch.no_grad():
        model(torch.zeros(batch, 3, input_size, input_size))
    model.train(was_training)
    return counter.get_total_flops() // 2


# -- checkpoints ---------------------------------------------------------------------------


def _manifest(model: nn.Module, extra: dict[str, Any]) -> dict[str, Any]:
    state = model.state_dict()
    heads = []
    if isinstance(model, HMTLNet):
        heads = list(model.supervised.heads) + [
            f"{task}_region_{j}" for task, b in model.branches.items() for j in range(len(b.heads))
        ]
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": type(model).__name__,
        "backbone_stages": ["stem", *STAGE_NAMES],
        "heads": heads,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "model_config": model.config.model_dump(mode="json"),
        **extra,
    }


def save_checkpoint(path, model: nn.Module, backbone_only: bool = False, **metadata) -> Path:
    """Write ``{"manifest", "tensors"}``; metadata (mode, seed, epoch, ...) goes to the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    if backbone_only:
        tensors = {k: v for k, v in tensors.items() if k.startswith("backbone.")}
    manifest = _manifest(model, metadata)
    manifest["backbone_only"] = backbone_only
    manifest["shapes"] = {k: list(v.shape) for k, v in tensors.items()}
    torch.save({"manifest": manifest, "tensors": tensors}, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("manifest", {}).get("format") != CHECKPOINT_FORMAT:
        raise CheckpointIncompatibleError(f"{path} is not an hmtlpose checkpoint")
    return blob["manifest"], blob["tensors"]


def backbone_tensors(source) -> dict[str, torch.Tensor]:
    if isinstance(source, (str, Path)):
        _, tensors = load_checkpoint(source)
    elif isinstance(source, nn.Module):
        tensors = source.state_dict()
    else:
        tensors = source
    return {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}


def transfer_backbone_weights(source, target: nn.Module) -> nn.Module:
    """Copy backbone tensors exactly; heads and branches are left untouched."""
    incoming = backbone_tensors(source)
    own = target.backbone.state_dict()
    missing = sorted(set(own) - set(incoming))
    extra = sorted(set(incoming) - set(own))
    if missing or extra:
        raise CheckpointIncompatibleError(
            f"backbone structure differs: {len(missing)} missing tensors (e.g. {missing[:3]}), "
            f"{len(extra)} unexpected (e.g. {extra[:3]})"
        )
    bad = [k for k in own if own[k].shape != incoming[k].shape]
    if bad:
        k = bad[0]
        raise CheckpointIncompatibleError(
            f"backbone tensor {k} has shape {tuple(incoming[k].shape)}, target expects {tuple(own[k].shape)}"
        )
    target.backbone.load_state_dict(incoming, strict=True)
    return target


def apply_init(init: str, target: nn.Module) -> nn.Module:
    """Initialize the backbone from ``random`` (no-op), ``imagenet`` or a checkpoint path."""
    if init == "random":
        return target
    if init == "imagenet":
        if target.config.backbone != "resnet50":
            raise CheckpointIncompatibleError("ImageNet weights exist only for the resnet50 backbone")
        try:
            source = resnet50_backbone("IMAGENET1K_V1")
        except Exception as err:  # download or cache failure
            raise FileNotFoundError(f"cannot obtain torchvision ImageNet weights: {err}") from None
        target.backbone.load_state_dict(source.state_dict(), strict=True)
        return target
    return transfer_backbone_weights(init, target)


def model_from_checkpoint(path) -> tuple[HMTLNet, dict[str, Any]]:
    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "HMTLNet" or manifest.get("backbone_only"):
        raise CheckpointIncompatibleError(f"{path} does not hold a full pose model")
    model = build_model(ModelConfig.model_validate(manifest["model_config"]))
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as err:
        raise CheckpointIncompatibleError(str(err)) from None
    return model, manifest
