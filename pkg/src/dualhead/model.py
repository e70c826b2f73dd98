"""Two-head network: a shared backbone feeding a positively-trained head and
a negatively-trained head, plus optional shallow self-distillation heads
attached to intermediate stages. Includes EMA parameter averaging and
checkpoint I/O."""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .core import softmax as np_softmax

BACKBONES = ("tiny-mlp", "small-cnn", "preact-resnet34")


@dataclass
class ModelConfig:
    backbone: str = "tiny-mlp"
    num_classes: int = 3
    num_shallow_heads: int = 0
    feature_dim: Optional[int] = None  # derived from the backbone when None
    input_dim: Optional[int] = None    # vector width, tiny-mlp only
    in_channels: int = 3               # image channels, conv backbones

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.num_shallow_heads < 0:
            raise ValueError("num_shallow_heads must be >= 0")


@dataclass
class HeadOutputs:
    """Per-batch forward results: logits of both heads, pre-softmax shallow
    head logits, adapter-projected shallow features, and the shared deep
    feature both heads consume."""

    positive_logits: torch.Tensor
    negative_logits: torch.Tensor
    shallow_logits: list = field(default_factory=list)
    shallow_features: list = field(default_factory=list)
    deep_feature: torch.Tensor = None


class TinyMlpBackbone(nn.Module):
    """Two hidden layers of 64 units; the second activation is the shared
    representation."""

    def __init__(self, input_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(input_dim, 64)
        self.fc2 = nn.Linear(64, 64)
        self.input_dim = input_dim
        self.feature_dim = 64
        self.stage_dims = [64]  # attachable intermediate stages

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"expected [n, {self.input_dim}] input, got {tuple(x.shape)}")
        s1 = torch.relu(self.fc1(x))
        deep = torch.relu(self.fc2(s1))
        return [s1], deep


class SmallCnnBackbone(nn.Module):
    """Three conv blocks for 32x32 images; global average pooling on top."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        def block(c_in, c_out):
            return nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, padding=1),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            )
        self.block1 = block(in_channels, 32)
        self.block2 = block(32, 64)
        self.block3 = block(64, 128)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.in_channels = in_channels
        self.feature_dim = 128
        self.stage_dims = [32, 64]

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected [n, {self.in_channels}, h, w] input, got {tuple(x.shape)}")
        s1 = self.block1(x)
        s2 = self.block2(s1)
        s3 = self.block3(s2)
        deep = self.pool(s3).flatten(1)
        return [s1, s2], deep


class PreActBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)

    def forward(self, x):
        out = torch.relu(self.bn1(x))
        residual = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(torch.relu(self.bn2(out)))
        return out + residual


class PreActResNet34Backbone(nn.Module):
    """Pre-activation ResNet-34 for 32x32 inputs with stage taps for the
    shallow heads."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 64, 3, padding=1, bias=False)
        widths = (64, 128, 256, 512)
        depths = (3, 4, 6, 3)
        strides = (1, 2, 2, 2)
        stages = []
        c_in = 64
        for width, depth, stride in zip(widths, depths, strides):
            blocks = [PreActBlock(c_in, width, stride)]
            blocks += [PreActBlock(width, width) for _ in range(depth - 1)]
            stages.append(nn.Sequential(*blocks))
            c_in = width
        self.stages = nn.ModuleList(stages)
        self.bn_final = nn.BatchNorm2d(512)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.in_channels = in_channels
        self.feature_dim = 512
        self.stage_dims = [64, 128, 256]

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected [n, {self.in_channels}, h, w] input, got {tuple(x.shape)}")
        out = self.conv1(x)
        taps = []
        for i, stage in enumerate(self.stages):
            out = stage(out)
            if i < 3:
                taps.append(out)
        deep = self.pool(torch.relu(self.bn_final(out))).flatten(1)
        return taps, deep


class StageAdapter(nn.Module):
    """Projects one intermediate stage onto the deep feature's shape
    (pool + single linear for conv stages, single linear for vector ones)."""

    def __init__(self, stage_dim: int, feature_dim: int, conv: bool):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1) if conv else None
        self.proj = nn.Linear(stage_dim, feature_dim)

    def forward(self, x):
        if self.pool is not None:
            x = self.pool(x).flatten(1)
        return self.proj(x)


def _make_backbone(cfg: ModelConfig) -> nn.Module:
    if cfg.backbone == "tiny-mlp":
        if cfg.input_dim is None:
            raise ValueError("tiny-mlp requires input_dim")
        return TinyMlpBackbone(cfg.input_dim)
    if cfg.backbone == "small-cnn":
        return SmallCnnBackbone(cfg.in_channels)
    return PreActResNet34Backbone(cfg.in_channels)


class TwoHeadNet(nn.Module):
    """Shared backbone with a positive head and a negative head (single
    fully connected layers on the same representation) plus ``t`` shallow
    classification heads, each behind a feature adapter."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = _make_backbone(cfg)
        feature_dim = self.backbone.feature_dim
        if cfg.feature_dim is not None and cfg.feature_dim != feature_dim:
            raise ValueError(
                f"{cfg.backbone} has feature_dim {feature_dim}, "
                f"config asks for {cfg.feature_dim}")
        available = len(self.backbone.stage_dims)
        if cfg.num_shallow_heads > available:
            raise ValueError(
                f"{cfg.backbone} supports at most {available} shallow heads, "
                f"config asks for {cfg.num_shallow_heads}")
        self.feature_dim = feature_dim
        self.positive_head = nn.Linear(feature_dim, cfg.num_classes)
        self.negative_head = nn.Linear(feature_dim, cfg.num_classes)
        conv = cfg.backbone != "tiny-mlp"
        t = cfg.num_shallow_heads
        self.shallow_adapters = nn.ModuleList(
            StageAdapter(self.backbone.stage_dims[j], feature_dim, conv)
            for j in range(t))
        self.shallow_heads = nn.ModuleList(
            nn.Linear(feature_dim, cfg.num_classes) for _ in range(t))

    def forward(self, x: torch.Tensor) -> HeadOutputs:
        taps, deep = self.backbone(x)
        shallow_feats = [adapter(taps[j])
                         for j, adapter in enumerate(self.shallow_adapters)]
        shallow_logits = [head(f) for head, f in zip(self.shallow_heads, shallow_feats)]
        return HeadOutputs(
            positive_logits=self.positive_head(deep),
            negative_logits=self.negative_head(deep),
            shallow_logits=shallow_logits,
            shallow_features=shallow_feats,
            deep_feature=deep,
        )


def build_model(cfg: ModelConfig, seed: int) -> TwoHeadNet:
    """Deterministically initialized network for a given seed."""
    torch.manual_seed(seed)
    return TwoHeadNet(cfg)


class EmaState:
    """Exponential moving average of model parameters (single writer)."""

    def __init__(self, shadow: "OrderedDict[str, torch.Tensor]", decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {decay}")
        self.shadow = shadow
        self.decay = decay

    @classmethod
    def from_model(cls, model: nn.Module, decay: float) -> "EmaState":
        shadow = OrderedDict(
            (name, p.detach().clone()) for name, p in model.named_parameters())
        return cls(shadow, decay)

    @torch.no_grad()
    def update(self, model: nn.Module) -> "EmaState":
        """shadow <- decay * shadow + (1 - decay) * params, element-wise."""
        for name, p in model.named_parameters():
            s = self.shadow.get(name)
            if s is None or s.shape != p.shape:
                raise ValueError(f"shadow/parameter mismatch for {name!r}")
            s.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)
        return self

    @torch.no_grad()
    def module_with_shadow(self, model: nn.Module) -> nn.Module:
        """A copy of ``model`` carrying the averaged parameters (buffers stay
        at their live values), ready for evaluation."""
        averaged = copy.deepcopy(model)
        for name, p in averaged.named_parameters():
            p.copy_(self.shadow[name])
        averaged.eval()
        return averaged

    def state_dict(self) -> dict:
        return {"decay": self.decay,
                "shadow": OrderedDict((k, v.clone()) for k, v in self.shadow.items())}

    @classmethod
    def from_state_dict(cls, state: dict) -> "EmaState":
        return cls(OrderedDict((k, v.clone()) for k, v in state["shadow"].items()),
                   state["decay"])


def ema_update(ema: EmaState, model: nn.Module) -> EmaState:
    return ema.update(model)


@torch.no_grad()
def predict_probs(model: nn.Module, features: np.ndarray,
                  batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Full-dataset inference: positive and negative head probabilities as
    float64 arrays, reduced in index order."""
    model.eval()
    pos_parts, neg_parts = [], []
    n = features.shape[0]
    for start in range(0, n, batch_size):
        x = torch.from_numpy(features[start:start + batch_size])
        out = model(x)
        pos_parts.append(out.positive_logits.numpy())
        neg_parts.append(out.negative_logits.numpy())
    pos = np_softmax(np.concatenate(pos_parts), axis=1)
    neg = np_softmax(np.concatenate(neg_parts), axis=1)
    return pos, neg


CHECKPOINT_FORMAT = "dualhead-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, payload: dict) -> None:
    """Self-describing checkpoint container; round-trips bit-exactly."""
    record = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    record.update(payload)
    torch.save(record, path)


def load_checkpoint(path) -> dict:
    record = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(record, dict) or record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a recognized checkpoint file")
    return record
