"""Run configuration: a flat text format with dotted keys, named presets,
and command-line overrides. A rendered snapshot fully determines a run."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .data import AugmentConfig, DatasetConfig, NoiseSpec
from .losses import LossWeights
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(Exception):
    """Invalid configuration; maps to exit code 2 at the CLI."""


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    loss: LossWeights
    augment: AugmentConfig


# key -> type tag; parsing and rendering both follow this table
SCHEMA: dict[str, str] = {
    "dataset.kind": "str",
    "dataset.n": "int",
    "dataset.classes": "int",
    "dataset.dim": "int",
    "dataset.separation": "float",
    "dataset.test_n": "int",
    "dataset.data_dir": "opt_str",
    "dataset.subset": "opt_int",
    "dataset.seed": "int",
    "dataset.noise.kind": "str",
    "dataset.noise.rate": "float",
    "dataset.noise.seed": "int",
    "dataset.noise.sidecar": "opt_str",
    "model.backbone": "str",
    "model.shallow_heads": "int",
    "model.feature_dim": "opt_int",
    "train.mode": "str",
    "train.epochs": "int",
    "train.warmup_epochs": "int",
    "train.batch_size": "int",
    "train.lr_init": "float",
    "train.t_max": "int",
    "train.eta_min": "float",
    "train.momentum": "float",
    "train.weight_decay": "float",
    "train.ema_decay": "float",
    "train.seed": "int",
    "train.noise_threshold": "float",
    "train.slack_lr_scale": "float",
    "loss.distill_kl": "float",
    "loss.distill_feature": "float",
    "loss.consistency": "float",
    "loss.class_balance": "float",
    "augment.jitter_sigma": "float",
    "augment.image_pad": "int",
    "augment.image_flip": "bool",
}

DEFAULTS: dict[str, str] = {
    "dataset.kind": "blobs",
    "dataset.n": "3000",
    "dataset.classes": "3",
    "dataset.dim": "8",
    "dataset.separation": "6.0",
    "dataset.test_n": "1000",
    "dataset.data_dir": "",
    "dataset.subset": "",
    "dataset.seed": "0",
    "dataset.noise.kind": "none",
    "dataset.noise.rate": "0.0",
    "dataset.noise.seed": "0",
    "dataset.noise.sidecar": "",
    "model.backbone": "tiny-mlp",
    "model.shallow_heads": "0",
    "model.feature_dim": "",
    "train.mode": "bidirectional",
    "train.epochs": "320",
    "train.warmup_epochs": "20",
    "train.batch_size": "256",
    "train.lr_init": "0.04",
    "train.t_max": "300",
    "train.eta_min": "0.0002",
    "train.momentum": "0.9",
    "train.weight_decay": "0.0005",
    "train.ema_decay": "0.999",
    "train.seed": "0",
    "train.noise_threshold": "0.3",
    "train.slack_lr_scale": "1.0",
    "loss.distill_kl": "0.1",
    "loss.distill_feature": "1e-06",
    "loss.consistency": "0.9",
    "loss.class_balance": "0.1",
    "augment.jitter_sigma": "0.1",
    "augment.image_pad": "4",
    "augment.image_flip": "true",
}

# Desk presets scale the full recipe down (60 epochs / 5 warm-up / t_max 55
# keep the 320 / 20 / 300 ratios) and shorten the EMA horizon to match.
PRESETS: dict[str, dict[str, str]] = {
    "desk_blobs": {
        "dataset.kind": "blobs",
        "dataset.n": "3000",
        "dataset.classes": "3",
        "dataset.dim": "8",
        "dataset.separation": "6.0",
        "dataset.test_n": "1000",
        "dataset.seed": "1",
        "dataset.noise.kind": "symmetric",
        "dataset.noise.rate": "0.4",
        "dataset.noise.seed": "1",
        "model.backbone": "tiny-mlp",
        "model.shallow_heads": "1",
        "train.epochs": "60",
        "train.warmup_epochs": "5",
        "train.t_max": "55",
        "train.ema_decay": "0.99",
        "train.seed": "1",
    },
    "desk_cifar_subset": {
        "dataset.kind": "cifar10",
        "dataset.classes": "10",
        "dataset.data_dir": "data/cifar-10-batches-bin",
        "dataset.subset": "5000",
        "dataset.seed": "1",
        "dataset.noise.kind": "sidecar",
        "dataset.noise.sidecar": "data/cifar10n_aggre.sidecar",
        "model.backbone": "small-cnn",
        "model.shallow_heads": "2",
        "train.epochs": "60",
        "train.warmup_epochs": "5",
        "train.t_max": "55",
        "train.ema_decay": "0.99",
        "train.seed": "1",
    },
    "paper_full": {
        "dataset.kind": "cifar10",
        "dataset.classes": "10",
        "dataset.data_dir": "data/cifar-10-batches-bin",
        "dataset.seed": "1",
        "dataset.noise.kind": "sidecar",
        "dataset.noise.sidecar": "data/cifar10n_worst.sidecar",
        "model.backbone": "preact-resnet34",
        "model.shallow_heads": "3",
        "train.seed": "1",
    },
}


def _parse_value(key: str, raw: str):
    kind = SCHEMA[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "opt_int":
            return int(raw) if raw else None
        if kind == "opt_str":
            return raw or None
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into a flat dict of raw strings."""
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        flat[key] = value.strip()
    return flat


def _resolve_override_key(key: str) -> str:
    """Full dotted key, or a unique trailing segment of one."""
    if key in SCHEMA:
        return key
    matches = [k for k in SCHEMA if k.endswith("." + key)]
    if len(matches) == 1:
        return matches[0]
    if matches:
        raise ConfigError(
            f"ambiguous config key {key!r}: could be {', '.join(sorted(matches))}")
    raise ConfigError(f"unknown config key {key!r}")


def apply_overrides(flat: dict[str, str], overrides) -> dict[str, str]:
    """Apply ``key=value`` strings from --set flags."""
    out = dict(flat)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[_resolve_override_key(key.strip())] = value.strip()
    return out


def set_seed(flat: dict[str, str], seed: int) -> dict[str, str]:
    """Route one --seed value to every seeded subsystem."""
    out = dict(flat)
    out["train.seed"] = str(seed)
    out["dataset.seed"] = str(seed)
    out["dataset.noise.seed"] = str(seed)
    return out


def build_run_config(flat: dict[str, str]) -> RunConfig:
    """Materialize the typed config, filling unset keys from defaults."""
    merged = dict(DEFAULTS)
    for key, value in flat.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    v = {key: _parse_value(key, raw) for key, raw in merged.items()}
    try:
        noise = NoiseSpec(kind=v["dataset.noise.kind"], rate=v["dataset.noise.rate"],
                          seed=v["dataset.noise.seed"],
                          sidecar_path=v["dataset.noise.sidecar"])
        dataset = DatasetConfig(
            kind=v["dataset.kind"], n=v["dataset.n"],
            num_classes=v["dataset.classes"], dim=v["dataset.dim"],
            separation=v["dataset.separation"], test_n=v["dataset.test_n"],
            data_dir=v["dataset.data_dir"], subset=v["dataset.subset"],
            seed=v["dataset.seed"], noise=noise)
        model = ModelConfig(
            backbone=v["model.backbone"], num_classes=dataset.num_classes,
            num_shallow_heads=v["model.shallow_heads"],
            feature_dim=v["model.feature_dim"],
            input_dim=dataset.dim if dataset.kind == "blobs" else None)
        train = TrainConfig(
            mode=v["train.mode"], epochs=v["train.epochs"],
            warmup_epochs=v["train.warmup_epochs"],
            batch_size=v["train.batch_size"], lr_init=v["train.lr_init"],
            t_max=v["train.t_max"], eta_min=v["train.eta_min"],
            momentum=v["train.momentum"], weight_decay=v["train.weight_decay"],
            ema_decay=v["train.ema_decay"], seed=v["train.seed"],
            noise_threshold=v["train.noise_threshold"],
            slack_lr_scale=v["train.slack_lr_scale"])
        loss = LossWeights(
            distill_kl=v["loss.distill_kl"],
            distill_feature=v["loss.distill_feature"],
            consistency=v["loss.consistency"],
            class_balance=v["loss.class_balance"])
        augment = AugmentConfig(
            jitter_sigma=v["augment.jitter_sigma"],
            image_pad=v["augment.image_pad"], image_flip=v["augment.image_flip"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if model.backbone == "tiny-mlp" and dataset.kind != "blobs":
        raise ConfigError("model.backbone: tiny-mlp only supports vector (blobs) data")
    if model.backbone != "tiny-mlp" and dataset.kind == "blobs":
        raise ConfigError(f"model.backbone: {model.backbone} needs image data")
    return RunConfig(dataset=dataset, model=model, train=train, loss=loss,
                     augment=augment)


def _render_value(key: str, value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_flat_dict(cfg: RunConfig) -> dict[str, str]:
    """Inverse of build_run_config over the schema keys."""
    d, m, t, lo, a = cfg.dataset, cfg.model, cfg.train, cfg.loss, cfg.augment
    values = {
        "dataset.kind": d.kind, "dataset.n": d.n,
        "dataset.classes": d.num_classes, "dataset.dim": d.dim,
        "dataset.separation": d.separation, "dataset.test_n": d.test_n,
        "dataset.data_dir": d.data_dir, "dataset.subset": d.subset,
        "dataset.seed": d.seed,
        "dataset.noise.kind": d.noise.kind, "dataset.noise.rate": d.noise.rate,
        "dataset.noise.seed": d.noise.seed,
        "dataset.noise.sidecar": d.noise.sidecar_path,
        "model.backbone": m.backbone,
        "model.shallow_heads": m.num_shallow_heads,
        "model.feature_dim": m.feature_dim,
        "train.mode": t.mode, "train.epochs": t.epochs,
        "train.warmup_epochs": t.warmup_epochs,
        "train.batch_size": t.batch_size, "train.lr_init": t.lr_init,
        "train.t_max": t.t_max, "train.eta_min": t.eta_min,
        "train.momentum": t.momentum, "train.weight_decay": t.weight_decay,
        "train.ema_decay": t.ema_decay, "train.seed": t.seed,
        "train.noise_threshold": t.noise_threshold,
        "train.slack_lr_scale": t.slack_lr_scale,
        "loss.distill_kl": lo.distill_kl,
        "loss.distill_feature": lo.distill_feature,
        "loss.consistency": lo.consistency,
        "loss.class_balance": lo.class_balance,
        "augment.jitter_sigma": a.jitter_sigma,
        "augment.image_pad": a.image_pad, "augment.image_flip": a.image_flip,
    }
    return {key: _render_value(key, values[key]) for key in SCHEMA}


def render_config(cfg: RunConfig) -> str:
    lines = [f"{key} = {value}" for key, value in to_flat_dict(cfg).items()]
    return "\n".join(lines) + "\n"


def resolve_config(name_or_path: str) -> dict[str, str]:
    """A preset name or a config file path, as a flat dict."""
    if name_or_path in PRESETS:
        return dict(PRESETS[name_or_path])
    path = Path(name_or_path)
    if path.exists():
        return parse_config_text(path.read_text())
    raise ConfigError(
        f"no preset or config file named {name_or_path!r} "
        f"(presets: {', '.join(sorted(PRESETS))})")


def load_run_config(name_or_path: str, seed: Optional[int] = None,
                    overrides=None) -> RunConfig:
    flat = resolve_config(name_or_path)
    if seed is not None:
        flat = set_seed(flat, seed)
    flat = apply_overrides(flat, overrides)
    return build_run_config(flat)
