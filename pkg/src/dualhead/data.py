"""Dataset construction: synthetic blobs, controlled label-noise injection,
noisy-label sidecar files, CIFAR binary loading, and the two-view
augmentation that feeds the consistency term."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np

from .core import Example

# Stream salts so different consumers of the same seed never alias.
_AUG_SALT = 0x41554
_BLOB_SALT = 0xB10B
_SYM_SALT = 0x5E71
_PAIR_SALT = 0x9A12

_CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR10_TEST_FILES = ["test_batch.bin"]


@dataclass(frozen=True)
class NoiseSpec:
    """How the noisy labels of a dataset are produced."""

    kind: str = "none"  # none | symmetric | pairflip | sidecar
    rate: float = 0.0
    seed: int = 0
    sidecar_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("none", "symmetric", "pairflip", "sidecar"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate out of [0, 1]: {self.rate}")
        if self.seed < 0:
            raise ValueError("noise seed must be non-negative")


@dataclass(frozen=True)
class AugmentConfig:
    """Two-view augmentation parameters.

    Vector data gets additive Gaussian jitter scaled per feature; image data
    gets pad-and-crop plus horizontal flip.
    """

    jitter_sigma: float = 0.1  # as a fraction of the per-feature std
    image_pad: int = 4
    image_flip: bool = True


@dataclass(frozen=True)
class Dataset:
    """Immutable sample container. ``clean_labels`` is evaluation-only."""

    features: np.ndarray
    noisy_labels: np.ndarray
    num_classes: int
    clean_labels: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        noisy = np.asarray(self.noisy_labels, dtype=np.int64)
        if feats.shape[0] != noisy.shape[0]:
            raise ValueError("features/labels length mismatch")
        if noisy.size and (noisy.min() < 0 or noisy.max() >= self.num_classes):
            raise ValueError("noisy label out of range")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "noisy_labels", noisy)
        if self.clean_labels is not None:
            clean = np.asarray(self.clean_labels, dtype=np.int64)
            if clean.shape != noisy.shape:
                raise ValueError("clean/noisy label shape mismatch")
            if clean.size and (clean.min() < 0 or clean.max() >= self.num_classes):
                raise ValueError("clean label out of range")
            object.__setattr__(self, "clean_labels", clean)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def is_image(self) -> bool:
        return self.features.ndim == 4

    @cached_property
    def feature_std(self) -> np.ndarray:
        """Per-feature std over the dataset (vector data only)."""
        return self.features.std(axis=0)

    def example(self, i: int) -> Example:
        clean = None if self.clean_labels is None else int(self.clean_labels[i])
        return Example(index=i, features=self.features[i],
                       noisy_label=int(self.noisy_labels[i]), clean_label=clean)

    def truth_noise_mask(self) -> Optional[np.ndarray]:
        """True where the given label disagrees with the clean one."""
        if self.clean_labels is None:
            return None
        return self.noisy_labels != self.clean_labels


def make_gaussian_blobs(n: int, num_classes: int, dim: int, separation: float,
                        seed: int) -> Dataset:
    """Balanced Gaussian blobs with class-k mean at separation * e_k and unit
    covariance. Noisy labels start out equal to the clean ones."""
    if num_classes < 2 or n < num_classes:
        raise ValueError(f"need n >= num_classes >= 2, got n={n}, c={num_classes}")
    if dim < num_classes:
        raise ValueError(
            f"dim must be >= num_classes for axis-aligned means, got {dim}")
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    rng = np.random.default_rng([_BLOB_SALT, seed])
    labels = np.arange(n, dtype=np.int64) % num_classes
    means = np.zeros((num_classes, dim))
    means[np.arange(num_classes), np.arange(num_classes)] = separation
    feats = means[labels] + rng.standard_normal((n, dim))
    return Dataset(features=feats.astype(np.float32), noisy_labels=labels.copy(),
                   clean_labels=labels, num_classes=num_classes, name="blobs")


def inject_symmetric_noise(dataset: Dataset, rate: float, seed: int) -> Dataset:
    """Independently flip each label with probability ``rate`` to a uniformly
    random different class. Features and clean labels are untouched."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate out of [0, 1]: {rate}")
    if dataset.clean_labels is None:
        raise ValueError("noise injection requires clean labels")
    rng = np.random.default_rng([_SYM_SALT, seed])
    n, c = len(dataset), dataset.num_classes
    flip = rng.random(n) < rate
    offsets = rng.integers(1, c, size=n)
    noisy = np.where(flip, (dataset.clean_labels + offsets) % c,
                     dataset.clean_labels)
    return replace(dataset, noisy_labels=noisy.astype(np.int64))


def inject_pairflip_noise(dataset: Dataset, rate: float, seed: int) -> Dataset:
    """With probability ``rate``, flip label k to (k + 1) mod c."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate out of [0, 1]: {rate}")
    if dataset.clean_labels is None:
        raise ValueError("noise injection requires clean labels")
    if dataset.num_classes < 2:
        raise ValueError("pairflip noise needs at least 2 classes")
    rng = np.random.default_rng([_PAIR_SALT, seed])
    flip = rng.random(len(dataset)) < rate
    noisy = np.where(flip, (dataset.clean_labels + 1) % dataset.num_classes,
                     dataset.clean_labels)
    return replace(dataset, noisy_labels=noisy.astype(np.int64))


def load_noisy_sidecar(dataset: Dataset, path: str) -> Dataset:
    """Replace noisy labels with the newline-delimited integers in ``path``
    (one per sample, dataset order)."""
    with open(path) as f:
        lines = f.read().splitlines()
    if len(lines) != len(dataset):
        raise ValueError(
            f"{path}: has {len(lines)} lines, dataset has {len(dataset)} samples")
    noisy = np.empty(len(dataset), dtype=np.int64)
    for i, line in enumerate(lines):
        try:
            label = int(line.strip())
        except ValueError:
            raise ValueError(f"{path}: line {i + 1}: not an integer: {line!r}") from None
        if not 0 <= label < dataset.num_classes:
            raise ValueError(
                f"{path}: line {i + 1}: label {label} out of range "
                f"[0, {dataset.num_classes})")
        noisy[i] = label
    return replace(dataset, noisy_labels=noisy)


def dump_sidecar(dataset: Dataset, path: str) -> None:
    """Write the noisy labels back out in sidecar format."""
    with open(path, "w") as f:
        for label in dataset.noisy_labels:
            f.write(f"{int(label)}\n")


def write_manifest(dataset: Dataset, path: str) -> None:
    """Audit export: index,clean_label(optional),noisy_label rows."""
    has_clean = dataset.clean_labels is not None
    with open(path, "w") as f:
        f.write("index,clean_label,noisy_label\n" if has_clean
                else "index,noisy_label\n")
        for i in range(len(dataset)):
            if has_clean:
                f.write(f"{i},{int(dataset.clean_labels[i])},{int(dataset.noisy_labels[i])}\n")
            else:
                f.write(f"{i},{int(dataset.noisy_labels[i])}\n")


def apply_noise(dataset: Dataset, spec: NoiseSpec) -> Dataset:
    if spec.kind == "none":
        return dataset
    if spec.kind == "symmetric":
        return inject_symmetric_noise(dataset, spec.rate, spec.seed)
    if spec.kind == "pairflip":
        return inject_pairflip_noise(dataset, spec.rate, spec.seed)
    if spec.sidecar_path is None:
        raise ValueError("sidecar noise requires sidecar_path")
    return load_noisy_sidecar(dataset, spec.sidecar_path)


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([_AUG_SALT, int(seed), int(epoch), int(index)])


def _augment_pair(features: np.ndarray, index: int, epoch: int, seed: int,
                  cfg: AugmentConfig, feature_std: Optional[np.ndarray]):
    if features.ndim == 1:
        if cfg.jitter_sigma == 0.0:
            return features.copy(), features.copy()
        std = feature_std if feature_std is not None else np.ones_like(features)
        rng = _sample_rng(seed, epoch, index)
        scale = (cfg.jitter_sigma * std).astype(features.dtype)
        v1 = features + rng.standard_normal(features.shape).astype(features.dtype) * scale
        v2 = features + rng.standard_normal(features.shape).astype(features.dtype) * scale
        return v1, v2
    if features.ndim == 3:
        rng = _sample_rng(seed, epoch, index)
        return (_augment_image(features, rng, cfg),
                _augment_image(features, rng, cfg))
    raise ValueError(f"unsupported feature rank {features.ndim}")


def _augment_image(chw: np.ndarray, rng: np.random.Generator,
                   cfg: AugmentConfig) -> np.ndarray:
    out = chw
    if cfg.image_pad > 0:
        p = cfg.image_pad
        padded = np.pad(out, ((0, 0), (p, p), (p, p)))
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        out = padded[:, top:top + chw.shape[1], left:left + chw.shape[2]]
    if cfg.image_flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def two_view_augment(example: Example, epoch: int, seed: int,
                     cfg: AugmentConfig,
                     feature_std: Optional[np.ndarray] = None):
    """Two independently augmented views of one sample, deterministic per
    (example.index, epoch, seed)."""
    return _augment_pair(example.features, example.index, epoch, seed, cfg,
                         feature_std)


def augment_batch(dataset: Dataset, indices: np.ndarray, epoch: int, seed: int,
                  cfg: AugmentConfig):
    """Stacked two-view augmentation for a batch of sample indices."""
    std = None if dataset.is_image else dataset.feature_std
    views1, views2 = [], []
    for i in indices:
        v1, v2 = _augment_pair(dataset.features[i], int(i), epoch, seed, cfg, std)
        views1.append(v1)
        views2.append(v2)
    return np.stack(views1), np.stack(views2)


def _read_cifar_bin(path: str, label_bytes: int):
    record = label_bytes + 3072
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record != 0:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of {record}")
    raw = raw.reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)  # fine label is last
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return labels, images


def _load_cifar_split(data_dir: str, files: list[str], label_bytes: int,
                      num_classes: int, name: str) -> Dataset:
    labels_parts, image_parts = [], []
    for fname in files:
        path = os.path.join(data_dir, fname)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing CIFAR batch file: {path}")
        labels, images = _read_cifar_bin(path, label_bytes)
        labels_parts.append(labels)
        image_parts.append(images)
    labels = np.concatenate(labels_parts)
    images = np.concatenate(image_parts)
    return Dataset(features=images, noisy_labels=labels.copy(),
                   clean_labels=labels, num_classes=num_classes, name=name)


def load_cifar10(data_dir: str) -> tuple[Dataset, Dataset]:
    """Standard CIFAR-10 binary batches (1 label byte + 3072 pixel bytes)."""
    train = _load_cifar_split(data_dir, _CIFAR10_TRAIN_FILES, 1, 10, "cifar10")
    test = _load_cifar_split(data_dir, _CIFAR10_TEST_FILES, 1, 10, "cifar10-test")
    return train, test


def load_cifar100(data_dir: str) -> tuple[Dataset, Dataset]:
    """CIFAR-100 binary layout (coarse byte + fine byte + 3072 pixel bytes);
    fine labels are used."""
    train = _load_cifar_split(data_dir, ["train.bin"], 2, 100, "cifar100")
    test = _load_cifar_split(data_dir, ["test.bin"], 2, 100, "cifar100-test")
    return train, test


@dataclass(frozen=True)
class DatasetConfig:
    """What data a run trains on, including its noise."""

    kind: str = "blobs"  # blobs | cifar10 | cifar100
    n: int = 3000
    num_classes: int = 3
    dim: int = 8
    separation: float = 6.0
    test_n: int = 1000
    data_dir: Optional[str] = None
    subset: Optional[int] = None
    seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.kind not in ("blobs", "cifar10", "cifar100"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.seed < 0:
            raise ValueError("dataset seed must be non-negative")


def build_dataset(cfg: DatasetConfig) -> tuple[Dataset, Optional[Dataset]]:
    """Construct the (train, test) pair a config describes and apply its
    noise spec to the train split."""
    if cfg.kind == "blobs":
        train = make_gaussian_blobs(cfg.n, cfg.num_classes, cfg.dim,
                                    cfg.separation, cfg.seed)
        test = None
        if cfg.test_n > 0:
            test = make_gaussian_blobs(cfg.test_n, cfg.num_classes, cfg.dim,
                                       cfg.separation, cfg.seed + 1)
    else:
        if cfg.data_dir is None:
            raise ValueError(f"{cfg.kind} requires data_dir")
        loader = load_cifar10 if cfg.kind == "cifar10" else load_cifar100
        train, test = loader(cfg.data_dir)
        if cfg.subset is not None:
            train = Dataset(features=train.features[:cfg.subset],
                            noisy_labels=train.noisy_labels[:cfg.subset],
                            clean_labels=train.clean_labels[:cfg.subset],
                            num_classes=train.num_classes, name=train.name)
    return apply_noise(train, cfg.noise), test
