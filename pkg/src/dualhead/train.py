"""End-to-end training: warm-up, per-epoch weight refresh driven by the
negative head, cosine learning-rate schedule, EMA averaging, artifact
persistence, and checkpoint resume."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses, reweight
from .core import WeightTable
from .data import AugmentConfig, Dataset, augment_batch
from .detect import classify_noise
from .losses import LossWeights, NoiseSlack
from .model import (EmaState, TwoHeadNet, build_model, load_checkpoint,
                    predict_probs, save_checkpoint)

_BATCH_SALT = 0xBA7C
_COMP_SALT = 0xC0317
_SLACK_SALT = 0x51AC

MODES = ("bidirectional", "positive_only", "negative_only")

METRICS_COLUMNS = ["epoch", "loss_total", "loss_pl", "loss_nl", "loss_sd",
                   "train_acc", "test_acc", "r_est", "beta", "lr", "seconds"]

CHECKPOINT_LAST = "checkpoint_last"
CHECKPOINT_FINAL = "checkpoint_final"
CONFIG_SNAPSHOT = "config_snapshot"


@dataclass
class TrainConfig:
    """Optimization schedule. Defaults follow the full-scale recipe; the
    desk presets scale epochs/t_max down while preserving their ratios."""

    epochs: int = 320
    warmup_epochs: int = 20
    batch_size: int = 256
    lr_init: float = 0.04
    t_max: int = 300
    eta_min: float = 2e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    seed: int = 0
    noise_threshold: float = 0.3
    mode: str = "bidirectional"
    slack_lr_scale: float = 1.0

    def __post_init__(self):
        # epochs == warmup_epochs is the degenerate pure warm-up schedule
        if self.epochs < 1 or self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValueError(
                f"need 0 <= warmup_epochs <= epochs and epochs >= 1, "
                f"got warmup_epochs={self.warmup_epochs}, epochs={self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        # lr 0 is allowed so frozen-parameter runs stay expressible
        if self.lr_init < 0 or self.eta_min < 0 or self.eta_min > self.lr_init:
            raise ValueError("need 0 <= eta_min <= lr_init")
        if self.t_max < 1:
            raise ValueError("t_max must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 0.0 < self.noise_threshold < 1.0:
            raise ValueError("noise_threshold must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class EpochReport:
    epoch: int
    loss_total: float
    loss_pl: float
    loss_nl: float
    loss_sd: float
    train_acc: float
    test_acc: Optional[float]
    r_est: float
    beta: float
    lr: float
    seconds: float
    clean_train_acc: Optional[float] = None
    weights_min: float = 1.0
    weights_max: float = 1.0
    weights_mean: float = 1.0


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_init to eta_min over t_max epochs, clamped at
    eta_min afterwards."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    progress = min(epoch, cfg.t_max) / cfg.t_max
    return cfg.eta_min + (cfg.lr_init - cfg.eta_min) * (1 + math.cos(math.pi * progress)) / 2


@dataclass
class TrainState:
    model: TwoHeadNet
    ema: EmaState
    optimizer: torch.optim.Optimizer
    slack: Optional[NoiseSlack]
    weights: WeightTable
    corrected: Optional[np.ndarray]
    noise_ratio: float = 0.0
    sop_weight: float = 0.0
    epoch_done: int = 0
    reports: list = field(default_factory=list)
    last_pos_probs: Optional[np.ndarray] = None
    last_neg_probs: Optional[np.ndarray] = None


@dataclass
class RunArtifacts:
    run_dir: Optional[Path]
    reports: list
    pos_probs: np.ndarray
    neg_probs: np.ndarray
    weights: WeightTable
    corrected: Optional[np.ndarray]
    noise_mask: np.ndarray
    completed: bool
    paths: dict = field(default_factory=dict)


def _build_state(run_cfg, dataset: Dataset) -> TrainState:
    cfg: TrainConfig = run_cfg.train
    model = build_model(run_cfg.model, cfg.seed)
    slack = None
    groups = [{"params": list(model.parameters()),
               "lr": cfg.lr_init, "weight_decay": cfg.weight_decay}]
    if cfg.mode == "bidirectional":
        gen = torch.Generator().manual_seed(cfg.seed ^ _SLACK_SALT)
        slack = NoiseSlack(len(dataset), dataset.num_classes, generator=gen)
        # slack variables carry no weight decay: decaying them would erase
        # the learned noise model even when its gradient vanishes
        groups.append({"params": list(slack.parameters()),
                       "lr": cfg.lr_init * cfg.slack_lr_scale,
                       "weight_decay": 0.0})
    optimizer = torch.optim.SGD(groups, lr=cfg.lr_init, momentum=cfg.momentum)
    return TrainState(
        model=model,
        ema=EmaState.from_model(model, cfg.ema_decay),
        optimizer=optimizer,
        slack=slack,
        weights=WeightTable.ones(len(dataset)),
        corrected=None,
    )


def _set_lr(state: TrainState, cfg: TrainConfig, lr: float) -> None:
    state.optimizer.param_groups[0]["lr"] = lr
    if len(state.optimizer.param_groups) > 1:
        state.optimizer.param_groups[1]["lr"] = lr * cfg.slack_lr_scale


def _eval_model(state: TrainState) -> torch.nn.Module:
    return state.ema.module_with_shadow(state.model)


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def train_epoch(state: TrainState, dataset: Dataset, run_cfg, epoch: int,
                test_set: Optional[Dataset] = None) -> EpochReport:
    """One pass over the data: forward both heads and the shallow heads,
    draw one complementary label per sample, take one SGD step and one EMA
    update per mini-batch. Deterministic for a fixed seed."""
    cfg: TrainConfig = run_cfg.train
    lw: LossWeights = replace(run_cfg.loss, sop=state.sop_weight)
    aug: AugmentConfig = run_cfg.augment
    n = len(dataset)
    if len(state.weights) != n:
        raise ValueError(
            f"weight table covers {len(state.weights)} samples, dataset has {n}")
    started = time.perf_counter()

    lr = cosine_lr(epoch, cfg)
    _set_lr(state, cfg, lr)
    model = state.model
    model.train()
    num_classes = dataset.num_classes
    noisy = dataset.noisy_labels
    perm = np.random.default_rng([_BATCH_SALT, cfg.seed, epoch]).permutation(n)
    comp_rng = np.random.default_rng([_COMP_SALT, cfg.seed, epoch])
    use_consistency = cfg.mode == "bidirectional" and lw.consistency > 0

    sums = {"pl": 0.0, "nl": 0.0, "sd": 0.0}
    for start in range(0, n, cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        bs = idx.size
        labels = torch.from_numpy(noisy[idx])
        view1, view2 = augment_batch(dataset, idx, epoch, cfg.seed, aug)
        x1 = torch.from_numpy(view1)
        out = model(x1)

        loss_pl = x1.new_zeros(())
        loss_nl = x1.new_zeros(())
        loss_sd = x1.new_zeros(())

        if cfg.mode != "positive_only":
            corrected = state.corrected
            comp = np.empty(bs, dtype=np.int64)
            for row, i in enumerate(idx):
                fixed = None if corrected is None else int(corrected[i])
                comp[row] = reweight.sample_complementary(
                    int(noisy[i]), fixed, num_classes, comp_rng)
            p_neg = torch.softmax(out.negative_logits, dim=1)
            loss_nl = losses.negative_loss(p_neg, torch.from_numpy(comp)).mean()

        if cfg.mode != "negative_only":
            p_pos = torch.softmax(out.positive_logits, dim=1)
            w = torch.from_numpy(
                state.weights.gather(idx).astype(np.float32))
            ce = losses.cross_entropy(p_pos, labels)
            loss_pl = losses.weighted_mean(ce, w)
            if cfg.mode == "bidirectional":
                onehot = torch.nn.functional.one_hot(labels, num_classes).float()
                sop = state.slack(torch.from_numpy(idx), p_pos, onehot)
                loss_pl = loss_pl + lw.sop * losses.weighted_mean(sop, w)
                if use_consistency:
                    out2 = model(torch.from_numpy(view2))
                    p_pos2 = torch.softmax(out2.positive_logits, dim=1)
                    loss_pl = loss_pl + lw.consistency * \
                        losses.consistency_loss(p_pos, p_pos2).mean()
                if lw.class_balance > 0:
                    loss_pl = loss_pl + lw.class_balance * \
                        losses.class_balance_loss(p_pos)
                if out.shallow_logits:
                    shallow_probs = [torch.softmax(l, dim=1)
                                     for l in out.shallow_logits]
                    sd_ce, sd_kl, sd_l2 = losses.self_distillation_terms(
                        shallow_probs, labels, p_pos,
                        out.shallow_features, out.deep_feature)
                    loss_sd = losses.weighted_mean(sd_ce, w) \
                        + lw.distill_kl * sd_kl.mean() \
                        + lw.distill_feature * sd_l2.mean()

        loss = losses.total_loss(loss_pl, loss_nl, loss_sd)
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        if state.slack is not None:
            state.slack.project_()
        state.ema.update(model)

        sums["pl"] += float(loss_pl.detach()) * bs
        sums["nl"] += float(loss_nl.detach()) * bs
        sums["sd"] += float(loss_sd.detach()) * bs

    # end-of-epoch inference with the averaged model; also feeds the next
    # epoch's weight refresh
    averaged = _eval_model(state)
    pos_probs, neg_probs = predict_probs(averaged, dataset.features)
    state.last_pos_probs, state.last_neg_probs = pos_probs, neg_probs
    acc_probs = neg_probs if cfg.mode == "negative_only" else pos_probs
    train_acc = _accuracy(acc_probs, noisy)
    clean_acc = None
    if dataset.clean_labels is not None:
        clean_acc = _accuracy(acc_probs, dataset.clean_labels)
    test_acc = None
    if test_set is not None:
        t_pos, t_neg = predict_probs(averaged, test_set.features)
        t_probs = t_neg if cfg.mode == "negative_only" else t_pos
        t_labels = (test_set.clean_labels if test_set.clean_labels is not None
                    else test_set.noisy_labels)
        test_acc = _accuracy(t_probs, t_labels)

    mean = {k: v / n for k, v in sums.items()}
    w = state.weights.weights
    return EpochReport(
        epoch=epoch,
        loss_total=mean["pl"] + mean["nl"] + mean["sd"],
        loss_pl=mean["pl"], loss_nl=mean["nl"], loss_sd=mean["sd"],
        train_acc=train_acc, test_acc=test_acc,
        r_est=state.noise_ratio, beta=state.sop_weight, lr=lr,
        seconds=time.perf_counter() - started,
        clean_train_acc=clean_acc,
        weights_min=float(w.min()), weights_max=float(w.max()),
        weights_mean=float(w.mean()),
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.10g}"


def write_metrics_csv(path, reports) -> None:
    with open(path, "w") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for r in reports:
            row = [str(r.epoch)] + [_fmt(getattr(r, c)) for c in METRICS_COLUMNS[1:]]
            f.write(",".join(row) + "\n")


def _refresh_weights(state: TrainState, dataset: Dataset, cfg: TrainConfig) -> None:
    """Derive this round's weights, corrected labels, and noise ratio from
    the previous round's averaged-model predictions."""
    if state.last_neg_probs is None:
        averaged = _eval_model(state)
        state.last_pos_probs, state.last_neg_probs = predict_probs(
            averaged, dataset.features)
    neg_on_noisy = state.last_neg_probs[np.arange(len(dataset)),
                                        dataset.noisy_labels]
    state.weights = reweight.update_weights(neg_on_noisy)
    state.corrected = reweight.corrected_labels(
        state.last_pos_probs, state.last_neg_probs)
    state.noise_ratio = reweight.estimate_noise_ratio(
        neg_on_noisy, cfg.noise_threshold)
    state.sop_weight = reweight.sop_weight_from_ratio(state.noise_ratio)


def _checkpoint_payload(state: TrainState, run_cfg) -> dict:
    from . import config as config_mod
    return {
        "epoch_done": state.epoch_done,
        "model_state": state.model.state_dict(),
        "slack_state": None if state.slack is None else state.slack.state_dict(),
        "ema_state": state.ema.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "weights": np.array(state.weights.weights),
        "corrected": None if state.corrected is None else np.array(state.corrected),
        "noise_ratio": state.noise_ratio,
        "sop_weight": state.sop_weight,
        "reports": [asdict(r) for r in state.reports],
        "config": config_mod.to_flat_dict(run_cfg),
    }


def _restore_state(state: TrainState, payload: dict, run_cfg) -> TrainState:
    from . import config as config_mod
    saved_cfg = payload.get("config")
    if saved_cfg is not None and saved_cfg != config_mod.to_flat_dict(run_cfg):
        raise ValueError("checkpoint config does not match the supplied config")
    state.model.load_state_dict(payload["model_state"])
    if payload["slack_state"] is not None:
        if state.slack is None:
            raise ValueError("checkpoint carries slack state but mode has none")
        state.slack.load_state_dict(payload["slack_state"])
    state.ema = EmaState.from_state_dict(payload["ema_state"])
    state.optimizer.load_state_dict(payload["optimizer_state"])
    state.weights = WeightTable(payload["weights"])
    state.corrected = payload["corrected"]
    state.noise_ratio = payload["noise_ratio"]
    state.sop_weight = payload["sop_weight"]
    state.reports = [EpochReport(**r) for r in payload["reports"]]
    state.epoch_done = payload["epoch_done"]
    return state


def _neg_on_noisy(state: TrainState, dataset: Dataset) -> np.ndarray:
    return state.last_neg_probs[np.arange(len(dataset)), dataset.noisy_labels]


def _write_final_artifacts(state: TrainState, dataset: Dataset, run_cfg,
                           run_dir: Path, paths: dict) -> np.ndarray:
    cfg: TrainConfig = run_cfg.train
    pos, neg = state.last_pos_probs, state.last_neg_probs
    idx = np.arange(len(dataset))
    neg_on_noisy = _neg_on_noisy(state, dataset)
    pos_on_noisy = pos[idx, dataset.noisy_labels]
    pos_pred = np.argmax(pos, axis=1)
    refreshed = (cfg.mode == "bidirectional" and cfg.epochs > cfg.warmup_epochs)
    if refreshed:
        final_weights = reweight.update_weights(neg_on_noisy)
        final_corrected = reweight.corrected_labels(pos, neg)
    else:
        final_weights = WeightTable.ones(len(dataset))
        final_corrected = np.full(len(dataset), -1, dtype=np.int64)

    clean = dataset.clean_labels
    probs_path = run_dir / "probs_final.csv"
    with open(probs_path, "w") as f:
        f.write("index,noisy_label,clean_label,neg_prob_on_noisy_label,"
                "pos_prob_on_noisy_label,pos_pred,corrected_label\n")
        for i in idx:
            clean_cell = "" if clean is None else str(int(clean[i]))
            f.write(f"{i},{int(dataset.noisy_labels[i])},{clean_cell},"
                    f"{neg_on_noisy[i]:.10g},{pos_on_noisy[i]:.10g},"
                    f"{int(pos_pred[i])},{int(final_corrected[i])}\n")
    paths["probs_final"] = probs_path

    weights_path = run_dir / "weights_final.csv"
    reweight.write_weight_dump(weights_path, idx, final_weights.weights,
                               neg_on_noisy, final_corrected)
    paths["weights_final"] = weights_path

    mask = classify_noise(neg_on_noisy, cfg.noise_threshold)
    mask_path = run_dir / "noise_mask.csv"
    truth = dataset.truth_noise_mask()
    with open(mask_path, "w") as f:
        f.write("index,noisy_label,neg_prob,flag_noisy"
                + (",truth_noisy\n" if truth is not None else "\n"))
        for i in idx:
            row = (f"{i},{int(dataset.noisy_labels[i])},"
                   f"{neg_on_noisy[i]:.10g},{int(mask[i])}")
            if truth is not None:
                row += f",{int(truth[i])}"
            f.write(row + "\n")
    paths["noise_mask"] = mask_path

    state.weights = final_weights
    state.corrected = final_corrected if refreshed else None
    return mask


def run(run_cfg, dataset: Dataset, test_set: Optional[Dataset] = None,
        run_dir=None, resume: bool = False, dump_weights: bool = False,
        stop_after_epoch: Optional[int] = None, verbose: bool = False) -> RunArtifacts:
    """Full training run. Warm-up epochs keep all weights at 1; afterwards
    every epoch starts by re-deriving weights, corrected labels, and the
    noise ratio from the previous epoch's averaged-model predictions.

    ``resume=True`` continues from ``<run_dir>/checkpoint_last``;
    ``stop_after_epoch`` simulates an interruption after that epoch index.
    """
    from . import config as config_mod
    torch.set_num_threads(1)  # keeps reductions bit-reproducible
    cfg: TrainConfig = run_cfg.train
    paths: dict = {}
    state = _build_state(run_cfg, dataset)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = run_dir / CONFIG_SNAPSHOT
        if resume:
            ckpt = run_dir / CHECKPOINT_LAST
            if not ckpt.exists():
                raise FileNotFoundError(f"no checkpoint to resume from: {ckpt}")
            state = _restore_state(state, load_checkpoint(ckpt), run_cfg)
        else:
            snapshot.write_text(config_mod.render_config(run_cfg))
        paths["config_snapshot"] = snapshot
        paths["metrics"] = run_dir / "metrics.csv"
    elif resume or stop_after_epoch is not None:
        raise ValueError("resume/stop_after_epoch require a run_dir")

    for epoch in range(state.epoch_done, cfg.epochs):
        if cfg.mode == "bidirectional" and epoch >= cfg.warmup_epochs:
            _refresh_weights(state, dataset, cfg)
            if dump_weights and run_dir is not None:
                dump_dir = run_dir / "weights"
                dump_dir.mkdir(exist_ok=True)
                reweight.write_weight_dump(
                    dump_dir / f"weights_epoch_{epoch:04d}.csv",
                    np.arange(len(dataset)), state.weights.weights,
                    _neg_on_noisy(state, dataset), state.corrected)
        report = train_epoch(state, dataset, run_cfg, epoch, test_set)
        state.reports.append(report)
        state.epoch_done = epoch + 1
        if verbose:
            test_part = "" if report.test_acc is None else f" test={report.test_acc:.4f}"
            print(f"epoch {epoch:4d} loss={report.loss_total:.4f} "
                  f"train={report.train_acc:.4f}{test_part} "
                  f"r={report.r_est:.3f} lr={report.lr:.5f}")
        if run_dir is not None:
            write_metrics_csv(paths["metrics"], state.reports)
            save_checkpoint(run_dir / CHECKPOINT_LAST,
                            _checkpoint_payload(state, run_cfg))
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            return RunArtifacts(
                run_dir=run_dir, reports=state.reports,
                pos_probs=state.last_pos_probs, neg_probs=state.last_neg_probs,
                weights=state.weights, corrected=state.corrected,
                noise_mask=np.zeros(len(dataset), dtype=bool),
                completed=False, paths=paths)

    if state.last_neg_probs is None:  # zero-epoch degenerate run
        averaged = _eval_model(state)
        state.last_pos_probs, state.last_neg_probs = predict_probs(
            averaged, dataset.features)

    mask = classify_noise(_neg_on_noisy(state, dataset), cfg.noise_threshold)
    if run_dir is not None:
        mask = _write_final_artifacts(state, dataset, run_cfg, run_dir, paths)
        save_checkpoint(run_dir / CHECKPOINT_FINAL,
                        _checkpoint_payload(state, run_cfg))
        paths["checkpoint_final"] = run_dir / CHECKPOINT_FINAL
        paths["checkpoint_last"] = run_dir / CHECKPOINT_LAST

    return RunArtifacts(
        run_dir=run_dir, reports=state.reports,
        pos_probs=state.last_pos_probs, neg_probs=state.last_neg_probs,
        weights=state.weights, corrected=state.corrected,
        noise_mask=mask, completed=True, paths=paths)
