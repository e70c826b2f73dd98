"""Command-line surface: train, detect, sweep, report, convert-sidecar.

Exit codes: 0 success, 1 runtime error, 2 validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import detect, reweight, train as train_mod
from .config import ConfigError
from .data import build_dataset

DEFAULT_THRESHOLD = 0.3


def _guard_overwrite(paths, force: bool) -> None:
    existing = [p for p in paths if Path(p).exists()]
    if existing and not force:
        raise FileExistsError(
            f"refusing to overwrite {existing[0]}; pass --force to redo")


def _read_probs_dump(run_dir: Path) -> dict:
    path = run_dir / "probs_final.csv"
    if not path.exists():
        raise FileNotFoundError(f"no probability dump at {path}; train first")
    with open(path) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path}: empty probability dump")
    neg = np.array([float(r["neg_prob_on_noisy_label"]) for r in rows])
    noisy = np.array([int(r["noisy_label"]) for r in rows])
    has_clean = all(r["clean_label"] != "" for r in rows)
    truth = None
    if has_clean:
        clean = np.array([int(r["clean_label"]) for r in rows])
        truth = noisy != clean
    return {"neg_prob": neg, "noisy": noisy, "truth": truth}


def _write_manifest(run_dir: Path, cfg, artifacts: dict, completed: bool) -> Path:
    manifest = {
        "run_name": run_dir.name,
        "completed": completed,
        "seed": cfg.train.seed,
        "mode": cfg.train.mode,
        "config_snapshot": str(run_dir / train_mod.CONFIG_SNAPSHOT),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    missing = [p for p in manifest["artifacts"].values() if not Path(p).exists()]
    if completed and missing:
        raise RuntimeError(f"run finished but artifacts are missing: {missing}")
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def cmd_train(args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else None
    if args.resume:
        if run_dir is None:
            raise ConfigError("--resume requires --run-dir")
        snapshot = run_dir / train_mod.CONFIG_SNAPSHOT
        if not snapshot.exists():
            raise FileNotFoundError(f"no config snapshot to resume from: {snapshot}")
        flat = config_mod.parse_config_text(snapshot.read_text())
        cfg = config_mod.build_run_config(flat)
    else:
        if args.config is None:
            raise ConfigError("--config is required (preset name or file path)")
        overrides = list(args.set or [])
        if args.epochs is not None:
            overrides.append(f"train.epochs={args.epochs}")
        cfg = config_mod.load_run_config(args.config, seed=args.seed,
                                         overrides=overrides)
        if run_dir is None:
            run_dir = Path("runs") / Path(args.config).stem
        if (run_dir / train_mod.CONFIG_SNAPSHOT).exists():
            _guard_overwrite([run_dir / train_mod.CONFIG_SNAPSHOT], args.force)
            shutil.rmtree(run_dir)

    train_set, test_set = build_dataset(cfg.dataset)
    artifacts = train_mod.run(cfg, train_set, test_set, run_dir=run_dir,
                              resume=args.resume, dump_weights=args.dump_weights,
                              verbose=True)
    manifest = _write_manifest(run_dir, cfg, artifacts.paths, artifacts.completed)
    last = artifacts.reports[-1]
    print(f"run complete: {run_dir} "
          f"(epochs={last.epoch + 1}, train_acc={last.train_acc:.4f}, "
          f"r_est={last.r_est:.4f})")
    print(f"manifest: {manifest}")
    return 0


def cmd_detect(args) -> int:
    run_dir = Path(args.run_dir)
    dump = _read_probs_dump(run_dir)
    h = args.threshold
    mask = detect.classify_noise(dump["neg_prob"], h)
    flagged = int(mask.sum())
    ratio = reweight.estimate_noise_ratio(dump["neg_prob"], h)
    if dump["truth"] is None:
        print(f"threshold={h:g}: flagged {flagged}/{mask.size} samples as noisy "
              f"(estimated noise ratio {ratio:.4f}); no clean labels, "
              f"metrics unavailable")
        return 0
    m = detect.precision_recall_f1(mask, dump["truth"])
    report_path = run_dir / "detect_report.csv"
    _guard_overwrite([report_path], args.force)
    with open(report_path, "w") as f:
        f.write("h,precision,recall,f1,tp,fp,fn,tn\n")
        f.write(f"{h:g},{m.precision:.10g},{m.recall:.10g},{m.f1:.10g},"
                f"{m.tp},{m.fp},{m.fn},{m.tn}\n")
    print(f"threshold={h:g}: precision={m.precision:.4f} recall={m.recall:.4f} "
          f"f1={m.f1:.4f} (tp={m.tp} fp={m.fp} fn={m.fn} tn={m.tn})")
    print(f"wrote {report_path}")
    return 0


def cmd_sweep(args) -> int:
    run_dir = Path(args.run_dir)
    dump = _read_probs_dump(run_dir)
    if dump["truth"] is None:
        raise ValueError("threshold sweep needs clean labels in the dump")
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    grid = np.linspace(args.h_min, args.h_max, args.steps)
    csv_path = run_dir / "sweep.csv"
    png_path = run_dir / "sweep_f1.png"
    _guard_overwrite([csv_path, png_path], args.force)
    rows = detect.threshold_sweep(dump["neg_prob"], dump["truth"], grid,
                                  out_path=csv_path)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([h for h, _ in rows], [m.f1 for _, m in rows], marker="o")
    ax.set_xlabel("threshold")
    ax.set_ylabel("detection F1")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    for h, m in rows:
        print(f"h={h:.3f} precision={m.precision:.4f} recall={m.recall:.4f} "
              f"f1={m.f1:.4f}")
    print(f"wrote {csv_path} and {png_path}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise FileNotFoundError(f"no metrics at {metrics_path}; train first")
    dump = _read_probs_dump(run_dir)
    report_dir = run_dir / "report"
    _guard_overwrite([report_dir], args.force)
    if report_dir.exists():
        shutil.rmtree(report_dir)
    report_dir.mkdir()

    with open(metrics_path) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{metrics_path}: no epochs recorded")
    epochs = [int(r["epoch"]) for r in rows]

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # probability histogram of the negative head on the given labels
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(0, 1, 41)
    if dump["truth"] is not None:
        ax.hist(dump["neg_prob"][~dump["truth"]], bins=bins, alpha=0.6,
                label="clean", color="tab:blue")
        ax.hist(dump["neg_prob"][dump["truth"]], bins=bins, alpha=0.6,
                label="noisy", color="tab:red")
        ax.legend()
    else:
        ax.hist(dump["neg_prob"], bins=bins, color="tab:gray")
    ax.set_xlabel("negative-head probability on given label")
    ax.set_ylabel("samples")
    fig.tight_layout()
    hist_path = report_dir / "probability_histogram.png"
    fig.savefig(hist_path, dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for col in ("loss_total", "loss_pl", "loss_nl", "loss_sd"):
        ax.plot(epochs, [float(r[col]) for r in rows], label=col)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(report_dir / "loss_curves.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, [float(r["train_acc"]) for r in rows], label="train (noisy)")
    if rows[0]["test_acc"] != "":
        ax.plot(epochs, [float(r["test_acc"]) for r in rows], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(report_dir / "accuracy_curves.png", dpi=120)
    plt.close(fig)

    last = rows[-1]
    lines = [f"run: {run_dir.name}",
             f"epochs: {len(rows)}",
             f"final train accuracy (noisy labels): {float(last['train_acc']):.4f}"]
    if last["test_acc"] != "":
        lines.append(f"final test accuracy: {float(last['test_acc']):.4f}")
    lines.append(f"final estimated noise ratio: {float(last['r_est']):.4f}")
    if dump["truth"] is not None:
        m = detect.precision_recall_f1(
            detect.classify_noise(dump["neg_prob"], DEFAULT_THRESHOLD),
            dump["truth"])
        auc = detect.ranking_auc(-dump["neg_prob"], dump["truth"])
        lines.append(f"detection at h={DEFAULT_THRESHOLD}: "
                     f"precision={m.precision:.4f} recall={m.recall:.4f} "
                     f"f1={m.f1:.4f}")
        lines.append(f"detection AUC (negative-head ranking): {auc:.4f}")
    summary = "\n".join(lines) + "\n"
    (report_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    print(f"wrote plots under {report_dir}")
    return 0


def cmd_convert_sidecar(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(f"no such file: {src}")
    suffix = src.suffix.lower()
    if suffix in (".pt", ".pth"):
        import torch
        blob = torch.load(src, map_location="cpu", weights_only=False)
        if args.key is None:
            raise ConfigError(
                f"--key is required for {suffix} containers "
                f"(available: {', '.join(map(str, blob.keys()))})")
        if args.key not in blob:
            raise ConfigError(
                f"key {args.key!r} not in {src} "
                f"(available: {', '.join(map(str, blob.keys()))})")
        labels = np.asarray(blob[args.key]).astype(np.int64)
    elif suffix == ".npz":
        blob = np.load(src)
        if args.key is None or args.key not in blob:
            raise ConfigError(
                f"--key must name an entry of {src} "
                f"(available: {', '.join(blob.files)})")
        labels = blob[args.key].astype(np.int64)
    elif suffix == ".npy":
        labels = np.load(src).astype(np.int64)
    else:
        labels = np.loadtxt(src, dtype=np.int64, delimiter=",").reshape(-1)
    out = Path(args.output)
    _guard_overwrite([out], args.force)
    with open(out, "w") as f:
        for label in labels.reshape(-1):
            f.write(f"{int(label)}\n")
    print(f"wrote {labels.size} labels to {out}")
    return 0


def _add_common(parser) -> None:
    parser.add_argument("--run-dir", help="run directory (default: runs/<config>)")
    parser.add_argument("--seed", type=int, help="override every seed in the config")
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualhead",
        description="Two-head noisy-label training with dynamic sample "
                    "reweighting and label-noise detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training configuration")
    _add_common(p)
    p.add_argument("--config", help="preset name or config file path")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--dump-weights", action="store_true",
                   help="write the weight table at every refresh")
    p.add_argument("--resume", action="store_true",
                   help="continue from <run-dir>/checkpoint_last")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score noise detection on a finished run")
    _add_common(p)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                   help="probability threshold below which a sample is noisy")
    p.set_defaults(func=cmd_detect, require_run_dir=True)

    p = sub.add_parser("sweep", help="detection metrics across a threshold grid")
    _add_common(p)
    p.add_argument("--h-min", type=float, default=0.05)
    p.add_argument("--h-max", type=float, default=0.95)
    p.add_argument("--steps", type=int, default=19)
    p.set_defaults(func=cmd_sweep, require_run_dir=True)

    p = sub.add_parser("report", help="plots and summary for a finished run")
    _add_common(p)
    p.set_defaults(func=cmd_report, require_run_dir=True)

    p = sub.add_parser("convert-sidecar",
                       help="convert a label container to sidecar format")
    p.add_argument("--input", required=True,
                   help=".pt/.npy/.npz/.csv file holding the labels")
    p.add_argument("--key", help="entry name inside dict-like containers")
    p.add_argument("--output", required=True, help="sidecar path to write")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_convert_sidecar)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "require_run_dir", False) and not args.run_dir:
        print("error: --run-dir is required for this command", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FileExistsError, ValueError, OSError,
            RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
