"""Command-line entry point: dataset generation, training, evaluation and
report/plot emission.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from protoseg import data as data_mod
from protoseg.losses import TrainingAborted, lambda_c_schedule
from protoseg.trainer import ABLATION_GRID, TrainConfig, Trainer, run_ablation

TOGGLE_NAMES = {
    "l_con": ["use_con"],
    "l_u": ["use_u"],
    "l_aux": ["use_aux"],
    "l_pc": ["use_pc"],
    "all_unsup": ["use_con", "use_u", "use_aux", "use_pc"],
}


class UsageError(Exception):
    pass


def _write_run_manifest(out_dir: str, command: str, config_hash: str,
                        config_path: str | None, started: float) -> None:
    manifest = {
        "command": command,
        "config_path": config_path,
        "config_hash": config_hash,
        "revision": os.environ.get("PROTOSEG_REVISION", "unknown"),
        "started": started,
        "finished": time.time(),
        "output_dir": os.path.abspath(out_dir),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _load_config(path: str | None, overrides: list[str]) -> TrainConfig:
    raw = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
    config = TrainConfig.from_dict(raw)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"bad --toggle value {item!r}, expected name=on|off")
        name, value = item.split("=", 1)
        if name not in TOGGLE_NAMES or value not in ("on", "off"):
            raise UsageError(f"bad --toggle value {item!r}")
        for field in TOGGLE_NAMES[name]:
            setattr(config, field, value == "on")
    return config


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ids = data_mod.generate_synthetic(args.out, args.n, classes=args.classes,
                                      seed=args.seed, size=args.size)
    manifest = data_mod.make_splits(ids, labeled_fraction=args.labeled_fraction,
                                    seed=args.seed)
    data_mod.write_splits(manifest, args.out)
    samples = data_mod.load_dataset(args.out)
    hist = {}
    for s in samples:
        for v, n in zip(*np.unique(s.mask.labels, return_counts=True)):
            hist[int(v)] = hist.get(int(v), 0) + int(n)
    print(f"wrote {len(ids)} samples to {args.out}")
    print(f"splits: {len(manifest.labeled)} labeled / {len(manifest.unlabeled)} "
          f"unlabeled / {len(manifest.val)} val / {len(manifest.test)} test")
    print(f"class pixel histogram: {hist}")
    return 0


def _load_data(data_dir: str, labeled_fraction: float, seed: int):
    samples = data_mod.load_dataset(data_dir)
    manifest = data_mod.read_splits(data_dir, labeled_fraction=labeled_fraction,
                                    seed=seed)
    return samples, manifest


def cmd_train(args) -> int:
    config = _load_config(args.config, args.toggle)
    samples, manifest = _load_data(args.data, 0.0, config.seed)
    os.makedirs(args.out, exist_ok=True)
    started = time.time()
    ckpt_dir = os.path.join(args.out, "checkpoint")

    if args.resume:
        trainer = Trainer.load_checkpoint(args.resume, samples, manifest,
                                          config=config)
    else:
        trainer = Trainer(config, samples, manifest)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)

    steps = args.steps if args.steps is not None else config.t_max
    trainer.run(steps, losses_csv=os.path.join(args.out, "losses.csv"),
                checkpoint_dir=ckpt_dir)

    with open(os.path.join(args.out, "final_metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "class", "dice", "jaccard", "hd95", "assd"])
        for split in ("val", "test"):
            ids = getattr(manifest, split)
            if not ids:
                continue
            metrics = trainer.evaluate(ids)
            for key in list(range(1, config.num_classes)) + ["mean"]:
                row = metrics[key]
                writer.writerow([split, key, row["dice"], row["jaccard"],
                                 row["hd95"], row["assd"]])
    _write_run_manifest(args.out, "train", config.hash(), args.config, started)
    print(f"run complete: {trainer.step_count} steps, outputs in {args.out}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config, None)
    samples, manifest = _load_data(args.data, 0.0, config.seed)
    os.makedirs(args.out, exist_ok=True)
    started = time.time()
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(config, ABLATION_GRID, samples, manifest, seeds,
                        num_steps=args.steps,
                        out_csv=os.path.join(args.out, "ablation.csv"))
    _write_run_manifest(args.out, "ablate", config.hash(), args.config, started)
    for row in rows:
        print(f"arm {row['arm']}: dice {row['dice_mean']:.4f} "
              f"+/- {row['dice_std']:.4f}")
    return 0


def cmd_eval(args) -> int:
    if args.split not in ("val", "test"):
        raise UsageError(f"--split must be val or test, got {args.split!r}")
    if not os.path.isdir(args.checkpoint):
        print(f"checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 1
    samples = data_mod.load_dataset(args.data)
    manifest = data_mod.read_splits(args.data)
    trainer = Trainer.load_checkpoint(args.checkpoint, samples, manifest)
    ids = getattr(manifest, args.split)
    metrics = trainer.evaluate(ids)
    keys = list(range(1, trainer.config.num_classes)) + ["mean"]
    header = f"{'class':>8} {'dice':>10} {'jaccard':>10} {'hd95':>10} {'assd':>10}"
    print(header)
    for key in keys:
        row = metrics[key]
        print(f"{key!s:>8} {row['dice']:>10.4f} {row['jaccard']:>10.4f} "
              f"{row['hd95']:>10.4f} {row['assd']:>10.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "dice", "jaccard", "hd95", "assd"])
            for key in keys:
                row = metrics[key]
                writer.writerow([key, row["dice"], row["jaccard"],
                                 row["hd95"], row["assd"]])
    return 0


def _read_losses(run_dir: str):
    path = os.path.join(run_dir, "losses.csv")
    if not os.path.exists(path):
        return None
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            rows.append([float(v) for v in row])
    return header, np.array(rows)


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = [d for d in args.runs if os.path.isdir(d)]
    if not runs:
        print("no run directories found", file=sys.stderr)
        return 1
    out_dir = args.out
    plots = os.path.join(out_dir, "plots")
    os.makedirs(plots, exist_ok=True)

    # loss curves per run
    for run in runs:
        loaded = _read_losses(run)
        if loaded is None:
            continue
        header, rows = loaded
        fig, ax = plt.subplots(figsize=(8, 5))
        steps = rows[:, 0]
        for name in ("l_sup", "l_con", "l_aux", "l_pc", "l_total"):
            ax.plot(steps, rows[:, header.index(name)], label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        ax.set_title(os.path.basename(os.path.normpath(run)))
        fig.savefig(os.path.join(plots, f"losses_{os.path.basename(os.path.normpath(run))}.png"))
        plt.close(fig)

    # consistency-weight schedule
    fig, ax = plt.subplots(figsize=(6, 4))
    ts = np.arange(0, 30001, 100)
    ax.plot(ts, [lambda_c_schedule(int(t)) for t in ts])
    ax.set_xlabel("step")
    ax.set_ylabel("consistency weight")
    fig.savefig(os.path.join(plots, "consistency_schedule.png"))
    plt.close(fig)

    # cross-run comparison of final test dice
    if len(runs) > 1:
        with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "split", "mean_dice", "mean_jaccard"])
            for run in runs:
                path = os.path.join(run, "final_metrics.csv")
                if not os.path.exists(path):
                    continue
                with open(path, newline="") as mfh:
                    for row in csv.DictReader(mfh):
                        if row["class"] == "mean":
                            writer.writerow([os.path.basename(os.path.normpath(run)),
                                             row["split"], row["dice"], row["jaccard"]])

    # ablation summary if any run carries an ablation table
    for run in runs:
        path = os.path.join(run, "ablation.csv")
        if os.path.exists(path):
            with open(path, newline="") as fh, \
                    open(os.path.join(out_dir, "ablation_summary.csv"), "w",
                         newline="") as out_fh:
                out_fh.write(fh.read())
    print(f"report written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", choices=["binary", "three-class"], default="binary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--labeled-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run warm-up plus joint training")
    p.add_argument("--config", help="JSON config file (TrainConfig keys)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--toggle", action="append",
                   help="component override, e.g. l_pc=off or all_unsup=off")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the component-toggle ablation grid")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="emit plots and tables for run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
