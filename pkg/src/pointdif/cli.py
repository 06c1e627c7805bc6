"""Command-line interface.

Exit codes: 0 on success, 1 when flags, config or inputs fail validation,
2 when a run fails at runtime (unreadable files, corrupt checkpoints, aborts).
Diagnostics go to stderr; stdout carries only data.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .checkpoint import CheckpointError
from .config import ConfigError, PROFILES, parse_config_file, paths_from, resolve
from .diffusion import linear_schedule
from .pointcloud_io import (
    PointCloudError, load_bin, load_dataset, load_xyz, make_toy_dataset, normalize_unit_sphere,
    save_dataset,
)
from .training import TrainingError, fit, load_model, save_checkpoint

log = logging.getLogger("pointdif")

SEED_ENV = "POINTDIF_SEED"


class ValidationError(ValueError):
    """Bad flags or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _seed(args, fallback: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    env = _default_seed()
    return fallback if env is None else env


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise ValidationError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cloud(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input cloud {path} does not exist")
    return load_bin(path).astype(np.float64) if path.suffix == ".bin" else load_xyz(path)


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return load_model(path)


def _load_data(path):
    if path is None:
        raise ValidationError("no dataset given; pass --data or set paths.data in the config file")
    if not Path(path).is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    return load_dataset(path)


def _train_config(args):
    """Profile defaults, then the config file, then explicit flags."""
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    flag_map = {"mask_ratio": "train.mask_ratio", "h": "train.h", "epochs": "train.epochs",
                "batch_size": "train.batch_size", "lr": "train.lr", "T": "train.T"}
    for attr, key in flag_map.items():
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    elif "train.seed" not in file_values and _default_seed() is not None:
        overrides["train.seed"] = _default_seed()
    return resolve(args.profile, file_values, overrides), paths_from(file_values)


def _write_csv(rows, header, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# --------------------------------------------------------------------------- commands

def cmd_make_data(args) -> int:
    if args.per_class < 2:
        raise ValidationError("--per-class must be at least 2 so train and val are both non-empty")
    if args.points < 1:
        raise ValidationError("--points must be positive")
    out = _prepare_out(args.out, args.force)
    ds = make_toy_dataset(args.per_class, args.points, _seed(args))
    save_dataset(ds, out)
    log.info("wrote %d clouds to %s", len(ds), out)
    return 0


def cmd_pretrain(args) -> int:
    config, paths = _train_config(args)
    dataset = _load_data(args.data or paths.get("data"))
    out = _prepare_out(args.out or paths.get("out", "runs/pretrain"), args.force)
    state = fit(dataset, config, log_path=out / "train_log.csv")
    save_checkpoint(state, out / "checkpoint.pdck")
    from .plotting import plot_loss_curve
    plot_loss_curve(state.history, out / "loss_curve.png")
    log.info("final mean loss %.4f (first epoch %.4f)", state.losses[-1], state.losses[0])
    return 0


def cmd_generate(args) -> int:
    model, config = _load_checkpoint(args.checkpoint)
    mask = config.mask_ratio if args.mask is None else args.mask
    if not 0.0 <= mask < 1.0:
        raise ValidationError(f"--mask {mask} outside [0, 1)")
    points = _load_cloud(args.input)
    if not args.no_normalize:
        points = normalize_unit_sphere(points)
    if len(points) < max(config.num_patches, config.patch_size):
        raise ValidationError(f"input has {len(points)} points; the model needs at least "
                              f"{max(config.num_patches, config.patch_size)}")
    other = None
    if args.condition_from:
        other = normalize_unit_sphere(_load_cloud(args.condition_from))
    out = _prepare_out(args.out, args.force)
    rec = ev.reconstruct(model, points, config, mask, _seed(args), out_dir=out, condition_from=other)
    from .plotting import plot_clouds
    plot_clouds([("input", points), ("visible", rec.masked), ("generated", rec.generated)],
                out / "reconstruction.png", title=f"mask {mask:g}, chamfer {rec.chamfer:.4f}")
    sys.stdout.write(_write_csv([["chamfer", repr(rec.chamfer)]], ["metric", "value"]))
    return 0


def cmd_probe(args) -> int:
    model, config = _load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    if args.random_init:
        model = ev.random_init_model(config)
    feats = ev.encode_features(model, np.stack(dataset.clouds), config)
    labels = np.asarray(dataset.labels)
    tr, va = np.asarray(dataset.train_idx), np.asarray(dataset.val_idx)
    res = ev.probe_features(feats[tr], labels[tr], feats[va], labels[va], int(labels.max()) + 1)
    few = ev.few_shot_accuracy(feats, labels, tr, va, shots=args.shots, seed=_seed(args))
    rows = [["accuracy", repr(res.accuracy)], [f"{args.shots}shot_accuracy", repr(few)]]
    rows += [[f"class_{c}_accuracy", repr(a)] for c, a in sorted(res.per_class.items())]
    path = None
    if args.out:
        path = _prepare_out(args.out, args.force) / "probe.csv"
    sys.stdout.write(_write_csv(rows, ["metric", "value"], path))
    return 0


def cmd_ablate(args) -> int:
    config, paths = _train_config(args)
    dataset = _load_data(args.data or paths.get("data"))
    if args.mode == "intervals":
        report = ev.interval_ablation(dataset, ev.quarter_intervals(config.T, args.h), config,
                                      args.recon_shapes)
    elif args.mode == "mask":
        report = ev.mask_ratio_sweep(dataset, args.ratios, config, args.recon_shapes)
    else:
        report = ev.guidance_ablation(dataset, args.modes, config, args.recon_shapes)
    out = _prepare_out(args.out or paths.get("out", f"runs/ablate-{args.mode}"), args.force)
    report.to_csv(out / "report.csv")
    from .plotting import plot_ablation
    plot_ablation(report, out / "ablation.png", title=f"{args.mode} ablation")
    sys.stdout.write((out / "report.csv").read_text())
    return 0


def cmd_inspect_schedule(args) -> int:
    try:
        sch = linear_schedule(args.T, args.beta_start, args.beta_end)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    rows = [[t, repr(float(sch.beta[t])), repr(float(sch.alpha_bar[t])),
             repr(float(sch.beta_tilde[t]))] for t in range(1, sch.T + 1)]
    text = _write_csv(rows, ["t", "beta", "alpha_bar", "beta_tilde"], args.out)
    if args.plot:
        from .plotting import plot_schedule
        plot_schedule(sch, args.plot)
    if args.out is None:
        sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------- parser

def _add_training_flags(p):
    p.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    p.add_argument("--config", help="key = value config file (train.*, model.*, paths.*)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--data", help="dataset directory written by make-data")
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--T", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pointdif", description="Diffusion-based point-cloud pre-training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (falls back to ${SEED_ENV}, then 0)")
        return p

    p = command("make-data", cmd_make_data, "write a toy sphere/cube/torus dataset")
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = command("pretrain", cmd_pretrain, "pre-train a model; writes checkpoint, log and loss figure")
    _add_training_flags(p)
    p.add_argument("--h", type=int)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")

    p = command("generate", cmd_generate, "mask a cloud and regenerate it conditioned on the rest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".xyz text or .bin cloud")
    p.add_argument("--mask", type=float, help="mask ratio (default: the training ratio)")
    p.add_argument("--condition-from", help="condition on this cloud instead of the input")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = command("probe", cmd_probe, "linear probe on frozen encoder features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--random-init", action="store_true", help="probe a randomly initialized encoder")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")

    p = command("ablate", cmd_ablate, "pre-train and probe one model per setting")
    _add_training_flags(p)
    p.add_argument("--mode", required=True, choices=["intervals", "mask", "guidance"])
    p.add_argument("--h", type=int, default=4, help="number of intervals for --mode intervals")
    p.add_argument("--ratios", type=float, nargs="+", default=[0.0, 0.4, 0.8])
    p.add_argument("--modes", nargs="+", default=["pcnet", "concat", "cross_attention"])
    p.add_argument("--recon-shapes", type=int, default=0,
                   help="also score reconstruction Chamfer on this many val shapes")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")

    p = command("inspect-schedule", cmd_inspect_schedule, "dump the noise schedule tables as CSV")
    p.add_argument("--T", type=int, default=2000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=1e-2)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--plot", help="also render the tables to this image")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CheckpointError, PointCloudError, TrainingError, OSError) as exc:
        print(f"pointdif: error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ConfigError, ev.EvaluationError, ValueError) as exc:
        print(f"pointdif: error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"pointdif: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
