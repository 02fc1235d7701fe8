"""Command-line interface.

Subcommands: ``gen`` (write a synthetic dataset), ``train``, ``eval``,
``infer`` (heatmap export) and ``collapse`` (prototype-usage diagnostic).

Configuration precedence is CLI flag > config file > built-in default.
Config files are plain text, one ``key = value`` per line, ``#`` comments;
keys equal the long flag names with dashes replaced by underscores.

Exit codes: 0 success, 2 validation/configuration error, 3 I/O error,
4 numeric divergence, 5 metric error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    MetricError,
    NumericError,
    ProtoadError,
)
from .imagefiles import (
    heatmap_rgb,
    load_dataset,
    read_pgm,
    write_dataset,
    write_pgm,
    write_ppm,
)
from .recon import Variant
from .scoring import evaluate, score_pixels
from .synth import Dataset, DatasetSpec, generate
from .train import (
    LOG_CSV_HEADER,
    TrainConfig,
    collapse_experiment,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_METRIC = 5


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (part.strip() for part in text.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(part) for part in value.split(","))
    return value


def _resolve(args: argparse.Namespace, key: str, default):
    """CLI flag > config file > default."""
    cli_value = getattr(args, key, None)
    if cli_value is not None:
        return cli_value
    file_values = getattr(args, "_file_values", {})
    if key in file_values:
        return _coerce(file_values[key], default)
    return default


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="plain-text key = value config file")
    p.add_argument("--seed", type=int, default=None)


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--size", type=int, default=None, help="image side length")
    p.add_argument("--train", type=int, default=None, help="training image count")
    p.add_argument("--test", default=None, help="test counts as NORMAL,ANOMALOUS")
    p.add_argument("--radius", default=None, help="anomaly radius range as LO,HI pixels")
    p.add_argument("--delta", default=None, help="anomaly intensity delta range as LO,HI")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory written by gen")
    p.add_argument("--synth", action="store_true", default=None,
                   help="generate the dataset in-process from --seed/--train/--test")
    _add_dataset_args(p)
    p.add_argument("--mode", default=None, help="m0 | m1 | m2 | m2plus")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="prototype loss weight")
    p.add_argument("--beta", type=float, default=None, help="momentum coefficient")
    p.add_argument("--protos", type=int, default=None, help="prototype count")
    p.add_argument("--proto-loss", dest="proto_loss", default=None,
                   help="coherence | daa")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-encoder", dest="lr_encoder", type=float, default=None)
    p.add_argument("--log-interval", dest="log_interval", type=int, default=None)
    p.add_argument("--eval-interval", dest="eval_interval", type=int, default=None)
    p.add_argument("--no-mining", dest="no_mining", action="store_true", default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--decoder-depth", dest="decoder_depth", type=int, default=None)
    p.add_argument("--extract", default=None, help="encoder tap indices, e.g. 2,3,4")
    p.add_argument("--warmup", type=int, default=None, help="m0 pre-freeze steps")


def _float_pair(value, flag: str) -> tuple[float, float]:
    if isinstance(value, str):
        value = tuple(float(x) for x in value.split(","))
    value = tuple(value)
    if len(value) != 2:
        raise ConfigError(f"{flag} expects LO,HI, got {value}")
    return value


def _dataset_spec(args) -> DatasetSpec:
    test = _resolve(args, "test", (50, 50))
    if isinstance(test, str):
        test = tuple(int(x) for x in test.split(","))
    if len(test) != 2:
        raise ConfigError(f"--test expects NORMAL,ANOMALOUS, got {test}")
    defaults = DatasetSpec()
    return DatasetSpec(
        seed=_resolve(args, "seed", 0),
        image_size=_resolve(args, "size", 64),
        train_count=_resolve(args, "train", 200),
        test_normal=test[0],
        test_anomalous=test[1],
        radius_range=_float_pair(_resolve(args, "radius", defaults.radius_range), "--radius"),
        intensity_delta=_float_pair(_resolve(args, "delta", defaults.intensity_delta), "--delta"),
    )


def _train_config(args) -> TrainConfig:
    extract = _resolve(args, "extract", (2, 3, 4))
    if isinstance(extract, str):
        extract = tuple(int(x) for x in extract.split(","))
    no_mining = _resolve(args, "no_mining", False)
    cfg = TrainConfig(
        mode=Variant.parse(_resolve(args, "mode", "m2plus")),
        iterations=_resolve(args, "iters", 2000),
        batch_size=_resolve(args, "batch", 32),
        lam=_resolve(args, "lam", 0.2),
        beta=_resolve(args, "beta", 0.9999),
        m=_resolve(args, "protos", 6),
        lr=_resolve(args, "lr", 1e-4),
        lr_encoder=_resolve(args, "lr_encoder", 1e-5),
        proto_kind=_resolve(args, "proto_loss", "daa"),
        seed=_resolve(args, "seed", 0),
        log_interval=_resolve(args, "log_interval", 10),
        eval_interval=_resolve(args, "eval_interval", 0),
        mining=not no_mining,
        image_size=_resolve(args, "size", 64),
        patch=_resolve(args, "patch", 8),
        dim=_resolve(args, "dim", 32),
        depth=_resolve(args, "depth", 4),
        heads=_resolve(args, "heads", 4),
        extract=tuple(extract),
        decoder_depth=_resolve(args, "decoder_depth", 4),
        m0_warmup=_resolve(args, "warmup", 200),
    )
    cfg.validate()
    return cfg


def _load_data(args) -> Dataset:
    data_dir = _resolve(args, "data", None)
    synth = _resolve(args, "synth", False)
    if data_dir and synth:
        raise ConfigError("choose one of --data and --synth")
    if data_dir:
        return load_dataset(data_dir)
    if synth:
        return generate(_dataset_spec(args))
    raise ConfigError("a dataset is required: pass --data DIR or --synth")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    spec = _dataset_spec(args)
    out_dir = args.out
    ds = generate(spec)
    write_dataset(ds, out_dir)
    n_masks = sum(1 for s in ds.test if s.mask is not None)
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test images "
          f"({n_masks} masks) to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data = _load_data(args)
    result = train(cfg, data)

    ckpt_path = args.checkpoint
    csv_path = args.log_csv
    save_checkpoint(ckpt_path, result.state, seed=cfg.seed)
    with open(csv_path, "w", encoding="ascii") as f:
        f.write(LOG_CSV_HEADER + "\n")
        for row in result.log:
            f.write(row.csv_row() + "\n")
    if result.log:
        last = result.log[-1]
        print(f"step {last.step}: recon={last.recon:.6f} proto={last.proto:.6f} "
              f"total={last.total:.6f} entropy={last.entropy:.4f} "
              f"max_share={last.max_share:.4f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {csv_path}")
    if result.diverged_at is not None:
        print(f"error: loss diverged at step {result.diverged_at}; "
              f"checkpoint holds the last good state", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    data = _load_data(args)
    if not data.test:
        raise MetricError("dataset has no test split")
    report, _ = evaluate(state, data.test)
    print(f"auc={report.auc:.4f} f1={report.f1:.4f} acc={report.acc:.4f} "
          f"sen={report.sen:.4f} spe={report.spe:.4f} threshold={report.threshold:.6g}")
    if args.out:
        with open(args.out, "w", encoding="ascii") as f:
            f.write(report.CSV_HEADER + "\n")
            f.write(report.csv_row() + "\n")
        print(f"report: {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    os.makedirs(args.out_dir, exist_ok=True)
    failures = 0
    for path in args.images:
        try:
            img = read_pgm(path).astype(np.float64) / 255.0
            results = score_pixels(state, img[None, ..., None], sigma=args.sigma)
            r = results[0]
            stem = os.path.splitext(os.path.basename(path))[0]
            raw_path = os.path.join(args.out_dir, f"{stem}-raw.pgm")
            heat_path = os.path.join(args.out_dir, f"{stem}-heat.ppm")
            write_pgm(raw_path, np.clip(r.pixel_map / 2.0, 0.0, 1.0))
            write_ppm(heat_path, heatmap_rgb(r.pixel_map / args.scale))
            print(f"{path}: score={r.score:.6f} -> {raw_path}, {heat_path}")
        except (OSError, ProtoadError) as e:
            failures += 1
            print(f"{path}: error: {e}", file=sys.stderr)
    return EXIT_IO if failures else EXIT_OK


def cmd_collapse(args) -> int:
    cfg = _train_config(args)
    seeds_arg = _resolve(args, "seeds", "1,2,3")
    seeds = [int(s) for s in str(seeds_arg).split(",")]
    rows = []
    for seed in seeds:
        seed_cfg = replace(cfg, seed=seed)
        data = generate(_dataset_spec_with_seed(args, seed))
        outcome = collapse_experiment(seed_cfg, data)
        for kind, entropy, counts in (
            ("daa", outcome.entropy_daa, outcome.counts_daa),
            ("coherence", outcome.entropy_coherence, outcome.counts_coherence),
        ):
            rows.append((seed, kind, entropy, counts))
        print(f"seed {seed}: entropy daa={outcome.entropy_daa:.4f} "
              f"coherence={outcome.entropy_coherence:.4f}")
    m = cfg.m
    header = "seed,loss,entropy," + ",".join(f"count_{j}" for j in range(m))
    with open(args.out, "w", encoding="ascii") as f:
        f.write(header + "\n")
        for seed, kind, entropy, counts in rows:
            counts_text = ",".join(str(int(c)) for c in counts)
            f.write(f"{seed},{kind},{entropy:.6f},{counts_text}\n")
    print(f"comparison: {args.out}")
    return EXIT_OK


def _dataset_spec_with_seed(args, seed: int) -> DatasetSpec:
    spec = _dataset_spec(args)
    spec.seed = seed
    return spec


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoad",
        description="prototype-guided anomaly detection on synthetic imagery",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="write a synthetic dataset directory")
    _add_common(p_gen)
    _add_dataset_args(p_gen)
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train a model")
    _add_common(p_train)
    _add_train_args(p_train)
    p_train.add_argument("--checkpoint", default="model.ckpt")
    p_train.add_argument("--log-csv", dest="log_csv", default="train_log.csv")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", help="dataset directory")
    p_eval.add_argument("--synth", action="store_true", default=None)
    _add_dataset_args(p_eval)
    p_eval.add_argument("--out", help="write the metric report CSV here")
    p_eval.set_defaults(func=cmd_eval)

    p_infer = sub.add_parser("infer", help="write anomaly heatmaps for images")
    _add_common(p_infer)
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--out-dir", dest="out_dir", required=True)
    p_infer.add_argument("--sigma", type=float, default=4.0, help="map smoothing std")
    p_infer.add_argument("--scale", type=float, default=1.0,
                         help="distance mapped to the hottest color")
    p_infer.add_argument("images", nargs="+", help="input PGM files")
    p_infer.set_defaults(func=cmd_infer)

    p_col = sub.add_parser("collapse", help="compare prototype losses across seeds")
    _add_common(p_col)
    _add_train_args(p_col)
    p_col.add_argument("--seeds", default=None, help="comma-separated seeds")
    p_col.add_argument("--out", required=True, help="comparison CSV path")
    p_col.set_defaults(func=cmd_collapse)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            args._file_values = _parse_config_file(args.config)
        else:
            args._file_values = {}
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MetricError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_METRIC
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
