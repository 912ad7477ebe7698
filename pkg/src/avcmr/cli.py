"""Command-line entry point: ``avcmr <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every file written under ``--out`` starts with ``#`` lines echoing the
resolved settings.
"""

import argparse
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, fields, replace

import numpy as np

from .augmentation import augment_batch
from .data import (
    STANDARD_TRAIN_FRACTION,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    read_keyvalue,
    save_dataset,
)
from .errors import (
    AdvisoryWarning,
    DataFormatError,
    DimensionError,
    LabelError,
    NumericalDivergenceError,
    PoisonedGradientError,
)
from .evaluation import case_study
from .model import ModelPair, load_checkpoint, save_checkpoint
from .numeric import l2_normalize_rows
from .trainer import (
    SCHEDULES,
    TrainConfig,
    evaluate_models,
    gradient_check,
    iterate_batches,
    run_schedule,
)
from .triplets import TripletCategory, mine_pools

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4

log = logging.getLogger("avcmr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- config resolution ---------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name, text, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in _TRUE | _FALSE:
            return low in _TRUE
        raise UsageError(f"config key {name}: expected a boolean, got {text!r}")
    kind = int if name == "stage_switch_epoch" else type(default)
    try:
        return kind(text)
    except ValueError:
        raise UsageError(f"config key {name}: expected {kind.__name__}, got {text!r}") from None


def load_config_file(path):
    """``key=value`` file of :class:`TrainConfig` fields; unknown keys are rejected."""
    defaults = TrainConfig()
    names = {f.name for f in fields(TrainConfig)}
    raw = read_keyvalue(path)
    unknown = sorted(set(raw) - names)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return {k: _coerce(k, v, getattr(defaults, k)) for k, v in raw.items()}


_FLAG_FIELDS = {
    "epochs": "total_epochs",
    "switch": "stage_switch_epoch",
    "gamma": "gamma",
    "margin": "margin",
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "seed": "seed",
    "eval_every": "eval_every",
    "hidden_dim": "hidden_dim",
    "optimizer": "optimizer",
    "metric": "metric",
}


def resolve_config(args):
    """File values first, then flags; gamma 0 and disabled augmentation are one setting."""
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    for flag, name in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    if getattr(args, "no_augmentation", False):
        values["augmentation_enabled"] = False
    cfg = TrainConfig(**values)
    if cfg.gamma == 0 or not cfg.augmentation_enabled:
        cfg = replace(cfg, gamma=0, augmentation_enabled=False)
    try:
        return cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def echo(command, settings):
    lines = [f"avcmr {command}"]
    lines += [f"{k}={v}" for k, v in settings.items()]
    return lines


def _write(path, comments, body):
    with open(path, "w") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(body)


def _out_dir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_models(path):
    if not os.path.exists(path):
        raise DataFormatError(f"checkpoint not found: {path}")
    return load_checkpoint(path)[0]


def _select(ds, which):
    if which == "all":
        return ds
    return ds.train if which == "train" else ds.test


# --- subcommands ----------------------------------------------------------------


def cmd_gen_data(args):
    spec = SyntheticSpec(args.n_pairs, args.num_classes, args.audio_dim, args.visual_dim,
                         args.cluster_spread, args.noise_scale, args.seed)
    try:
        spec.validate()
        if not 0 < args.train_fraction < 1:
            raise ValueError(f"train_fraction must be in (0, 1), got {args.train_fraction}")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = generate_synthetic(spec)
    settings = {**asdict(spec), "train_fraction": args.train_fraction, "split_seed": args.split_seed}
    path = save_dataset(ds, _out_dir(args), args.train_fraction, args.split_seed,
                        echo("gen-data", settings))
    print(f"wrote {len(ds)} pairs ({spec.num_classes} classes) -> {path}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    ds = load_dataset(args.manifest)
    out = _out_dir(args)
    started = time.perf_counter()
    models, metrics = run_schedule(ds, cfg, SCHEDULES[args.mode], checkpoint_dir=out)
    header = echo("train", {"manifest": args.manifest, "mode": args.mode, **asdict(cfg)})
    metrics.to_csv(os.path.join(out, "metrics.csv"), header=header)
    save_checkpoint(models, os.path.join(out, "final.npz"),
                    {"epoch": cfg.total_epochs, "mode": args.mode, "config": asdict(cfg)})
    for note in metrics.advisories:
        print(f"advisory: {note}")
    last = metrics.evaluated()[-1]
    print(
        f"{args.mode}: {cfg.total_epochs} epochs in {time.perf_counter() - started:.1f}s; "
        f"test MAP a2v {last.map_a2v:.3f} v2a {last.map_v2a:.3f} avg {last.map_avg:.3f}"
    )
    return EXIT_OK


def cmd_eval(args):
    models = _load_models(args.checkpoint)
    data = _select(load_dataset(args.manifest), args.split)
    report = evaluate_models(models, data, args.metric)
    out = _out_dir(args)
    header = echo("eval", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                           "split": args.split, "metric": args.metric})
    report.to_csv(os.path.join(out, "report.csv"), header)
    _write(os.path.join(out, "report.txt"), header, report.summary() + "\n")
    print(report.summary())
    return EXIT_OK


def cmd_mine(args):
    if not args.margin > 0:
        raise UsageError("margin must be positive")
    models = _load_models(args.checkpoint)
    data = _select(load_dataset(args.manifest), args.split)
    A, V = models.embed(data.audio, data.visual)
    if args.gamma > 0:
        A, V = l2_normalize_rows(A)[0], l2_normalize_rows(V)[0]
    rng = np.random.default_rng(args.seed)
    rows = ["batch,size,n_easy,n_semihard,n_hard,degenerate"]
    total = np.zeros(3, dtype=np.int64)
    for b, idx in enumerate(iterate_batches(len(data), args.batch_size, rng)):
        labels = data.labels[idx]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AdvisoryWarning)
            aug = augment_batch(A[idx], V[idx], labels, args.gamma, rng=rng)
        n = len(idx)
        ts = mine_pools(aug.audio_pool, aug.audio_pool_labels, aug.visual_pool,
                        aug.visual_pool_labels, (n, n), args.margin, None)
        counts = [ts.census[c] for c in TripletCategory]
        total += counts
        if ts.degenerate:
            print(f"advisory: batch {b} has fewer than two classes; no triplets")
        rows.append(f"{b},{n},{counts[0]},{counts[1]},{counts[2]},{int(ts.degenerate)}")
    rows.append(f"total,{len(data)},{total[0]},{total[1]},{total[2]},")
    header = echo("mine", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                           "split": args.split, "margin": args.margin, "gamma": args.gamma,
                           "batch_size": args.batch_size, "seed": args.seed})
    _write(os.path.join(_out_dir(args), "census.csv"), header, "\n".join(rows) + "\n")
    print(f"easy {total[0]}  semi-hard {total[1]}  hard {total[2]}")
    return EXIT_OK


def cmd_retrieve(args):
    models = _load_models(args.checkpoint)
    data = _select(load_dataset(args.manifest), args.split)
    where = np.flatnonzero(data.ids == args.query_id)
    if where.size == 0:
        raise UsageError(f"query id {args.query_id} not in the {args.split} split")
    A, V = models.embed(data.audio, data.visual)
    query, gallery = (A, V) if args.direction == "a2v" else (V, A)
    q = where[0]
    if not 1 <= args.k <= len(data):
        raise UsageError(f"k must be in [1, {len(data)}]")
    text, _ = case_study(query[q], data.labels[q], gallery, data.labels, args.k, data.ids,
                         args.metric, title=f"{args.direction} query id={args.query_id}")
    header = echo("retrieve", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                               "split": args.split, "query_id": args.query_id, "k": args.k,
                               "direction": args.direction, "metric": args.metric})
    _write(os.path.join(_out_dir(args), f"retrieve_{args.query_id}.txt"), header, text)
    sys.stdout.write(text)
    return EXIT_OK


def _paired_batch(labels, size, rng):
    """Up to ``size`` rows, two per class in turn, so every class present can interpolate."""
    pools = [rng.permutation(np.flatnonzero(labels == c)).tolist() for c in np.unique(labels)]
    picked = []
    while len(picked) < min(size, len(labels)):
        for pool in pools:
            take = pool[:2]
            del pool[:2]
            picked.extend(take[: size - len(picked)])
    return np.sort(np.asarray(picked, dtype=np.int64))


def cmd_grad_check(args):
    cfg = resolve_config(args)
    if not args.h > 0:
        raise UsageError("h must be positive")
    if args.manifest:
        ds = load_dataset(args.manifest, apply_split=False)
    else:
        ds = generate_synthetic()
    idx = _paired_batch(ds.labels, args.batch, np.random.default_rng(cfg.seed))
    models = ModelPair.build(ds.audio_dim, ds.visual_dim, cfg.hidden_dim, ds.num_classes,
                             seed=cfg.seed, n_hidden=cfg.n_hidden)
    started = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AdvisoryWarning)
        worst = gradient_check(models, ds.audio[idx], ds.visual[idx], ds.labels[idx], cfg,
                               h=args.h, corrupt=args.inject_gradient_bug)
    elapsed = time.perf_counter() - started
    overall = max(worst.values())
    ok = overall < GRAD_TOLERANCE
    header = echo("grad-check", {"h": args.h, "batch": len(idx), "hidden_dim": cfg.hidden_dim,
                                 "n_hidden": cfg.n_hidden, "margin": cfg.margin,
                                 "gamma": cfg.gamma, "seed": cfg.seed})
    lines = [f"{stage}\t{err:.3e}" for stage, err in worst.items()]
    lines.append(f"max relative error {overall:.3e} ({'PASS' if ok else 'FAIL'}, "
                 f"tolerance {GRAD_TOLERANCE:g}, {elapsed:.1f}s)")
    body = "\n".join(lines) + "\n"
    for line in header:
        print(f"# {line}")
    sys.stdout.write(body)
    if args.out:
        _write(os.path.join(_out_dir(args), "grad_check.txt"), header, body)
    return EXIT_OK if ok else EXIT_NUMERIC


# --- parser ----------------------------------------------------------------------


def _train_flags(p):
    p.add_argument("--config", help="key=value file of training settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--switch", type=int, help="first epoch of the second stage")
    p.add_argument("--gamma", type=int, help="synthetic points per interpolated pair")
    p.add_argument("--no-augmentation", action="store_true")
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])


def build_parser():
    parser = _Parser(prog="avcmr", description="Audio-visual cross-modal retrieval with curriculum triplet training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    p.add_argument("--n-pairs", type=int, default=200)
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--audio-dim", type=int, default=16)
    p.add_argument("--visual-dim", type=int, default=24)
    p.add_argument("--cluster-spread", type=float, default=1.0)
    p.add_argument("--noise-scale", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--train-fraction", type=float, default=STANDARD_TRAIN_FRACTION)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training (or an ablation schedule)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=sorted(SCHEDULES), default="semi-to-hard")
    p.add_argument("--metric", choices=["euclidean", "cosine"])
    _train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    def model_and_data(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", choices=["train", "test", "all"], default="test")
        p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="MAP in both retrieval directions")
    model_and_data(p)
    p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mine", help="triplet category census per batch")
    model_and_data(p)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--gamma", type=int, default=0, help="augment before mining (normalized space)")
    p.add_argument("--batch-size", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mine, split="train")

    p = sub.add_parser("retrieve", help="top-k case study for one query")
    model_and_data(p)
    p.add_argument("--query-id", type=int, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--direction", choices=["a2v", "v2a"], default="a2v")
    p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    p.set_defaults(func=cmd_retrieve, split="all")

    p = sub.add_parser("grad-check", help="finite-difference check of the training objective")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--manifest", help="draw the batch from this dataset instead of the standard one")
    p.add_argument("--out")
    _train_flags(p)
    p.add_argument("--inject-gradient-bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"avcmr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, LabelError, DimensionError, FileNotFoundError) as exc:
        print(f"avcmr {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalDivergenceError, PoisonedGradientError, FloatingPointError) as exc:
        print(f"avcmr {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
