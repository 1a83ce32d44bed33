"""Command-line entry point: ``omoq <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

CONFIG_VERSION = 1


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"omoq: error: UsageError: {message}\n")
        sys.exit(2)


def _cache_dir(arg):
    return arg or os.environ.get("OMOQ_CACHE_DIR") or "omoq_cache"


def parse_seeds(text: str) -> list[int]:
    """``"0..29"`` (inclusive), ``"1,4,7"`` or a mix of both."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise CliError(f"no seeds in {text!r}")
    return seeds


def read_config(path) -> dict:
    """Flat ``key = value`` file; must declare ``config_version = 1``."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    version = values.pop("config_version", None)
    if version != str(CONFIG_VERSION):
        raise CliError(f"{path}: config_version must be {CONFIG_VERSION}, got {version}")
    return values


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if value.lower() in ("none", ""):
        return None
    try:
        return int(value)
    except ValueError:
        try:
            return float(value)
        except ValueError:
            return value


_TRAIN_KEYS = ("model", "features", "epochs", "batch_size", "lr", "lr_fallback", "weight_decay", "seed",
               "segment_policy", "eval_segments", "standardize", "hidden", "collapse", "dropout", "pane_layout")


def build_train_config(args):
    from .training import TrainConfig

    defaults = {f.name: f.default for f in fields(TrainConfig)}
    merged = {}
    if args.config:
        for k, v in read_config(args.config).items():
            if k not in defaults:
                raise CliError(f"{args.config}: unknown key {k!r}")
            merged[k] = _coerce(v, defaults[k])
    for k in _TRAIN_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return TrainConfig(**merged)


# -- subcommands ------------------------------------------------------------------------


def cmd_features(args):
    from . import features as F
    from .training import read_manifest

    inputs = [Path(p) for p in args.inputs]
    for p in inputs:
        if not p.exists():
            raise CliError(f"{p}: no such file")
    wavs, train_paths = [], set()
    for p in inputs:
        if p.suffix.lower() == ".csv":
            rows = read_manifest(p)
            wavs.extend(r.path for r in rows)
            train_paths.update(r.path for r in rows if r.split == "train")
        else:
            wavs.append(str(p.resolve()))
    cache = F.FeatureCache(_cache_dir(args.out))
    feats = dict(zip(wavs, cache.get_many(wavs, args.kind, workers=args.workers)))
    cache.flush()
    if args.standardize != "none":
        source = [feats[w] for w in wavs if not train_paths or w in train_paths]
        stats = F.compute_stats(source, args.standardize)
        (cache.root / f"stats_{args.kind}_{args.standardize}.json").write_text(json.dumps(stats.to_dict()))
    dims = sorted({f.feature_dim for f in feats.values()})
    print(f"files={len(wavs)} kind={args.kind} D_F={','.join(map(str, dims))} hits={cache.hits} computed={cache.misses} cache={cache.root}")


def cmd_train(args):
    from .training import read_manifest, train

    cfg = build_train_config(args)
    rows = read_manifest(args.manifest)
    out = Path(args.out or f"runs/{cfg.model}_{cfg.features}_seed{cfg.seed}")

    def progress(epoch, rec):
        logging.info("epoch %d D=%.4f L=%s rho=%s", epoch, rec.distance,
                     [round(v, 3) for v in rec.metrics.loss], [round(v, 3) for v in rec.metrics.rho])

    res = train(rows, cfg, out_dir=out, cache_dir=_cache_dir(args.cache), progress=progress)
    b = res.best
    print(f"run={out} best_epoch={b.epoch} D={b.distance:.6f} L_mean={np.mean(b.metrics.loss):.6f} "
          f"rho_mean={np.mean(b.metrics.rho):.6f} (selection used test-split metrics)")


def cmd_sweep(args):
    from .training import load_features, read_manifest, sweep

    cfg = build_train_config(args)
    rows = read_manifest(args.manifest)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out or f"runs/{cfg.model}_{cfg.features}_sweep")
    feats = load_features(rows, cfg.features, _cache_dir(args.cache))
    bests = sweep(rows, cfg, seeds, out, feats=feats, workers=args.workers)
    top = min(bests, key=lambda r: (r.distance, r.epoch, r.seed))
    print(f"runs={len(bests)} summary={out / 'summary.csv'} best_seed={top.seed} best_epoch={top.epoch} D={top.distance:.6f}")


def cmd_predict(args):
    from .models import load_checkpoint
    from .training import predict

    ckpt = load_checkpoint(args.checkpoint)
    for w in args.inputs:
        if not Path(w).exists():
            raise CliError(f"{w}: no such file")
        print(f"{w},{predict(ckpt, w):.6f}")


def cmd_select(args):
    from .metrics import read_selection_report, select_best, write_selection_report

    records = []
    for src in args.sources:
        p = Path(src)
        p = p / "selection.csv" if p.is_dir() else p
        if not p.exists():
            raise CliError(f"{p}: no such file")
        records.extend(read_selection_report(p))
    best = select_best(records)
    if args.out:
        write_selection_report(args.out, [best])
    r = best.row()
    print(",".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items())
          + " note=test-split-informed")


def cmd_evaluate(args):
    from .evaluation import read_predictions, write_report

    if not Path(args.preds).exists():
        raise CliError(f"{args.preds}: no such file")
    summary = write_report(read_predictions(args.preds), args.out, args.alpha, equal_var=args.pooled)
    print(f"report={args.out} methods={len(summary['methods'])} alpha={args.alpha}")


def cmd_synth(args):
    from .synth import synthesize

    rows = synthesize(args.n, args.out, seed=args.seed)
    smos = [r.smos for r in rows]
    print(f"clips={len(rows)} manifest={Path(args.out) / 'manifest.csv'} smos_range={min(smos):.3f}..{max(smos):.3f}")


# -- parser -----------------------------------------------------------------------------------


def _train_args(p):
    from .features import KINDS
    from .training import MODEL_NAMES, SEGMENT_POLICIES

    p.add_argument("--manifest", required=True)
    p.add_argument("--model", choices=MODEL_NAMES)
    p.add_argument("--features", choices=KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-lr-fallback", dest="lr_fallback", action="store_const", const=False)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--segment-policy", dest="segment_policy", choices=SEGMENT_POLICIES)
    p.add_argument("--eval-segments", dest="eval_segments", type=int)
    p.add_argument("--standardize", choices=("none", "overall", "per_bin"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--collapse", choices=("mean", "median", "min", "max"))
    p.add_argument("--dropout", type=float)
    p.add_argument("--pane-layout", dest="pane_layout", choices=("stack", "channels"))
    p.add_argument("--config")
    p.add_argument("--cache")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    from .features import KINDS

    parser = _Parser(prog="omoq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("features", help="compute and cache features")
    p.add_argument("inputs", nargs="+", help="WAV files and/or manifest CSVs")
    p.add_argument("--kind", choices=KINDS, default="mfcc_d")
    p.add_argument("--standardize", choices=("none", "overall", "per_bin"), default="none")
    p.add_argument("--out", help="cache directory (default $OMOQ_CACHE_DIR or ./omoq_cache)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one model")
    _train_args(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train one model per seed")
    _train_args(p)
    p.add_argument("--seeds", default="0..29")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict", help="estimate OMOS for WAV files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("select", help="pick the minimum-distance epoch from run directories or reports")
    p.add_argument("sources", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="compare TSM methods from a predictions CSV")
    p.add_argument("--preds", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--pooled", action="store_true", help="pooled-variance t-test instead of Welch")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a labelled toy dataset (not a TSM simulator)")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as exc:  # single-line error contract
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"omoq: error: {type(exc).__name__}: {msg}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
