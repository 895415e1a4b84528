"""Command-line entry point: ``textssm <subcommand> [options]``.

Subcommands:
    gen-data              synthetic grounding corpus (train/val JSONL)
    train                 AdamW training, writes a checkpoint directory
    eval                  mAP table (JSON, CSV, PNG) for a checkpoint
    bench-memory          retained-activation scaling (CSV, PNG)
    augment-annotations   overlap merge plus one-to-many grouping of annotation JSONL
    stats                 corpus statistics (JSON, CSV histograms, PNG)
    ablation              train every ablation variant over several seeds
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import annotations as ann
from . import synthetic as syn
from .bench import DEFAULT_CAP, bench_memory, write_report
from .model import ModelConfig
from .train import ABLATIONS, TrainConfig, evaluate, load_run, run_ablation, save_run, train

log = logging.getLogger("textssm")

SEED_ENV = "SSMG_SEED"


class CliError(Exception):
    pass


def _load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"{p}: invalid JSON ({e})") from e


def _seed(args, fallback: int) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise CliError(f"{SEED_ENV}={env!r} is not an integer") from e
    return fallback


def _checked(cls, d: dict, what: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise CliError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def synthetic_config(args) -> syn.SyntheticConfig:
    d = asdict(syn.desk_config())
    if getattr(args, "config", None):
        d.update(_load_json(args.config))
    for key in ("items", "L", "V", "num_motifs", "noise_std"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    d["seed"] = _seed(args, d["seed"])
    return _checked(syn.SyntheticConfig, d, "synthetic config")


def train_config(args) -> TrainConfig:
    base = asdict(TrainConfig.desk())
    if getattr(args, "config", None):
        user = _load_json(args.config)
        model = {**base["model"], **user.pop("model", {})}
        base.update(user)
        base["model"] = model
    for flag, key in (("lr", "learning_rate"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("weight_decay", "weight_decay")):
        val = getattr(args, flag, None)
        if val is not None:
            base[key] = val
    if getattr(args, "no_text_control", False):
        base["text_control"] = False
    if getattr(args, "no_relational", False):
        base["relational"] = False
    if getattr(args, "unidirectional", False):
        base["bidirectional"] = False
    base["seed"] = _seed(args, base["seed"])
    try:
        base["model"] = ModelConfig.from_dict(base["model"])
    except ValueError as e:
        raise CliError(str(e)) from e
    return _checked(TrainConfig, base, "train config")


def _corpus(args, cfg: syn.SyntheticConfig):
    """Items from --data/--val files, or a freshly generated desk corpus."""
    if getattr(args, "data", None):
        tr = syn.read_jsonl(_require(args.data, "training data"))
        va = syn.read_jsonl(_require(args.val, "validation data")) if getattr(args, "val", None) else []
        return tr, va
    _, items = syn.gen_corpus(cfg)
    tr, va = syn.split(items, (0.8, 0.2), seed=cfg.seed)
    return tr, va


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = synthetic_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    motifs, items = syn.gen_corpus(cfg, workers=args.workers)
    tr, va = syn.split(items, (1.0 - args.val_fraction, args.val_fraction), seed=cfg.seed)
    syn.write_jsonl(tr, out / "train.jsonl", motifs)
    syn.write_jsonl(va, out / "val.jsonl", motifs)
    (out / "synthetic_config.json").write_text(json.dumps(asdict(cfg), indent=2))
    print(f"wrote {len(tr)} train / {len(va)} val items to {out}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_history

    cfg = train_config(args)
    tr, va = _corpus(args, synthetic_config(argparse.Namespace(seed=None)))
    num_motifs = max(it.query_id for it in list(tr) + list(va)) + 1
    res = train(cfg, tr, va or None, num_motifs=num_motifs)
    out = Path(args.out)
    save_run(res, out / "checkpoint", cfg)
    (out / "metrics.json").write_text(json.dumps({"config": cfg.to_dict(), "history": res.history}, indent=2))
    plot_history(res.history, out / "history.png")
    last = res.history[-1] if res.history else {}
    print(f"trained {cfg.epochs} epochs; final {json.dumps(last)}; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_map_curves

    ckpt = _require(args.checkpoint, "checkpoint")
    model, embed = load_run(ckpt)
    items = syn.read_jsonl(_require(args.data, "evaluation data"))
    table = evaluate(model, items, embed, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.write_json(out / "map.json")
    table.write_csv(out / "map.csv")
    plot_map_curves({ckpt.name: table}, out / "map.png")
    print(f"average mAP {table.average:.2f}%  ({', '.join(f'{t:.1f}: {v:.1f}' for t, v in table.per_threshold.items())})")
    return 0


def cmd_bench_memory(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",")]
    rows = bench_memory(lengths, cap=args.cap or None, D=args.D, V=args.V, seed=_seed(args, 0))
    write_report(rows, args.out)
    for r in rows:
        peak = "out of memory" if r.peak is None else f"{r.peak:,}"
        print(f"{r.model:20s} L={r.length:6d}  {peak}")
    return 0


def cmd_augment(args) -> int:
    items = ann.read_jsonl(_require(args.input, "annotation file"))
    out = ann.augment(items, ratio=args.ratio, mode=args.mode, workers=args.workers)
    ann.write_jsonl(out, args.output)
    print(f"{len(items)} annotations -> {len(out)} grouped queries in {args.output}")
    return 0


def cmd_stats(args) -> int:
    from .plotting import plot_corpus_stats

    src = _require(args.input, "input file")
    if args.synthetic:
        items = ann.from_synthetic(syn.read_jsonl(src))
    else:
        items = ann.read_jsonl(src)
    stats = ann.corpus_stats(items)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats.write_json(out / "stats.json")
    stats.write_csv(out, bins=args.bins)
    plot_corpus_stats(stats, out / "stats.png", bins=args.bins)
    print(json.dumps(stats.summary()["totals"]))
    return 0


def cmd_ablation(args) -> int:
    from .plotting import plot_ablation

    cfg = train_config(args)
    tr, va = _corpus(args, synthetic_config(argparse.Namespace(seed=None)))
    seeds = [int(s) for s in args.seeds.split(",")]
    res = run_ablation(cfg, tr, va, seeds=seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps({k: {str(s): v for s, v in d.items()} for k, d in res.items()}, indent=2))
    with open(out / "ablation.csv", "w") as fh:
        fh.write("variant," + ",".join(f"seed{s}" for s in seeds) + "\n")
        for k, d in res.items():
            fh.write(k + "," + ",".join(f"{d[s]:.4f}" for s in seeds) + "\n")
    plot_ablation({k: list(d.values()) for k, d in res.items()}, out / "ablation.png")
    for k, d in res.items():
        print(f"{k:16s} " + "  ".join(f"{v:6.2f}" for v in d.values()))
    return 0


# ---------------------------------------------------------------- parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file mirroring TrainConfig")
    p.add_argument("--data", help="training corpus JSONL (default: generate the desk corpus)")
    p.add_argument("--val", help="validation corpus JSONL")
    p.add_argument("--seed", type=int, help=f"overrides config; falls back to ${SEED_ENV}")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--no-text-control", action="store_true", help="fuse the query into the input instead")
    p.add_argument("--no-relational", action="store_true", help="drop the graph branch")
    p.add_argument("--unidirectional", action="store_true", help="forward scan only")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textssm", description="Text-conditioned selective SSM grounding toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", help="JSON file mirroring SyntheticConfig")
    p.add_argument("--items", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--V", type=int)
    p.add_argument("--num-motifs", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-memory", help="activation memory against sequence length")
    p.add_argument("--lengths", default="256,512,1024,2048,4096")
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="retained-scalar cap; 0 disables")
    p.add_argument("--D", type=int, default=64)
    p.add_argument("--V", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_memory)

    p = sub.add_parser("augment-annotations", help="merge overlapping and same-text annotations")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--mode", choices=ann.MERGE_MODES, default="min")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--input", required=True)
    p.add_argument("--synthetic", action="store_true", help="input is a synthetic corpus JSONL")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ablation", help="train all ablation variants over seeds")
    _add_train_flags(p)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError) as e:
        print(f"textssm {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
