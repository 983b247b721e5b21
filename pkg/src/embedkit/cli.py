"""Command-line entry point covering the full workflow.

Subcommands: gen-data, train, eval, soup, gradcheck, ablate. Exit codes:
0 success, 1 usage error (help printed to stderr), 2 runtime failure
(diagnostic on stderr). Every file output is written atomically, and each
artifact embeds the resolved config it was produced from.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    GenerationSpec,
    default_generation_spec,
    generate_benchmark,
    read_manifest,
    split_manifest,
    write_manifest,
)
from .encoder import EncoderParams, Featurizer
from .errors import EmbedKitError
from .evaluation import (
    eval_config_for,
    evaluate,
    mix_overrides,
    run_ablation,
    run_soup_experiment,
    strategy_grid,
)
from .fileio import atomic_write_text
from .gradcheck import check_encoder_gradients, check_loss_gradients
from .souping import SoupSpec, merge_into_base, soup_adapters
from .trainer import RunConfig, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems as exit code 1."""

    def error(self, message):
        raise _UsageError(message)


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _dump_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_run_config(args) -> RunConfig:
    config = RunConfig.from_dict(_load_json(args.config)) if args.config else RunConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _cmd_gen_data(args) -> int:
    if args.config:
        spec = GenerationSpec.from_dict(_load_json(args.config))
    else:
        spec = default_generation_spec()
    seed = args.seed if args.seed is not None else 0
    manifest = generate_benchmark(seed, spec)
    train_m, eval_m = split_manifest(manifest, spec.eval_fraction, seed)
    out = Path(args.out)
    write_manifest(train_m, out / "train.jsonl")
    write_manifest(eval_m, out / "eval.jsonl")
    _dump_json(out / "generation_config.json", {"seed": seed, "spec": spec.to_dict()})
    print(f"wrote {train_m.total_records()} train / {eval_m.total_records()} eval records to {out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_run_config(args)
    if not config.train_manifest:
        raise _UsageError("config must set data.train_manifest")
    manifest = read_manifest(config.train_manifest)
    out_path = args.out or config.train.checkpoint_path or "model.ckpt"
    config.train.checkpoint_path = str(out_path)
    result = train(manifest, config.train)
    save_checkpoint(result.params, result.thetas, out_path, rng_seed=config.train.seed)
    if args.log:
        lines = [json.dumps(entry, sort_keys=True) for entry in result.log]
        atomic_write_text(args.log, "\n".join(lines) + "\n")
    _dump_json(str(out_path) + ".config.json", config.to_dict())
    final = result.log[-1]["loss"] if result.log else float("nan")
    print(f"trained {len(result.log)} steps, final loss {final:.6f}, checkpoint {out_path}")
    return 0


def _cmd_eval(args) -> int:
    config = _load_run_config(args)
    if not config.eval_manifest:
        raise _UsageError("config must set data.eval_manifest")
    ckpt = load_checkpoint(args.checkpoint)
    manifest = read_manifest(config.eval_manifest)
    featurizer = Featurizer(dim=ckpt.params.d_in, seed=ckpt.rng_seed)
    report = evaluate(ckpt.params, manifest, featurizer, eval_config_for(config))
    out = Path(args.out)
    _dump_json(out / "report.json", {"config": config.to_dict(), "report": report.to_dict()})
    atomic_write_text(out / "report.md", report.to_markdown())
    print(f"overall hit@1 {report.overall:.4f}; report in {out}")
    return 0


def _parse_weights(text: str, n: int) -> list[float]:
    try:
        weights = [float(w) for w in text.split(",")]
    except ValueError as exc:
        raise _UsageError(f"--weights must be comma-separated floats: {exc}") from exc
    if len(weights) != n:
        raise _UsageError(f"got {len(weights)} weights for {n} checkpoints")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise _UsageError(f"weights must be >= 0 and sum to 1, got {weights}")
    return weights


def _cmd_soup(args) -> int:
    ckpts = [load_checkpoint(p) for p in args.checkpoints]
    if len(ckpts) < 1:
        raise _UsageError("need at least one checkpoint")
    n = len(ckpts)
    weights = _parse_weights(args.weights, n) if args.weights else [1.0 / n] * n
    base = ckpts[0]
    for i, c in enumerate(ckpts[1:], start=1):
        if not (np.array_equal(c.params.W, base.params.W)
                and np.array_equal(c.params.b, base.params.b)):
            raise EmbedKitError(
                f"checkpoint {args.checkpoints[i]} has different base weights; "
                "only adapters trained from one base can be souped"
            )
    adapters = []
    for i, c in enumerate(ckpts):
        if c.params.adapter is None:
            raise EmbedKitError(f"checkpoint {args.checkpoints[i]} carries no adapter")
        adapters.append(c.params.adapter)
    spec = SoupSpec(adapters=adapters, weights=weights, strategy=args.strategy)
    result = soup_adapters(spec)
    thetas = _soup_thetas(ckpts, weights)
    if args.strategy == "factor-svd":
        merged = EncoderParams(W=base.params.W.copy(), b=base.params.b.copy(),
                               adapter=result.adapter)
    else:
        merged = merge_into_base(base.params, result.delta)
    save_checkpoint(merged, thetas, args.out, rng_seed=base.rng_seed)
    print(f"souped {n} adapters ({args.strategy}) into {args.out}")
    return 0


def _soup_thetas(ckpts, weights) -> dict[str, float]:
    tasks = sorted({t for c in ckpts for t in c.theta_per_task})
    return {
        t: sum(w * c.theta_per_task.get(t, 0.0) for w, c in zip(weights, ckpts))
        for t in tasks
    }


def _cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    report = check_loss_gradients(trials=args.trials, seed=seed, tolerance=args.tol)
    worst = report.max_rel_err
    trials = report.trials
    if args.encoder:
        enc = check_encoder_gradients(trials=max(1, args.trials // 2), seed=seed,
                                      tolerance=args.tol)
        worst = max(worst, enc.max_rel_err)
        trials += enc.trials
    print(f"max rel err {worst:.3e} over {trials} trials (tolerance {args.tol:g})")
    if worst >= args.tol:
        raise EmbedKitError(f"gradient check failed: {worst:.3e} >= {args.tol:g}")
    return 0


def _cmd_ablate(args) -> int:
    config = _load_run_config(args)
    if not (config.train_manifest and config.eval_manifest):
        raise _UsageError("config must set data.train_manifest and data.eval_manifest")
    train_m = read_manifest(config.train_manifest)
    eval_m = read_manifest(config.eval_manifest)
    seeds = [int(s) for s in args.seeds.split(",")]
    progress = (lambda msg: print(f"  {msg}", file=sys.stderr)) if args.verbose else None
    if args.experiment == "strategies":
        table = run_ablation(strategy_grid(), seeds, config, train_m, eval_m, progress=progress)
    else:
        table = run_soup_experiment(seeds, config, train_m, eval_m,
                                    mixes=mix_overrides(), progress=progress)
    out = Path(args.out)
    _dump_json(out / "ablation.json", table.to_dict())
    atomic_write_text(out / "ablation.md", table.to_markdown())
    print(table.to_markdown())
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="embedkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"embedkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="reserved for read-only parallel sections")

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark")
    common(p)
    p.add_argument("--out", default="data", help="output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a run config")
    common(p)
    p.add_argument("--out", help="checkpoint path (default model.ckpt)")
    p.add_argument("--log", help="write per-step JSONL training log here")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="eval-out", help="report directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("soup", help="merge adapter checkpoints")
    common(p)
    p.add_argument("checkpoints", nargs="+", help="checkpoint files to merge")
    p.add_argument("--weights", help="comma-separated convex weights")
    p.add_argument("--strategy", choices=("delta-average", "factor-svd"),
                   default="delta-average")
    p.add_argument("-o", "--out", required=True, help="merged checkpoint path")
    p.set_defaults(func=_cmd_soup)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--encoder", action="store_true", help="also check encoder gradients")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the strategy or souping experiment")
    common(p)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--experiment", choices=("strategies", "souping"), default="strategies")
    p.add_argument("--out", default="ablation-out", help="output directory")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EmbedKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
