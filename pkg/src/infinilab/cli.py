"""Command-line entry point: ``infinilab <subcommand> [flags]``.

Run directory layout::

    config.resolved     effective run config (JSON) after overrides
    telemetry.csv       step,loss,grad_norm,lr
    alpha.csv           step,layer,head,alpha
    checkpoints/        step_XXXXXX.ckpt, final.ckpt
    results/            passkey.csv, passkey_table.csv, balance/...
    data/               generated datasets (generate-data)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as C
from . import data as D
from . import evaluate as E
from . import telemetry as TM
from . import tensor as T
from . import train as TR
from .checkpoint import CheckpointError, describe, load_checkpoint, read_header

log = logging.getLogger("infinilab")

DEFAULT_CONFIGS = {
    "generate-data": "desk_pretrain",
    "train": "desk_pretrain",
    "finetune": "desk_finetune",
}


class UsageError(Exception):
    pass


def _fields_epilog() -> str:
    names = C.config_fields()
    return (
        "config fields (set with --override FIELD=VALUE; bare names resolve in train, model, model.attention):\n  "
        + "\n  ".join(names)
        + "\n\nrecipes: " + ", ".join(C.RECIPES)
    )


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="recipe name or JSON run-config path")
    common.add_argument("--run-dir", default="runs/default", help="run directory (default: runs/default)")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--deterministic", action="store_true", help="reproducible mode: no background workers")
    common.add_argument("--override", nargs="+", action="extend", default=[], metavar="KEY=VALUE",
                        help="config overrides; flags win over file values")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="infinilab", description="Infini-attention laboratory", epilog=_fields_epilog(),
                                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              epilog=_fields_epilog(), formatter_class=fmt)

    g = add("generate-data", "write the pretraining corpus and passkey datasets as JSONL")
    g.add_argument("--finetune-samples", type=int, default=1000)
    g.add_argument("--grid", choices=("desk", "full"), default="desk")
    g.add_argument("--samples-per-cell", type=int, default=10)

    t = add("train", "pretrain from scratch (or resume) with the configured recipe")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by an earlier run")

    f = add("finetune", "fine-tune a checkpoint on passkey data")
    f.add_argument("--init", metavar="CKPT", help="checkpoint to start from (or train.init_checkpoint)")

    e = add("eval-passkey", "evaluate passkey retrieval over a context x depth grid")
    e.add_argument("--checkpoint", help="default: RUN_DIR/checkpoints/final.ckpt")
    e.add_argument("--grid", choices=("desk", "full"), default="desk")
    e.add_argument("--contexts", help="comma-separated context lengths (replaces the grid's)")
    e.add_argument("--samples-per-cell", type=int, default=10)
    e.add_argument("--batch-size", type=int, default=16)
    e.add_argument("--out", help="output directory (default: RUN_DIR/results)")

    a = add("analyze-balance", "write balance-factor analyses from a checkpoint and/or alpha log")
    a.add_argument("--checkpoint", help="default: RUN_DIR/checkpoints/final.ckpt if present")
    a.add_argument("--bins", type=int, default=10)
    a.add_argument("--threshold", type=float, default=0.5)

    i = add("inspect-checkpoint", "print config, parameter count and tensor shapes")
    i.add_argument("checkpoint", nargs="?", help="default: RUN_DIR/checkpoints/final.ckpt")
    return p


# ------------------------------------------------------------------ helpers


def resolve_config(args, default: str | None = None, base: C.RunConfig | None = None) -> C.RunConfig:
    try:
        if args.config:
            cfg = C.load_config(args.config)
        elif base is not None:
            cfg = base
        else:
            cfg = C.load_config(default or "desk_pretrain")
        cfg = C.apply_overrides(cfg, args.override)
        if args.seed is not None:
            cfg = C.with_seed(cfg, args.seed)
    except (ValueError, TypeError, FileNotFoundError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return cfg


def _write_resolved(run_dir: Path, cfg: C.RunConfig) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(cfg.dumps() + "\n")


def _checkpoint_path(args, explicit) -> Path:
    path = Path(explicit) if explicit else Path(args.run_dir) / "checkpoints" / "final.ckpt"
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def _run_training(cfg: C.RunConfig, run_dir: Path, weights=None, optimizer=None) -> int:
    try:
        res = TR.train_loop(cfg, run_dir=run_dir, weights=weights, optimizer=optimizer)
    except TR.TrainingDivergedError as exc:
        diag = sorted(run_dir.glob("diagnostic_step_*.json"))
        print(f"error: {exc}; diagnostic written to {diag[-1] if diag else run_dir}", file=sys.stderr)
        return 1
    final = res.losses[-1] if res.losses else float("nan")
    print(f"finished step {res.step} loss {final:.4f}; checkpoint {run_dir / 'checkpoints' / 'final.ckpt'}")
    return 0


# -------------------------------------------------------------- subcommands


def cmd_generate_data(args) -> int:
    cfg = resolve_config(args, DEFAULT_CONFIGS["generate-data"])
    out = Path(args.run_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(Path(args.run_dir), cfg)
    tc = cfg.train
    D.write_corpus(out / "corpus.jsonl", D.generate_corpus(tc.corpus_spec()))
    D.write_samples(out / "finetune.jsonl",
                    D.make_finetune_samples(args.finetune_samples, tc.finetune_contexts, tc.seed, key_digits=tc.key_digits))
    contexts = E.DESK_EVAL_CONTEXTS if args.grid == "desk" else D.FULL_EVAL_CONTEXTS
    D.write_samples(out / "eval_grid.jsonl",
                    D.make_eval_grid(contexts, samples_per_cell=args.samples_per_cell, seed=tc.seed, key_digits=tc.key_digits))
    print(f"wrote corpus.jsonl, finetune.jsonl, eval_grid.jsonl to {out}")
    return 0


def cmd_train(args) -> int:
    run_dir = Path(args.run_dir)
    if args.resume:
        rcfg, weights, opt = TR.resume_from(_checkpoint_path(args, args.resume))
        cfg = resolve_config(args, base=rcfg)
        TM.truncate_logs(run_dir, opt.step)
        _write_resolved(run_dir, cfg)
        return _run_training(cfg, run_dir, weights, opt)
    cfg = resolve_config(args, DEFAULT_CONFIGS["train"])
    _write_resolved(run_dir, cfg)
    return _run_training(cfg, run_dir)


def cmd_finetune(args) -> int:
    cfg = resolve_config(args, DEFAULT_CONFIGS["finetune"])
    init = args.init or cfg.train.init_checkpoint
    if not init:
        raise UsageError("finetune needs --init CKPT or train.init_checkpoint")
    init_path = _checkpoint_path(args, init)
    model_cfg, _, _ = read_header(init_path)
    # the architecture always comes from the checkpoint; the schedule from the fine-tune recipe
    cfg = replace(cfg, model=model_cfg, train=replace(cfg.train, mode="finetune", init_checkpoint=str(init_path)))
    run_dir = Path(args.run_dir)
    _write_resolved(run_dir, cfg)
    return _run_training(cfg, run_dir)


def cmd_eval_passkey(args) -> int:
    path = _checkpoint_path(args, args.checkpoint)
    ckpt = load_checkpoint(path)
    seed = args.seed if args.seed is not None else 0
    if args.contexts:
        try:
            contexts = [int(c) for c in args.contexts.split(",") if c]
        except ValueError as exc:
            raise UsageError(f"--contexts must be comma-separated integers: {args.contexts!r}") from exc
    else:
        contexts = E.DESK_EVAL_CONTEXTS if args.grid == "desk" else D.FULL_EVAL_CONTEXTS
    grid = D.make_eval_grid(contexts, samples_per_cell=args.samples_per_cell, seed=seed)
    result = E.run_grid(E.Model(ckpt.config, ckpt.weights), grid, batch_size=args.batch_size)
    out = Path(args.out) if args.out else Path(args.run_dir) / "results"
    csv_path = E.write_results(result, out)
    print(result.to_table(), end="")
    print(f"wrote {csv_path}")
    return 0


def cmd_analyze_balance(args) -> int:
    run_dir = Path(args.run_dir)
    out = run_dir / "results" / "balance"
    wrote = False
    default_ckpt = run_dir / "checkpoints" / "final.ckpt"
    if args.checkpoint or default_ckpt.exists():
        ckpt = load_checkpoint(_checkpoint_path(args, args.checkpoint))
        if not ckpt.config.attention.memory_enabled:
            raise UsageError("checkpoint has no balance gates (memory disabled)")
        snap = TM.snapshot_from_weights(ckpt.weights, ckpt.config, ckpt.step)
        summary = TM.write_balance_report(snap, out, args.bins, args.threshold)
        print(json.dumps(summary))
        wrote = True
    alpha_log = run_dir / "alpha.csv"
    if alpha_log.exists():
        snaps = TM.read_alpha_log(alpha_log)
        out.mkdir(parents=True, exist_ok=True)
        TM.write_mean_alpha_series(snaps, out / "mean_alpha.csv")
        if snaps and not wrote:
            TM.write_balance_report(snaps[-1], out, args.bins, args.threshold)
        wrote = bool(snaps) or wrote
    if not wrote:
        raise UsageError(f"nothing to analyse: no checkpoint or alpha.csv under {run_dir}")
    print(f"wrote balance analyses to {out}")
    return 0


def cmd_inspect_checkpoint(args) -> int:
    info = describe(_checkpoint_path(args, args.checkpoint))
    cfg = info["config"]
    print(f"layers {cfg['layers']}  d_model {cfg['d_model']}  heads {cfg['heads']}  d_ff {cfg['d_ff']}  "
          f"vocab {cfg['vocab_size']}  segment {cfg['attention']['segment_length']}  "
          f"memory {'on' if cfg['attention']['memory_enabled'] else 'off'}")
    print(f"parameters {info['parameters']:,}  step {info['meta'].get('step', 0)}")
    for name, shape in info["tensors"].items():
        print(f"  {name:28s} {'x'.join(str(s) for s in shape)}")
    print(json.dumps({"config": cfg, "parameters": info["parameters"]}, sort_keys=True))
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval-passkey": cmd_eval_passkey,
    "analyze-balance": cmd_analyze_balance,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    T.set_deterministic(args.deterministic)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
