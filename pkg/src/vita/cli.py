"""Command-line surface.

Subcommands: gen-data, warmup, cotrain, finetune, eval, rollout,
inspect-codebook, export-traces. Exit codes: 0 success, 1 usage error,
2 runtime failure. Every artifact lands under --out (or $VITA_OUT).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, VitaConfig, load_config


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, metavar="N")
    common.add_argument("--out", metavar="DIR", default=None,
                        help="output root (default $VITA_OUT or ./vita_out)")
    common.add_argument("--checkpoint", metavar="PATH", default=None)
    common.add_argument("--task", metavar="NAME", default=None)
    common.add_argument("--rollouts", type=int, default=None, metavar="N")
    common.add_argument("--no-visual-decode", action="store_true")
    common.add_argument("--temperature", type=float, default=None, metavar="F")
    common.add_argument("--replan-every", type=int, default=None, metavar="N")

    parser = _Parser(prog="vita", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("warmup", parents=[common], help="stage 1: auto-encoders + shared codebook")
    sub.add_parser("cotrain", parents=[common], help="stage 2: backbone + decoders, codebook frozen")
    sub.add_parser("finetune", parents=[common], help="stage 3: action decoder only")
    sub.add_parser("eval", parents=[common], help="closed-loop evaluation of a checkpoint")
    sub.add_parser("rollout", parents=[common], help="single traced rollout with artifacts")
    sub.add_parser("inspect-codebook", parents=[common], help="codebook utilization diagnostics")
    p_export = sub.add_parser("export-traces", parents=[common], help="re-export a rollout directory")
    p_export.add_argument("rollout_dir", metavar="ROLLOUT_DIR")
    return parser


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("VITA_OUT") or "vita_out"
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_cfg(args) -> VitaConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data.seed = args.seed
        for stage in (cfg.warmup, cfg.cotrain, cfg.finetune):
            stage.seed = args.seed
    return cfg


def _load_bundle(args, cfg: VitaConfig, out: Path):
    from .trainer import ModelBundle

    path = args.checkpoint or (out / "finetune.ckpt")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    bundle, _ = ModelBundle.load(path, cfg.model)
    return bundle


def _cmd_gen_data(args) -> int:
    from .world import generate_dataset

    cfg = _load_cfg(args)
    out = _out_dir(args)
    counts = {"video_only": cfg.data.video_only, "action_only": cfg.data.action_only,
              "paired": cfg.data.paired}
    manifest = generate_dataset(out / cfg.data.dir, counts, tuple(cfg.data.tasks),
                                cfg.data.seed, cfg.data.episode_cap)
    print(f"wrote {len(manifest)} episodes under {out / cfg.data.dir}")
    return 0


def _cmd_stage(args, stage: str) -> int:
    from .trainer import run_stage

    cfg = _load_cfg(args)
    out = _out_dir(args)
    report = run_stage(cfg, stage, out / cfg.data.dir, out)
    losses = " ".join(f"{k}={v:.4f}" for k, v in sorted(report.final_losses.items())
                      if isinstance(v, float))
    print(f"{stage} done: steps={report.steps} {losses}")
    print(f"checkpoint: {report.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import evaluate

    cfg = _load_cfg(args)
    if args.rollouts is not None and args.rollouts < 1:
        raise UsageError("--rollouts must be >= 1")
    out = _out_dir(args)
    bundle = _load_bundle(args, cfg, out)
    report = evaluate(
        bundle,
        task=args.task or cfg.eval.task,
        n_rollouts=args.rollouts if args.rollouts is not None else cfg.eval.rollouts,
        seed=args.seed if args.seed is not None else cfg.data.seed,
        temperature=args.temperature if args.temperature is not None else cfg.eval.temperature,
        replan_every=args.replan_every if args.replan_every is not None else cfg.eval.replan_every,
        cap=cfg.eval.episode_cap,
        visual_decode=not args.no_visual_decode,
        out_dir=out,
    )
    print(f"task={report.task} rollouts={report.rollouts} success_rate={report.success_rate:.3f} "
          f"mean_len={report.mean_episode_length:.1f} action_mse={report.action_mse:.5f}")
    return 0


def _cmd_rollout(args) -> int:
    from .evaluation import Policy, run_rollout, write_rollout_artifacts

    cfg = _load_cfg(args)
    out = _out_dir(args)
    bundle = _load_bundle(args, cfg, out)
    task = args.task or cfg.eval.task
    seed = args.seed if args.seed is not None else cfg.data.seed
    policy = Policy(bundle,
                    temperature=args.temperature if args.temperature is not None else cfg.eval.temperature,
                    visual_decode=not args.no_visual_decode)
    rec = run_rollout(policy, task, seed, cfg.eval.episode_cap,
                      args.replan_every if args.replan_every is not None else cfg.eval.replan_every)
    dest = out / f"rollout_{task}_{seed}"
    write_rollout_artifacts(dest, rec)
    print(f"success={rec['success']} steps={rec['steps']} artifacts={dest}")
    return 0


def _cmd_inspect(args) -> int:
    from .evaluation import inspect_codebook

    cfg = _load_cfg(args)
    out = _out_dir(args)
    bundle = _load_bundle(args, cfg, out)
    stats = inspect_codebook(bundle, out / cfg.data.dir,
                             seed=args.seed if args.seed is not None else 0)
    hist = stats.pop("usage_histogram")
    for key, val in stats.items():
        print(f"{key}: {val}")
    alive = sum(1 for u in hist if u > 0)
    print(f"entries_used_by_probe: {alive}/{stats['codebook_size']}")
    (out / "codebook_report.json").write_text(json.dumps({**stats, "usage_histogram": hist},
                                                         indent=1, sort_keys=True))
    return 0


def _cmd_export(args) -> int:
    from .evaluation import export_traces

    dest = export_traces(args.rollout_dir)
    print(f"exported to {dest}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command in ("warmup", "cotrain", "finetune"):
            return _cmd_stage(args, args.command)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "rollout":
            return _cmd_rollout(args)
        if args.command == "inspect-codebook":
            return _cmd_inspect(args)
        if args.command == "export-traces":
            return _cmd_export(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print("run 'vita --help' for usage", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
