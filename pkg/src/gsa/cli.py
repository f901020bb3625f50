"""Command-line entry point.

Every verb accepts ``--config FILE.ini`` plus ``--section.key=value`` overrides
(bare keys go to ``[run]``).  Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import PipelineConfig, apply_overrides, desk_config, read_ini
from .data import generate_synthetic, save_dataset
from .errors import ConfigError, GSAError
from .metrics import evaluate, fps_harness
from .model import read_checkpoint, write_checkpoint
from .pipeline import ABLATIONS, load_data, run_ablation, run_baseline, run_pipeline, train_teacher
from .sparsity import FixedTau, PercentileTau, redundancy_analysis, select_tau
from .surgery import apply_plan, flops_count, make_plan

log = logging.getLogger("gsa")


def _split_overrides(extra: list[str]) -> dict[str, str]:
    """Turn leftover ``--key=value`` flags into config overrides; anything else is an error."""
    overrides = {}
    for arg in extra:
        if not (arg.startswith("--") and "=" in arg):
            raise ConfigError(f"unrecognised argument {arg!r} (overrides take the form --section.key=value)")
        key, value = arg[2:].split("=", 1)
        overrides[key] = value
    return overrides


def _config(args, overrides: dict[str, str]) -> PipelineConfig:
    base = desk_config() if getattr(args, "desk", False) else PipelineConfig()
    cfg = read_ini(args.config, base) if args.config else base
    extra = dict(overrides)
    if getattr(args, "seed", None) is not None:
        extra["run.seed"] = str(args.seed)
    if getattr(args, "out", None):
        extra["run.out_dir"] = args.out
    return apply_overrides(cfg, extra) if extra else cfg


def _print(obj, as_json: bool, table: str) -> None:
    print(json.dumps(obj, indent=2) if as_json else table)


def cmd_gen_data(args, overrides):
    samples = generate_synthetic(args.seed, args.n, args.num_classes, args.size)
    root = save_dataset(samples, args.out)
    print(f"wrote {len(samples)} images to {root}")


def cmd_train_teacher(args, overrides):
    cfg = _config(args, overrides)
    path = train_teacher(cfg, args.path)
    _, val = load_data(cfg)
    rep = evaluate(read_checkpoint(path), val, cfg.data.num_classes, cfg.run.score_thresh, cfg.run.nms_iou)
    print(f"teacher saved to {path}; map50 {rep.map50:.4f}")


def cmd_run(args, overrides):
    cfg = _config(args, overrides)
    if args.ablation:
        run_ablation(cfg, cfg.run.out_dir, ABLATIONS, baseline=not args.no_baseline)
        print((Path(cfg.run.out_dir) / "ablation.txt").read_text(), end="")
        return
    result = run_baseline(cfg) if args.baseline else run_pipeline(cfg)
    print((result.out_dir / "report.txt").read_text(), end="")


def cmd_eval(args, overrides):
    cfg = _config(args, overrides)
    model = read_checkpoint(args.checkpoint)
    _, val = load_data(cfg)
    size = cfg.data.image_size
    gflops = flops_count(model, (3, size, size)).gflops
    rep = evaluate(model, val, cfg.data.num_classes, cfg.run.score_thresh, cfg.run.nms_iou, gflops)
    _print(json.loads(rep.to_json()), args.json, rep.to_table())


def cmd_prune(args, overrides):
    model = read_checkpoint(args.checkpoint)
    if (args.tau is None) == (args.percentile is None):
        raise ConfigError("give exactly one of --tau or --percentile")
    mode = FixedTau(args.tau) if args.tau is not None else PercentileTau(args.percentile)
    tau = select_tau(model, mode)
    plan = make_plan(model, tau, args.min_channels)
    pruned = apply_plan(model, plan)
    write_checkpoint(pruned, args.out)
    if args.plan:
        Path(args.plan).write_text(plan.to_json())
    before, after = flops_count(model).flops, flops_count(pruned).flops
    print(f"tau {tau:.6g}: removed {plan.n_removed} channels; FLOPs {before} -> {after}")


def cmd_redundancy(args, overrides):
    cfg = _config(args, overrides)
    model = read_checkpoint(args.checkpoint)
    _, val = load_data(cfg)
    batch = Tensor(np.stack([s.image for s in val[: args.batch]]))
    rep = redundancy_analysis(model, batch, args.threshold)
    _print(json.loads(rep.to_json()), args.json, rep.to_table())


def cmd_fps(args, overrides):
    model = read_checkpoint(args.checkpoint)
    rates = [fps_harness(model, args.warmup, args.timed, args.size, seed=i) for i in range(args.trials)]
    print(" ".join(f"{r:.1f}" for r in rates))


def cmd_flops(args, overrides):
    rep = flops_count(read_checkpoint(args.checkpoint), (3, args.size, args.size))
    _print(json.loads(rep.to_json()), args.json, rep.to_table())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsa", description="Prune and distill a miniature detector.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp, seed_required=False):
        sp.add_argument("--config", help="INI file; later --section.key=value flags override it")
        sp.add_argument("--desk", action="store_true", help="start from the CPU-scale defaults")
        sp.add_argument("--seed", type=int, required=seed_required)
        return sp

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-classes", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(fn=cmd_gen_data)

    t = with_config(sub.add_parser("train-teacher", help="train the wide teacher"))
    t.add_argument("--path", help="checkpoint destination (default run.teacher_path)")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train_teacher)

    r = with_config(sub.add_parser("run", help="run the staged pipeline"), seed_required=True)
    r.add_argument("--out")
    r.add_argument("--baseline", action="store_true", help="plain training for the same total epochs")
    r.add_argument("--ablation", action="store_true", help="run every stage combination")
    r.add_argument("--no-baseline", action="store_true", help="with --ablation, skip the baseline row")
    r.set_defaults(fn=cmd_run)

    e = with_config(sub.add_parser("eval", help="evaluate a checkpoint on the validation data"))
    e.add_argument("checkpoint")
    e.add_argument("--json", action="store_true")
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("prune", help="threshold the scaling factors and cut channels")
    pr.add_argument("checkpoint")
    pr.add_argument("--out", required=True)
    pr.add_argument("--tau", type=float)
    pr.add_argument("--percentile", type=float)
    pr.add_argument("--min-channels", type=int, default=2)
    pr.add_argument("--plan", help="also write the pruning plan JSON here")
    pr.set_defaults(fn=cmd_prune)

    rd = with_config(sub.add_parser("redundancy", help="channel correlation analysis of neck and head"))
    rd.add_argument("checkpoint")
    rd.add_argument("--batch", type=int, default=64)
    rd.add_argument("--threshold", type=float, default=0.9)
    rd.add_argument("--json", action="store_true")
    rd.set_defaults(fn=cmd_redundancy)

    f = sub.add_parser("fps", help="batch-1 forward throughput")
    f.add_argument("checkpoint")
    f.add_argument("--warmup", type=int, default=50)
    f.add_argument("--timed", type=int, default=200)
    f.add_argument("--trials", type=int, default=1)
    f.add_argument("--size", type=int, default=64)
    f.set_defaults(fn=cmd_fps)

    fl = sub.add_parser("flops", help="per-layer parameter and FLOP table")
    fl.add_argument("checkpoint")
    fl.add_argument("--size", type=int, default=64)
    fl.add_argument("--json", action="store_true")
    fl.set_defaults(fn=cmd_flops)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args, _split_overrides(extra))
    except GSAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
