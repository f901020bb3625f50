"""Desk-scale reproduction: teacher, plain baseline and the full pipeline on synthetic data.

    python scripts/desk_experiment.py --out runs/desk --seed 42 [--section.key=value ...]

Prints the GFLOPs cut, interleaved FPS trials, final map50 against the baseline
and how much of the post-surgery drop the distillation stage recovered.
"""

import argparse
import json
import time
from pathlib import Path

from gsa.cli import _split_overrides
from gsa.config import desk_config
from gsa.metrics import fps_harness
from gsa.model import read_checkpoint
from gsa.pipeline import run_baseline, run_pipeline, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--trials", type=int, default=5)
    args, extra = ap.parse_known_args()
    out = Path(args.out)
    base = {"run.seed": args.seed, "run.teacher_path": str(out / "teacher.gsak"), **_split_overrides(extra)}

    t0 = time.perf_counter()
    cfg = desk_config(**base, **{"run.out_dir": str(out)})
    if not (out / "teacher.gsak").exists():
        train_teacher(cfg)
    baseline = run_baseline(desk_config(**base, **{"run.out_dir": str(out / "baseline")}))
    full = run_pipeline(desk_config(**base, **{"run.out_dir": str(out / "full")}))
    elapsed = time.perf_counter() - t0

    mb, mf = (read_checkpoint(r.checkpoints[-1].path) for r in (baseline, full))
    size = cfg.data.image_size
    trials = [(fps_harness(mb, 50, 1000, size, seed=i), fps_harness(mf, 50, 1000, size, seed=i))
              for i in range(args.trials)]
    sss = full.checkpoints[1]
    pre, post = sss.extra["pre_surgery"]["map50"], sss.report.map50
    summary = {
        "baseline_map50": baseline.final.map50,
        "pruned_map50": full.final.map50,
        "baseline_gflops": baseline.final.gflops,
        "pruned_gflops": full.final.gflops,
        "gflops_cut": 1 - full.final.gflops / baseline.final.gflops,
        "fps_trials": trials,
        "fps_wins": sum(f >= b for b, f in trials),
        "pre_surgery_map50": pre,
        "post_surgery_map50": post,
        "kd_recovery": (full.final.map50 - post) / (pre - post) if pre > post else None,
        "channels_removed": sss.extra["channels_removed"],
        "tau": sss.extra["tau"],
        "seconds": elapsed,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
