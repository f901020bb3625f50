"""Compare distillation weight schedules (sigmoid, cosine, linear, increasing, bell, fixed).

Each schedule reruns only the distillation stage from a shared pruned checkpoint, so
the ranking reflects the schedule alone. No ordering is asserted; the table is the result.

    python scripts/kd_schedules.py --out runs/schedules --teacher runs/desk/teacher.gsak
"""

import argparse
import shutil
from pathlib import Path

from gsa.cli import _split_overrides
from gsa.config import desk_config
from gsa.distill import Schedule
from gsa.pipeline import run_pipeline, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/schedules")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--teacher")
    args, extra = ap.parse_known_args()
    out = Path(args.out)
    teacher = Path(args.teacher) if args.teacher else out / "teacher.gsak"
    base = {"run.seed": args.seed, "run.teacher_path": str(teacher), **_split_overrides(extra)}
    if not teacher.exists():
        train_teacher(desk_config(**base, **{"run.out_dir": str(out)}))
    shared = out / "shared"
    run_pipeline(desk_config(**base, **{"run.out_dir": str(shared)}))
    rows = []
    for sched in Schedule:
        run_dir = out / sched.value
        run_dir.mkdir(parents=True, exist_ok=True)
        for stage in ("gl", "sss"):
            for ext in (".gsak", ".json"):
                shutil.copy(shared / f"stage_{stage}{ext}", run_dir / f"stage_{stage}{ext}")
        res = run_pipeline(desk_config(**base, **{"run.out_dir": str(run_dir), "adakd.schedule": sched.value}))
        rows.append((sched.value, res.final.map50, res.final.map5095))
    print(f"{'schedule':>10}  {'map50':>7}  {'map5095':>7}")
    for name, m50, m95 in sorted(rows, key=lambda r: -r[1]):
        print(f"{name:>10}  {m50:7.4f}  {m95:7.4f}")


if __name__ == "__main__":
    main()
