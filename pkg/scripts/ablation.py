"""Run the baseline plus all seven stage combinations at desk scale and print the table.

    python scripts/ablation.py --out runs/ablation --seed 42 [--section.key=value ...]
"""

import argparse
from pathlib import Path

from gsa.cli import _split_overrides
from gsa.config import desk_config
from gsa.pipeline import ABLATIONS, run_ablation, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--teacher", help="existing teacher checkpoint (trained if absent)")
    args, extra = ap.parse_known_args()
    out = Path(args.out)
    teacher = Path(args.teacher) if args.teacher else out / "teacher.gsak"
    cfg = desk_config(**{"run.seed": args.seed, "run.out_dir": str(out), "run.teacher_path": str(teacher),
                         **_split_overrides(extra)})
    if not teacher.exists():
        train_teacher(cfg)
    run_ablation(cfg, out, ABLATIONS)
    print((out / "ablation.txt").read_text(), end="")


if __name__ == "__main__":
    main()
