"""Channel-correlation redundancy of neck and head layers for a checkpoint.

Uses the first --images validation images of the desk configuration; the usual
--section.key=value overrides change the data.

    python scripts/redundancy_report.py runs/desk/baseline/stage_baseline.gsak [--images 64]
"""

import argparse

import numpy as np

from gsa.autodiff import Tensor
from gsa.cli import _split_overrides
from gsa.config import desk_config
from gsa.model import read_checkpoint
from gsa.pipeline import load_data
from gsa.sparsity import redundancy_analysis


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint")
    ap.add_argument("--images", type=int, default=64)
    ap.add_argument("--threshold", type=float, default=0.9)
    args, extra = ap.parse_known_args()
    model = read_checkpoint(args.checkpoint)
    _, val = load_data(desk_config(**_split_overrides(extra)))
    batch = Tensor(np.stack([s.image for s in val[: args.images]]))
    rep = redundancy_analysis(model, batch, args.threshold)
    print(rep.to_table())
    print(f"mean score  head {rep.mean_score('Head'):.4f}  neck {rep.mean_score('Neck'):.4f}")


if __name__ == "__main__":
    main()
