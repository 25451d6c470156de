"""Target-MSE experiment on the synthetic oracle, optionally across several seeds.

    python3 scripts/target_mse.py --out-dir runs/target --seeds 0 1 2 3
"""

import argparse
import sys

from metagent.cli import main


def run(out_dir: str, seeds: list[int], extra: list[str]) -> int:
    worst = 0
    for s in seeds:
        argv = ["experiment", "target-mse", "--out-dir", f"{out_dir}/seed{s}", "--set", f"seed={s}", "-v"] + extra
        worst = max(worst, main(argv))
    return worst


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", default="runs/target-mse")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args, rest = ap.parse_known_args()
    sys.exit(run(args.out_dir, args.seeds, rest))
