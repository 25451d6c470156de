"""Fixed-dataset experiment: simulate a pool once, then let the agent only generate and test models.

    python3 scripts/fixed_dataset.py --pool-size 5500 --out-dir runs/fixed
    python3 scripts/fixed_dataset.py --dataset adm.csv --set oracle.length=2001
"""

import argparse
import sys

from metagent.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", default="runs/fixed-dataset")
    ap.add_argument("--pool-size", type=int, default=5500)
    ap.add_argument("--dataset", help="existing pool CSV; overrides --pool-size")
    args, rest = ap.parse_known_args()
    argv = ["experiment", "fixed-dataset", "--out-dir", args.out_dir, "-v"]
    argv += ["--dataset", args.dataset] if args.dataset else ["--pool-size", str(args.pool_size)]
    sys.exit(main(argv + rest))
