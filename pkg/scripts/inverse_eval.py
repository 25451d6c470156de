"""Re-simulation error distribution of neural-adjoint designs for held-out targets.

    python3 scripts/inverse_eval.py runs/target-mse/seed0/forward_model --targets 100 --out runs/inverse.csv
"""

import argparse
import json
import time

from metagent.pipeline import EngineConfig, inverse_evaluation, write_distribution
from metagent.surrogate import load_bundle

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("bundle")
    ap.add_argument("--targets", type=int, default=100)
    ap.add_argument("--out", default="inverse_mse_distribution.csv")
    ap.add_argument("--config", help="JSON engine config (oracle seed, NA settings)")
    args = ap.parse_args()
    cfg = EngineConfig.from_dict(json.load(open(args.config)) if args.config else {})
    t0 = time.time()
    resim, _ = inverse_evaluation(load_bundle(args.bundle), cfg, args.targets)
    summary = write_distribution(resim, args.out, "resim_mse")
    print(json.dumps(summary | {"elapsed_s": round(time.time() - t0, 1)}, indent=2))
