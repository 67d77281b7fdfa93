"""Pre-train on a profile and report loss drop, masked-code accuracy and triple AUC."""
import argparse
import time
from dataclasses import replace

import numpy as np

from kgtreat.config import load, profile
from kgtreat.pipeline import generate, run_pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", default="desk")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log", help="per-step jsonl log path")
    args = ap.parse_args()

    cfg = replace(load(args.config) if args.config else profile(args.profile), seed=args.seed)
    ds = generate(cfg)
    t0 = time.perf_counter()
    _, history, report = run_pretrain(cfg, ds, log_path=args.log)
    first = history[0]["total"]
    tail = float(np.mean([h["total"] for h in history[-100:]]))
    print(f"steps              {len(history)}  ({time.perf_counter() - t0:.0f}s)")
    print(f"loss step 1        {first:.4f}")
    print(f"loss last-100 mean {tail:.4f}  (drop {1 - tail / first:.1%})")
    print(f"masked top-1       {report['mcp_accuracy']:.4f}  ({report['mcp_accuracy'] / report['chance']:.1f}x chance)")
    if "triple_auc" in report:
        print(f"triple AUC         {report['triple_auc']:.4f}")


if __name__ == "__main__":
    main()
