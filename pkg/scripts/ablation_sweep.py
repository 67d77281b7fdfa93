"""Run the full model and its ablations over several seeds and tabulate true PEHE.

    python3 scripts/ablation_sweep.py --profile confounder --seeds 0,1,2,3,4
"""
import argparse
import json
import time
from dataclasses import replace

import numpy as np

from kgtreat.config import load, profile
from kgtreat.pipeline import generate, run_all



def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="confounder")
    ap.add_argument("--config", help="config file; overrides --profile")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--variants", default="full,wo-kg,wo-pretrain-kg")
    ap.add_argument("--out", help="write every metrics dict to this jsonl file")
    args = ap.parse_args()

    base = load(args.config) if args.config else profile(args.profile)
    variants = [v.strip() for v in args.variants.split(",")]
    table = {v: [] for v in variants}
    sink = open(args.out, "w") if args.out else None
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = replace(base, seed=seed)
        ds = generate(cfg)
        t0 = time.perf_counter()
        row = []
        for v in variants:
            c = replace(cfg, ablation=replace(cfg.ablation, variants="" if v == "full" else v))
            m = run_all(c, ds)
            table[v].append(m["true_pehe"])
            row.append(f"{v}={m['true_pehe']:.4f}")
            if sink:
                sink.write(json.dumps(m, default=float) + "\n")
                sink.flush()
        print(f"seed {seed}  " + "  ".join(row) + f"  ({time.perf_counter() - t0:.0f}s)", flush=True)
    if sink:
        sink.close()

    print()
    print(f"{'variant':<16}{'mean':>9}{'std':>9}")
    for v, vals in table.items():
        print(f"{v:<16}{np.mean(vals):>9.4f}{np.std(vals):>9.4f}")
    if "full" in table and "wo-kg" in table:
        wins = sum(a < b for a, b in zip(table["full"], table["wo-kg"]))
        print(f"\nfull beats wo-kg in {wins}/{len(table['full'])} seeds")


if __name__ == "__main__":
    main()
