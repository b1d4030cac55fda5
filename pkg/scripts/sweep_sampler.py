"""Sampler step ablation: quality vs refinement passes for one checkpoint.

Runs the DDIM sampler at several step counts over the same dataset and
seed, scores each pass, and prints AP alongside wall time. Useful for
checking how much the iterative refinement buys once a model is trained.

    python3 scripts/sweep_sampler.py --ckpt run/checkpoint.cdfd \
        --data val_data --out /tmp/sweep --steps 1 2 4 8
"""

import argparse
import json
import os
import sys
import time

from ctxdet.cli import main as ctxdet


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--seed", type=int, default=5)
    return ap.parse_args()


def main():
    args = parse_args()
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for n in args.steps:
        inf_dir = os.path.join(args.out, f"infer_{n}")
        eval_dir = os.path.join(args.out, f"eval_{n}")
        t0 = time.time()
        code = ctxdet(["infer", "--data", args.data, "--ckpt", args.ckpt,
                       "--ddim-steps", str(n), "--seed", str(args.seed),
                       "--out", inf_dir])
        if code != 0:
            sys.exit(f"infer with {n} steps failed with exit code {code}")
        sample_s = time.time() - t0
        code = ctxdet(["eval", "--data", args.data,
                       "--detections", os.path.join(inf_dir, "detections.json"),
                       "--out", eval_dir])
        if code != 0:
            sys.exit(f"eval for {n} steps failed with exit code {code}")
        with open(os.path.join(eval_dir, "report.json")) as fh:
            report = json.load(fh)
        rows.append((n, report["ap"], report["ap50"], report["ap75"],
                     sample_s))

    print(f"\n{'steps':>5} {'ap':>8} {'ap50':>8} {'ap75':>8} {'sample_s':>9}")
    for n, ap, ap50, ap75, sec in rows:
        print(f"{n:>5} {ap:>8.4f} {ap50:>8.4f} {ap75:>8.4f} {sec:>9.1f}")


if __name__ == "__main__":
    main()
