"""End-to-end convergence experiment on synthetic scenes.

Generates disjoint train/val datasets, trains from scratch, samples the
validation set, and scores it. Every stage goes through the ctxdet CLI so a
run here is byte-reproducible with the equivalent shell commands.

    python3 scripts/run_convergence.py --out /tmp/conv
"""

import argparse
import csv
import json
import os
import sys
import time

from ctxdet.cli import main as ctxdet


def run(stage, argv):
    print(f"--- {stage}: ctxdet {' '.join(argv)}", flush=True)
    code = ctxdet(argv)
    if code != 0:
        sys.exit(f"{stage} failed with exit code {code}")


def read_losses(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {int(r["step"]): float(r["total"]) for r in rows}


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="working directory")
    ap.add_argument("--train-images", type=int, default=200)
    ap.add_argument("--val-images", type=int, default=50)
    ap.add_argument("--image-size", type=int, default=64)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--batch-size", type=int, default=48)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--proposals", type=int, default=64)
    ap.add_argument("--fpn-dim", type=int, default=64)
    ap.add_argument("--seed", type=int, default=17)
    ap.add_argument("--ddim-steps", type=int, default=1)
    ap.add_argument("--augment", action="store_true",
                    help="train with random flips (off by default)")
    return ap.parse_args()


def main():
    args = parse_args()
    os.makedirs(args.out, exist_ok=True)
    train_dir = os.path.join(args.out, "train_data")
    val_dir = os.path.join(args.out, "val_data")
    run_dir = os.path.join(args.out, "run")
    inf_dir = os.path.join(args.out, "infer")
    eval_dir = os.path.join(args.out, "eval")

    cfg_path = os.path.join(args.out, "config.json")
    with open(cfg_path, "w") as fh:
        json.dump({"num_proposals": args.proposals, "fpn_dim": args.fpn_dim,
                   "learning_rate": args.lr, "seed": args.seed}, fh)

    started = time.time()
    run("synth train", ["synth", "--n", str(args.train_images),
                        "--size", str(args.image_size),
                        "--classes", str(args.classes),
                        "--seed", "11", "--out", train_dir])
    run("synth val", ["synth", "--n", str(args.val_images),
                      "--size", str(args.image_size),
                      "--classes", str(args.classes),
                      "--seed", "22", "--out", val_dir])

    train_argv = ["train", "--data", train_dir, "--config", cfg_path,
                  "--steps", str(args.steps),
                  "--batch-size", str(args.batch_size),
                  "--log-every", "50", "--out", run_dir]
    if not args.augment:
        train_argv.append("--no-augment")
    run("train", train_argv)

    run("infer", ["infer", "--data", val_dir,
                  "--ckpt", os.path.join(run_dir, "checkpoint.cdfd"),
                  "--ddim-steps", str(args.ddim_steps),
                  "--seed", "5", "--out", inf_dir])
    run("eval", ["eval", "--data", val_dir,
                 "--detections", os.path.join(inf_dir, "detections.json"),
                 "--out", eval_dir])

    losses = read_losses(os.path.join(run_dir, "loss.csv"))
    first, last = min(losses), max(losses)
    with open(os.path.join(eval_dir, "report.json")) as fh:
        report = json.load(fh)
    print(f"\nwall time {time.time() - started:.0f}s")
    print(f"loss @ step {first}: {losses[first]:.4f}")
    print(f"loss @ step {last}: {losses[last]:.4f} "
          f"({losses[last] / losses[first]:.2%} of start)")
    for key in ("ap", "ap50", "ap75"):
        print(f"{key}: {report[key]:.4f}")


if __name__ == "__main__":
    main()
