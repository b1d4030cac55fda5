"""Operator command line: synth / train / eval / infer / gradcheck /
schedule-dump.

Every command takes --seed and --out, writes exactly one run manifest into
the output directory, and is bit-reproducible under identical flags. Exit
codes: 0 success, 2 configuration or parse problems, 3 runtime contract
violations.
"""

import os
import sys

# Cap BLAS pools before numpy first touches them; harmless if numpy is
# already resident in this process.
_threads = os.environ.get("CDIFFDET_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                 "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import hashlib
import time

import numpy as np

from . import tensor as T
from .backbone import (ace_forward, backbone_forward, fpn_forward,
                       gce_forward, init_ace, init_backbone, init_fpn,
                       init_gce, roi_pool)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SynthConfig, augment, dataset_to_eval_gts,
                   generate_synthetic, image_to_float, load_coco_subset,
                   save_dataset)
from .detector import (DetectorConfig, denoise_forward, infer, init_detector,
                       init_optimizer_state, signal_to_pixel_boxes,
                       train_step)
from .diffusion import build_cosine_schedule
from .errors import ConfigError, ContractError, ParseError
from .evaluation import coco_summary, report_to_csv, report_to_json
from .head import (build_embeddings, cross_attention_caf, final_mlp,
                   init_caf, init_embeddings, init_final_mlp, init_head,
                   init_mmf, init_prediction_heads, init_self_attention,
                   mmf_fuse, prediction_heads, self_attention)
from .ioutil import dump_json, ensure_dir, load_json
from .loss import Assignment, set_loss
from .tensor import Tensor, finite_difference_check


def _build_id() -> str:
    """Content hash of the package sources, in lieu of a VCS revision."""
    digest = hashlib.sha256()
    pkg = os.path.dirname(os.path.abspath(__file__))
    for name in sorted(os.listdir(pkg)):
        if name.endswith(".py"):
            with open(os.path.join(pkg, name), "rb") as fh:
                digest.update(name.encode())
                digest.update(fh.read())
    return digest.hexdigest()[:12]


def _write_run_manifest(out_dir, command, args, config, started,
                        outputs) -> None:
    dump_json(os.path.join(out_dir, "run_manifest.json"), {
        "kind": "run",
        "command": command,
        "argv": [str(a) for a in args],
        "config": config,
        "build_id": _build_id(),
        "started_unix": round(started, 3),
        "duration_s": round(time.time() - started, 3),
        "outputs": sorted(outputs),
    })


def _detector_config(args, num_classes=None) -> DetectorConfig:
    overrides = {}
    if getattr(args, "config", None):
        doc = load_json(args.config)
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        overrides = doc
    if num_classes is not None and "num_classes" not in overrides:
        overrides["num_classes"] = num_classes
    if args.seed is not None:
        overrides["seed"] = args.seed
    base = DetectorConfig().to_dict()
    base.update(overrides)
    return DetectorConfig.from_dict(base)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def cmd_synth(args) -> int:
    started = time.time()
    ensure_dir(args.out)
    cfg = SynthConfig(size=args.size, num_classes=args.classes,
                      min_instances=args.min_instances,
                      max_instances=args.max_instances,
                      seed=args.seed if args.seed is not None else 0)
    ds = generate_synthetic(cfg, args.n)
    ann = save_dataset(ds, args.out, extra_manifest={"config": cfg.to_dict()})
    _write_run_manifest(args.out, "synth", sys.argv[1:], cfg.to_dict(),
                        started, [os.path.basename(ann), "manifest.json"])
    print(f"wrote {args.n} images to {args.out}")
    return 0


def _batch_from(dataset, indices, rng, use_augment):
    images, gt_boxes, gt_classes = [], [], []
    for i in indices:
        img = dataset.images[i]
        boxes = dataset.boxes[i]
        classes = dataset.classes[i]
        if use_augment:
            img, boxes, classes = augment(img, boxes, classes, rng)
        images.append(image_to_float(img))
        gt_boxes.append(boxes)
        gt_classes.append(classes)
    return {"images": np.stack(images), "gt_boxes": gt_boxes,
            "gt_classes": gt_classes}


def cmd_train(args) -> int:
    started = time.time()
    ensure_dir(args.out)
    dataset = load_coco_subset(args.data)
    if len(dataset) == 0:
        raise ConfigError(f"{args.data}: dataset is empty")

    if args.resume:
        params, cfg_dict, opt_state = load_checkpoint(args.resume)
        cfg = DetectorConfig.from_dict(cfg_dict)
        if opt_state is None:
            opt_state = init_optimizer_state(params)
    else:
        cfg = _detector_config(args, num_classes=len(dataset.categories))
        params = init_detector(cfg)
        opt_state = init_optimizer_state(params)

    log_rows = []
    ckpt_path = os.path.join(args.out, "checkpoint.cdfd")
    outputs = ["checkpoint.cdfd", "loss.csv"]
    start_step = opt_state["step"]
    if start_step >= args.steps:
        raise ConfigError(f"checkpoint already at step {start_step}, "
                          f"nothing to do for --steps {args.steps}")
    for step in range(start_step, args.steps):
        # One generator per step, keyed by (seed, step): resuming from a
        # checkpoint replays the exact stream an unbroken run would see.
        srng = np.random.default_rng((cfg.seed, step))
        idx = srng.integers(0, len(dataset), size=args.batch_size)
        batch = _batch_from(dataset, idx, srng, not args.no_augment)
        metrics = train_step(batch, params, opt_state, cfg, srng)
        done = metrics["step"]
        if done % args.log_every == 0 or done == args.steps:
            log_rows.append((done, metrics["total"], metrics["cls"],
                             metrics["l1"], metrics["giou"]))
            print(f"step {done} loss {metrics['total']:.4f}")
        if args.ckpt_every and done % args.ckpt_every == 0 \
                and done < args.steps:
            name = f"checkpoint_{done:06d}.cdfd"
            save_checkpoint(os.path.join(args.out, name), params,
                            cfg.to_dict(), opt_state)
            outputs.append(name)

    save_checkpoint(ckpt_path, params, cfg.to_dict(), opt_state)
    _write_csv(os.path.join(args.out, "loss.csv"),
               ("step", "total", "cls", "l1", "giou"), log_rows)
    _write_run_manifest(args.out, "train", sys.argv[1:], cfg.to_dict(),
                        started, outputs)
    return 0


def _load_detections(path):
    try:
        doc = load_json(path)
    except ValueError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}")
    if not isinstance(doc, dict) or "detections" not in doc:
        raise ParseError(f"{path}: missing 'detections' array")
    dets = doc["detections"]
    for i, d in enumerate(dets):
        for key in ("image_id", "category_id", "bbox", "score"):
            if key not in d:
                raise ParseError(f"{path}: detection {i} missing '{key}'")
        if len(d["bbox"]) != 4:
            raise ParseError(f"{path}: detection {i} has malformed bbox")
    return dets


def cmd_eval(args) -> int:
    started = time.time()
    ensure_dir(args.out)
    dataset = load_coco_subset(args.data)
    gts = dataset_to_eval_gts(dataset)
    preds = _load_detections(args.detections)
    report = coco_summary(preds, gts)
    with open(os.path.join(args.out, "report.json"), "w",
              encoding="utf-8") as fh:
        fh.write(report_to_json(report) + "\n")
    with open(os.path.join(args.out, "report.csv"), "w",
              encoding="utf-8", newline="") as fh:
        fh.write(report_to_csv(report))
    _write_run_manifest(args.out, "eval", sys.argv[1:], {}, started,
                        ["report.json", "report.csv"])
    for line in report_to_csv(report).strip().splitlines()[1:]:
        print(line.replace(",", " = "))
    return 0


def cmd_infer(args) -> int:
    started = time.time()
    ensure_dir(args.out)
    params, cfg_dict, _ = load_checkpoint(args.ckpt)
    if args.config:
        doc = load_json(args.config)
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        cfg_dict.update(doc)
    if args.ddim_steps is not None:
        cfg_dict["ddim_steps"] = args.ddim_steps
    cfg = DetectorConfig.from_dict(cfg_dict)
    seed = args.seed if args.seed is not None else cfg.seed
    dataset = load_coco_subset(args.data)

    detections, trace_rows = [], []
    for img, img_id in zip(dataset.images, dataset.image_ids):
        rng = np.random.default_rng((seed, img_id))
        res = infer(image_to_float(img), params, cfg, rng,
                    want_trace=args.trace)
        for box, score, label in zip(res.boxes, res.scores, res.labels):
            detections.append({
                "image_id": int(img_id),
                "category_id": dataset.categories[int(label)][0],
                "bbox": [float(v) for v in box],
                "score": float(score),
            })
        if args.trace:
            _, h, w = img.shape
            for si, rec in enumerate(res.trace):
                boxes_px = signal_to_pixel_boxes(rec["x"][0], h, w,
                                                 cfg.signal_scale)
                for pi, b in enumerate(boxes_px):
                    kept = "" if rec["kept"] is None \
                        else int(rec["kept"][0, pi])
                    trace_rows.append((img_id, si, rec["t"], rec["t_prev"],
                                       pi, *(f"{v:.17g}" for v in b), kept))

    out_path = os.path.join(args.out, "detections.json")
    dump_json(out_path, {"bbox_format": "xyxy", "detections": detections})
    outputs = ["detections.json"]
    if args.trace:
        _write_csv(os.path.join(args.out, "trace.csv"),
                   ("image_id", "step", "t", "t_prev", "proposal",
                    "x1", "y1", "x2", "y2", "kept"), trace_rows)
        outputs.append("trace.csv")
    _write_run_manifest(args.out, "infer", sys.argv[1:], cfg.to_dict(),
                        started, outputs)
    print(f"wrote {len(detections)} detections for {len(dataset)} images")
    return 0


def _corrupt(x: Tensor) -> Tensor:
    # Identity forward, wrong backward; exists to prove gradcheck can fail.
    return T._out("corrupt", x.data.copy(), (x,), lambda g: (0.5 * g,))


def _gradcheck_blocks(inject_failure=False):
    rng = np.random.default_rng(1234)
    img = rng.uniform(0, 1, size=(1, 3, 32, 32))
    channels = (2, 2, 4, 4)

    def backbone_block():
        params = {}
        init_backbone(rng, params, channels)
        feats_fn = lambda: backbone_forward(img, params)

        def objective():
            feats = feats_fn()
            return T.tsum(T.concat([T.reshape(T.tsum(v), (1,))
                                    for v in feats.values()], axis=0))
        return finite_difference_check(objective, params)

    def ace_block():
        params = {}
        init_backbone(rng, params, channels)
        init_ace(rng, params, channels[-1])
        frozen = {k: v for k, v in params.items() if k.startswith("ace.")}

        def objective():
            c5 = backbone_forward(img, params)[5]
            out = ace_forward(c5, params)
            if inject_failure:
                out = _corrupt(out)
            return T.tsum(out)
        return finite_difference_check(objective, frozen)

    def fpn_block():
        params = {}
        init_backbone(rng, params, channels)
        init_fpn(rng, params, channels, 4)
        sub = {k: v for k, v in params.items() if k.startswith("fpn.")}

        def objective():
            pyr = fpn_forward(backbone_forward(img, params), params)
            return T.tsum(T.concat([T.reshape(T.tsum(v), (1,))
                                    for v in pyr.values()], axis=0))
        return finite_difference_check(objective, sub)

    def gce_block():
        params = {}
        init_gce(rng, params, (2, 4), 4)

        def objective():
            return T.tsum(gce_forward(img, params))
        return finite_difference_check(objective, params)

    def roi_block():
        params = {}
        init_backbone(rng, params, channels)
        init_fpn(rng, params, channels, 4)
        boxes = np.array([[[2.0, 2.0, 20.0, 24.0], [5.0, 8.0, 30.0, 30.0],
                           [0.0, 0.0, 32.0, 32.0], [9.0, 3.0, 14.0, 11.0]]])

        def objective():
            pyr = fpn_forward(backbone_forward(img, params), params)
            return T.tsum(roi_pool(pyr, boxes))
        return finite_difference_check(objective, params)

    d, d_f, n = 4, 4, 4
    f_roi = Tensor(rng.normal(size=(1, n, d)))
    g_vec = Tensor(rng.normal(size=(1, d_f)))
    # Plain sums of layer-normalized outputs are identically zero (each
    # token is centered), which would turn these checks into noise ratios;
    # a fixed random weighting keeps the objective sensitive everywhere.
    probe = Tensor(rng.normal(size=(1, n, d)))

    def self_attn_block():
        params = {}
        init_self_attention(rng, params, d)

        def objective():
            return T.tsum(T.mul(self_attention(f_roi, params, heads=2),
                                probe))
        return finite_difference_check(objective, params)

    def caf_block():
        params = {}
        init_caf(rng, params, d, d_f)

        def objective():
            out = cross_attention_caf(f_roi, g_vec, params, heads=2)
            return T.tsum(T.mul(out, probe))
        return finite_difference_check(objective, params)

    def mmf_block():
        params = {}
        init_embeddings(rng, params, d, d_f)
        init_mmf(rng, params, d)

        def objective():
            emb = build_embeddings(3, n, g_vec, params, d)
            return T.tsum(T.mul(mmf_fuse(f_roi, emb.latent, params), probe))
        return finite_difference_check(objective, params)

    def final_mlp_block():
        params = {}
        init_final_mlp(rng, params, d)

        def objective():
            return T.tsum(final_mlp(f_roi, params))
        return finite_difference_check(objective, params)

    def heads_block():
        params = {}
        init_prediction_heads(rng, params, d, 2)

        def objective():
            out = prediction_heads(f_roi, params)
            return T.tsum(T.concat([T.reshape(T.tsum(v), (1,))
                                    for v in out.values()], axis=0))
        return finite_difference_check(objective, params)

    def set_loss_e2e_block():
        cfg = DetectorConfig(num_classes=2, num_proposals=4,
                             backbone_channels=channels, fpn_dim=4,
                             gce_hidden=(2, 4), gce_dim=4,
                             attention_heads=2, seed=5)
        params = init_detector(cfg)
        x_t = rng.uniform(-2, 2, size=(1, 4, 4))
        gt_boxes = np.array([[0.1, 0.2, 0.55, 0.7], [0.4, 0.1, 0.9, 0.5]])
        gt_classes = np.array([0, 1])
        assignment = Assignment(((0, 0), (2, 1)), (1, 3))

        def objective():
            out = denoise_forward(img, x_t, 3, params, cfg)
            boxes = T.add(T.div(out["x0_signal"], 4.0), 0.5)
            total, _ = set_loss(T.take(out["logits"], 0),
                                T.take(boxes, 0), gt_classes, gt_boxes,
                                assignment, cfg.match_weights())
            return total
        return finite_difference_check(objective, params, eps=1e-4)

    return {
        "backbone": backbone_block, "ace": ace_block, "fpn": fpn_block,
        "gce": gce_block, "roi": roi_block, "self_attn": self_attn_block,
        "caf": caf_block, "mmf": mmf_block, "final_mlp": final_mlp_block,
        "heads": heads_block, "set_loss_e2e": set_loss_e2e_block,
    }


def cmd_gradcheck(args) -> int:
    started = time.time()
    ensure_dir(args.out)
    blocks = _gradcheck_blocks(inject_failure=args.inject_failure)
    if args.block:
        if args.block not in blocks:
            raise ConfigError(f"unknown block {args.block!r}; pick from "
                              f"{sorted(blocks)}")
        blocks = {args.block: blocks[args.block]}
    rows, failed = [], []
    for name, fn in blocks.items():
        err = fn()
        ok = err < 1e-4
        rows.append((name, f"{err:.3e}", "PASS" if ok else "FAIL"))
        if not ok:
            failed.append(name)
        print(f"{name:<14} {err:.3e} {'PASS' if ok else 'FAIL'}")
    _write_csv(os.path.join(args.out, "gradcheck.csv"),
               ("block", "max_rel_err", "status"), rows)
    _write_run_manifest(args.out, "gradcheck", sys.argv[1:],
                        {"blocks": sorted(blocks)}, started,
                        ["gradcheck.csv"])
    if failed:
        raise ContractError(f"gradient check failed: {', '.join(failed)}")
    return 0


def cmd_schedule_dump(args) -> int:
    started = time.time()
    ensure_dir(args.out)
    sched = build_cosine_schedule(args.timesteps)
    rows = [(t, f"{sched.beta[t]:.17g}" if t < sched.T else "",
             f"{sched.alpha_bar[t]:.17g}") for t in range(sched.T + 1)]
    _write_csv(os.path.join(args.out, "schedule.csv"),
               ("t", "beta", "alpha_bar"), rows)
    _write_run_manifest(args.out, "schedule-dump", sys.argv[1:],
                        {"timesteps": args.timesteps}, started,
                        ["schedule.csv"])
    print(f"wrote schedule.csv with {sched.T + 1} rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxdet",
        description="Diffusion-based detector: data, training, sampling, "
                    "metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--config", default=None,
                       help="JSON file overriding detector config fields")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--min-instances", type=int, default=1)
    p.add_argument("--max-instances", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--resume", default=None)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score detections against a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--detections", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run the sampler over a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ddim-steps", type=int, default=None)
    p.add_argument("--trace", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference audit")
    common(p)
    p.add_argument("--block", default=None)
    p.add_argument("--inject-failure", action="store_true",
                   help="corrupt one backward pass; must report FAIL")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("schedule-dump", help="write the noise schedule CSV")
    common(p)
    p.add_argument("--timesteps", type=int, default=1000)
    p.set_defaults(func=cmd_schedule_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
