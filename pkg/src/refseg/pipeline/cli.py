"""Command-line surface: gen-data, train, infer, eval, gradcheck, selftest."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .. import metrics as M
from ..losses import hungarian, dice_loss, focal_loss, diversity_loss
from ..tensor import Tensor
from . import report as rp
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, Config, load_config, save_config
from .data import generate_dataset, load_dataset, mask_to_rle, save_dataset
from .model import Model
from .train import train


def _resolve_config(args) -> Config:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[args.preset]()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _add_common(p, checkpoint=False, data=False, out=True):
    p.add_argument("--config", help="config file (overrides --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=None)
    if out:
        p.add_argument("--out", required=True, help="output directory")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    if data:
        p.add_argument("--data", required=True, help="dataset directory")


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    count = args.clips if args.clips is not None else cfg.data.clips
    clips = generate_dataset(cfg, cfg.seed, count)
    save_dataset(clips, args.out, cfg, cfg.seed)
    save_config(cfg, os.path.join(args.out, "config.txt"))
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    clips = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.time()
    result = train(cfg, clips, log_path=os.path.join(args.out, "loss_log.tsv"))
    save_checkpoint(os.path.join(args.out, "checkpoint"), result.model,
                    step=result.steps, rng_state=result.final_rng_state)
    rp.save_loss_curves(result.log_lines, os.path.join(args.out, "loss_curve.png"))
    first = result.log_lines[1].split("\t")[-1]
    last = result.log_lines[-1].split("\t")[-1]
    print(f"trained {result.steps} steps in {time.time() - t0:.1f}s "
          f"(total loss {first} -> {last}); checkpoint in {args.out}/checkpoint")
    return 0


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    clips = load_dataset(args.data)
    wanted = args.clip_id
    matching = [c for c in clips if wanted in (None, c.clip_id)]
    if not matching:
        print(f"no clip named {wanted!r} in {args.data}", file=sys.stderr)
        return 1
    clip = matching[0]
    masks, confidence, _ = model.infer(clip.frames, clip.tokens)
    os.makedirs(args.out, exist_ok=True)
    for ti in range(masks.shape[0]):
        with open(os.path.join(args.out, f"pred_frame_{ti:03d}.rle"), "w",
                  encoding="utf-8") as fh:
            fh.write(mask_to_rle(masks[ti]))
    with open(os.path.join(args.out, "confidence.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{confidence:.6f}\n")
    rp.save_overlay(clip.frames, masks, os.path.join(args.out, "overlay.png"),
                    gt_masks=clip.gt.masks[0] if clip.gt.n else None)
    print(f"clip {clip.clip_id}: confidence {confidence:.4f}; outputs in {args.out}")
    return 0


def evaluate_model(model: Model, clips: list) -> tuple[M.MetricsReport, list]:
    """Run inference over clips and aggregate per-frame metric samples."""
    samples = []
    for clip in clips:
        masks, confidence, _ = model.infer(clip.frames, clip.tokens)
        for ti in range(masks.shape[0]):
            samples.append(M.SamplePrediction(pred=masks[ti],
                                              gt=clip.gt.masks[0, ti],
                                              confidence=confidence))
    return M.evaluate(samples), samples


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    clips = load_dataset(args.data)
    report, samples = evaluate_model(model, clips)
    os.makedirs(args.out, exist_ok=True)
    text = M.serialize_report(report)
    with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    rp.save_metrics_figure(report, os.path.join(args.out, "metrics_bar.png"))
    rp.save_iou_histogram([M.iou(s.pred, s.gt) for s in samples],
                          os.path.join(args.out, "iou_hist.png"))
    print(text, end="")
    print(f"report and figures in {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from ..gradsuite import composed_path_check, op_checks

    worst = 0.0
    t0 = time.time()
    for seed in range(args.seeds):
        for rep in op_checks(100 + seed):
            worst = max(worst, rep.max_rel_error)
            if seed == 0:
                print(f"  {rep.op:<30s} {rep.max_rel_error:.3e}")
    for seed in range(args.seeds):
        rep = composed_path_check(1000 + seed)
        worst = max(worst, rep.max_rel_error)
        print(f"  {rep.op} seed {seed}: {rep.max_rel_error:.3e}")
    ok = worst <= 1e-4
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max rel error {worst:.3e} "
          f"over {args.seeds} seeds in {time.time() - t0:.1f}s")
    return 0 if ok else 1


def cmd_selftest(args) -> int:
    import itertools
    import math

    failures = 0

    def check(name, cond):
        nonlocal failures
        print(f"  [{'PASS' if cond else 'FAIL'}] {name}")
        failures += 0 if cond else 1

    g = np.random.default_rng(0)
    ok = True
    for _ in range(100):
        k = int(g.integers(1, 7))
        n = int(g.integers(1, k + 1))
        cost = g.normal(size=(n, k))
        res = hungarian(cost)
        best = min((sum(float(cost[i, p[i]]) for i in range(n)), p)
                   for p in itertools.permutations(range(k), n))
        ok &= res.total_cost == best[0]
    check("hungarian equals brute force (100 random)", ok)

    m = (g.random((8, 8)) > 0.5).astype(float)
    check("dice(p, p) == 0", dice_loss(Tensor(m), m).data == 0.0)
    got = focal_loss(Tensor(np.array([[0.5]])), np.array([[1.0]])).data
    check("focal closed form", abs(got + 0.25 * 0.25 * math.log(0.5)) < 1e-15)
    q, _ = np.linalg.qr(g.normal(size=(8, 8)))
    z = Tensor(q[None, :4, :])
    div = diversity_loss(z, z, z, Tensor(np.eye(8))).data
    check("diversity with orthonormal kernels == C0", abs(div - 8.0) < 1e-9)

    pred = np.zeros((1, 30), dtype=np.uint8)
    gt = np.zeros((1, 30), dtype=np.uint8)
    pred[0, :18] = 1
    gt[0, :25] = 1
    s = [M.SamplePrediction(pred, gt, 0.9)]
    check("mAP single-sample case", abs(M.mean_average_precision(s) - 0.5) < 1e-12)
    check("F identical masks == 1",
          M.contour_accuracy_f(gt.reshape(5, 6), gt.reshape(5, 6)) == 1.0)

    from .config import desk_preset
    cfg = desk_preset()
    cfg.dims.t, cfg.dims.h, cfg.dims.w = 1, 32, 32
    model = Model.init(cfg, np.random.default_rng(1))
    frames = (g.random((1, 32, 32, 3)) * 255).astype(np.uint8)
    p1 = model.forward(frames, ["the", "red", "square"]).mask_probs.data
    p2 = model.forward(frames, ["the", "red", "square"]).mask_probs.data
    check("forward deterministic", np.array_equal(p1, p2))
    check("mask probs in (0,1)", bool(np.all((p1 > 0) & (p1 < 1))))

    print(f"selftest: {'all good' if failures == 0 else f'{failures} failures'}")
    return 0 if failures == 0 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="refseg",
        description="Referring video object segmentation at desk scale: "
                    "synthetic data, training, inference and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--clips", type=int, default=None, help="number of clips")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    _add_common(p, data=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="segment one clip with a checkpoint")
    _add_common(p, checkpoint=True, data=True)
    p.add_argument("--clip-id", default=None, help="clip to segment (default: first)")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p, checkpoint=True, data=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("selftest", help="quick oracle and invariant checks")
    p.set_defaults(fn=cmd_selftest)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
