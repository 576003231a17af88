"""``iseg`` command line."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import reports
from .calib import CalibrationPlan, calibrate
from .container import load_checkpoint, save_checkpoint, save_tensor, write_pgm
from .errors import ISegError, InvalidInputError, ModeError
from .intkernels import GeluConfig
from .model import FP32, INT, TOY_CONFIGS, TraceMeters, forward, quantize_image
from .qcore import dequantize
from .reference import Variant, fp32_forward
from .synth import load_dataset, load_image, structured_checkpoint, synth_dataset, write_dataset


def cmd_synth(args) -> int:
    base = TOY_CONFIGS[args.config]
    if args.size % base.patch:
        raise InvalidInputError(f"size {args.size} is not divisible by patch {base.patch}")
    pairs = synth_dataset(args.n, args.classes, args.size, args.seed)
    write_dataset(args.out, pairs)
    print(f"wrote {len(pairs)} image/label pairs to {args.out}")
    if args.model_out:
        cfg = replace(base, K=args.classes, image_h=args.size, image_w=args.size)
        ckpt = structured_checkpoint(cfg, pairs, seed=args.seed)
        n = save_checkpoint(ckpt, args.model_out)
        print(f"wrote FP32 model {args.model_out} ({n} bytes)")
    return 0


def cmd_calibrate(args) -> int:
    fp32 = load_checkpoint(args.model)
    if fp32.mode != FP32:
        raise ModeError(f"{args.model} is not an FP32 checkpoint")
    data = load_dataset(args.data, args.samples)
    if len(data) < args.samples:
        raise FileNotFoundError(f"{args.data} holds {len(data)} samples, {args.samples} requested")
    plan = CalibrationPlan.for_config(
        fp32.config, alpha=args.alpha, samples=args.samples,
        gelu=replace(fp32.config.gelu, lam=args.lam, k_inter=args.k_inter),
    )
    t0 = time.perf_counter()
    ckpt = calibrate(fp32, (img for _, img, _ in data), plan)
    elapsed = time.perf_counter() - t0
    n = save_checkpoint(ckpt, args.out)
    print(f"calibrated on {args.samples} sample(s) in {elapsed:.3f} s")
    print(f"wrote INT model {args.out} ({n} bytes, {Path(args.model).stat().st_size / n:.2f}x smaller)")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.model)
    mode = args.mode.upper()
    if mode != ckpt.mode:
        raise ModeError(f"{mode} inference requested but {args.model} is a {ckpt.mode} checkpoint")
    image = load_image(args.image, ckpt.config)
    if mode == INT:
        cmap, logits, meters = forward(quantize_image(image), ckpt, TraceMeters())
        real_logits = dequantize(logits)
    else:
        r = fp32_forward(image, ckpt, Variant())
        cmap, real_logits, meters = r.class_map, r.logits, r.meters
    write_pgm(args.out, cmap.astype(np.uint8))
    if args.logits:
        save_tensor(real_logits.astype(np.float32), args.logits, name="logits")
    if args.trace_fp_ops:
        print(f"fp_ops={meters.fp_ops}")
        if mode == INT and meters.fp_ops != 0:
            raise ModeError(f"integer inference performed {meters.fp_ops} floating-point operations")
    print(f"wrote class map {args.out}")
    return 0


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def cmd_compare(args) -> int:
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    data = load_dataset(args.data, args.samples)
    rows = reports.compare_rows(a, b, [(img, lbl) for _, img, lbl in data])
    _emit(reports.format_csv(rows, reports.COMPARE_COLUMNS), args.out)
    return 0


def cmd_ablate_gelu(args) -> int:
    lambdas = [int(x) for x in args.lambdas.split(",")]
    rows = []
    for path in args.model:
        fp32 = load_checkpoint(path)
        if fp32.mode != FP32:
            raise ModeError(f"{path} is not an FP32 checkpoint")
        data = load_dataset(args.data)
        images = [img for _, img, _ in data]
        rows += reports.ablate_gelu_rows(
            fp32, images[: args.samples], images, lambdas, args.k_inter, args.alpha, Path(path).stem
        )
    _emit(reports.format_csv(rows, reports.ABLATE_COLUMNS), args.out)
    return 0


def cmd_stats(args) -> int:
    ckpts = [load_checkpoint(p) for p in args.model]
    rows = [reports.stats_row(c, Path(p).stem) for c, p in zip(ckpts, args.model)]
    text = reports.format_csv(rows, reports.STATS_COLUMNS)
    modes = {c.mode: c for c in ckpts}
    if len(ckpts) == 2 and set(modes) == {FP32, INT}:
        text += f"size_ratio,{reports.size_ratio(modes[FP32], modes[INT]):.6g}\n"
    _emit(text, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iseg", description="Integer-only segmentation transformer tools")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", choices=sorted(TOY_CONFIGS), default="d32-l2-k2")
    p.add_argument("--model-out", help="also fit and write a structured FP32 model")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="post-training calibration to an INT model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--lambda", dest="lam", type=int, default=6)
    p.add_argument("--k-inter", type=int, default=23)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("infer", help="segment one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="class map (PGM)")
    p.add_argument("--logits", help="optional logits tensor file")
    p.add_argument("--mode", choices=("int", "fp32"), default="int")
    p.add_argument("--trace-fp-ops", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("compare", help="compare two models over the L2/interpolation variants")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate-gelu", help="GELU fidelity per lambda")
    p.add_argument("--model", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=1, help="calibration samples")
    p.add_argument("--lambdas", default="1,6")
    p.add_argument("--k-inter", type=int, default=23)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate_gelu)

    p = sub.add_parser("stats", help="tensor sizes and memory traffic")
    p.add_argument("--model", required=True, nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ISegError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
