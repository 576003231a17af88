"""Comparison, GELU ablation and size/traffic reports.

Each function returns plain rows (dicts with a fixed key order) so the CLI
only formats what the library computed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .calib import CalibrationPlan, calibrate
from .container import checkpoint_bytes
from .intkernels import GeluConfig
from .model import FP32, INT, Checkpoint, TraceMeters, forward, quantize_image, traffic_report
from .qcore import dequantize
from .reference import Variant, fp32_forward, logit_similarity, miou, rmse_g, agreement

COMPARE_COLUMNS = ("l2_norm", "interp", "rmse_g", "logit_cosine", "pixel_agreement", "miou_a", "miou_b")
ABLATE_COLUMNS = ("config", "variant", "lambda", "k_inter", "rmse_g", "tail_fraction", "ratio_to_baseline")
STATS_COLUMNS = (
    "model", "mode", "file_bytes", "fp32_bytes", "int8_bytes", "int16_bytes", "int32_bytes",
    "traffic_bits", "fp32_equiv_bits", "traffic_ratio",
)
VARIANT_GRID = [(l2, interp) for l2 in (False, True) for interp in ("nearest", "bilinear")]


@dataclass
class RunResult:
    class_map: np.ndarray
    logits: np.ndarray  # real-valued
    activations: list  # real-valued post-GELU per block
    meters: TraceMeters


def run(ckpt: Checkpoint, image, variant: Variant = Variant()) -> RunResult:
    """Forward pass in the checkpoint's own mode, results as real arrays.

    Integer checkpoints ignore ``variant``: their graph is fixed.
    """
    if ckpt.mode == INT:
        record = []
        cmap, logits, meters = forward(quantize_image(image), ckpt, record=record)
        acts = [dequantize(g) for _, g in record]
        return RunResult(cmap, dequantize(logits), acts, meters)
    r = fp32_forward(image, ckpt, variant)
    return RunResult(r.class_map, r.logits, [a for _, a in r.activations], r.meters)


def compare_rows(a: Checkpoint, b: Checkpoint, samples) -> list[dict]:
    """One row per {L2, interpolation} variant comparing two checkpoints.

    ``samples`` holds ``(image, label-or-None)`` pairs; mIoU columns are NaN
    without labels.
    """
    samples = list(samples)
    rows = []
    for l2, interp in VARIANT_GRID:
        v = Variant(l2_norm=l2, interp=interp)
        fa, fb, cos, agr, ma, mb = [], [], [], [], [], []
        for image, label in samples:
            ra, rb = run(a, image, v), run(b, image, v)
            fa.append(ra.activations)
            fb.append(rb.activations)
            cos.append(logit_similarity(ra.logits, rb.logits))
            agr.append(agreement(ra.class_map, rb.class_map))
            if label is not None:
                ma.append(miou(ra.class_map, label, a.config.K)[1])
                mb.append(miou(rb.class_map, label, b.config.K)[1])
        blocks = len(fa[0])
        rep = rmse_g([[s[i] for s in fa] for i in range(blocks)], [[s[i] for s in fb] for i in range(blocks)])
        rows.append({
            "l2_norm": int(l2),
            "interp": interp,
            "rmse_g": rep.rmse_g,
            "logit_cosine": float(np.mean(cos)),
            "pixel_agreement": float(np.mean(agr)),
            "miou_a": float(np.mean(ma)) if ma else float("nan"),
            "miou_b": float(np.mean(mb)) if mb else float("nan"),
        })
    return rows


def gelu_fidelity(fp32: Checkpoint, int_ckpt: Checkpoint, images) -> tuple[float, float]:
    """RMSE_G of integer post-GELU activations against the sigmoid-form GELU.

    Also returns the fraction of pre-GELU inputs below -8.
    """
    fa, fi = [], []
    below, total = 0, 0

    def tail(name, x):
        nonlocal below, total
        if name.endswith(".fc1"):
            below += int(np.count_nonzero(x < -8.0))
            total += x.size

    for image in images:
        r = fp32_forward(image, fp32, Variant(gelu="sigmoid"), hook=tail)
        fa.append([a for _, a in r.activations])
        fi.append(run(int_ckpt, image).activations)
    blocks = len(fa[0])
    rep = rmse_g([[s[i] for s in fa] for i in range(blocks)], [[s[i] for s in fi] for i in range(blocks)])
    return rep.rmse_g, below / max(total, 1)


def ablate_gelu_rows(fp32: Checkpoint, calib_images, eval_images, lambdas=(1, 6), k_inter: int = 23,
                     alpha: float = 0.05, name: str = "model") -> list[dict]:
    """RMSE_G per GELU lambda for one float checkpoint.

    Calibration does not depend on the GELU choice, so one calibrated table is
    reused with each lambda.
    """
    calib_images = list(calib_images)
    eval_images = list(eval_images)
    plan = CalibrationPlan.for_config(fp32.config, alpha=alpha, samples=len(calib_images),
                                      gelu=GeluConfig(k_inter=k_inter))
    base = calibrate(fp32, calib_images, plan)
    rows, baseline = [], None
    for lam in lambdas:
        ckpt = base.with_config(gelu=replace(base.config.gelu, lam=int(lam)))
        err, frac = gelu_fidelity(fp32, ckpt, eval_images)
        if lam == 1:
            baseline = err
        rows.append({
            "config": name,
            "variant": "baseline" if lam == 1 else "lambda",
            "lambda": int(lam),
            "k_inter": k_inter,
            "rmse_g": err,
            "tail_fraction": frac,
        })
    for row in rows:
        row["ratio_to_baseline"] = row["rmse_g"] / baseline if baseline else float("nan")
    return rows


def size_by_dtype(ckpt: Checkpoint) -> dict[str, int]:
    out = {"fp32": 0, "int8": 0, "int16": 0, "int32": 0}
    key = {"f": "fp32"}
    for e in ckpt.tensors.values():
        name = key.get(e.data.dtype.kind, f"int{e.data.dtype.itemsize * 8}")
        out[name] += e.data.nbytes
    return out


def traffic_for(ckpt: Checkpoint) -> dict:
    """Analytic traffic of one forward pass at the checkpoint's input shape."""
    cfg = ckpt.config
    image = np.zeros((cfg.image_h, cfg.image_w, cfg.channels), dtype=np.float32)
    return traffic_report(run(ckpt, image).meters, ckpt)


def stats_row(ckpt: Checkpoint, name: str = "model") -> dict:
    sizes = size_by_dtype(ckpt)
    t = traffic_for(ckpt)
    total = t["total"]
    fp32_bits = t["fp32_total"]
    return {
        "model": name,
        "mode": ckpt.mode,
        "file_bytes": len(checkpoint_bytes(ckpt)),
        "fp32_bytes": sizes["fp32"],
        "int8_bytes": sizes["int8"],
        "int16_bytes": sizes["int16"],
        "int32_bytes": sizes["int32"],
        "traffic_bits": total,
        "fp32_equiv_bits": fp32_bits,
        "traffic_ratio": fp32_bits / total if total else float("nan"),
    }


def size_ratio(fp32: Checkpoint, int_ckpt: Checkpoint) -> float:
    """Serialized FP32 size over serialized INT size."""
    return len(checkpoint_bytes(fp32)) / len(checkpoint_bytes(int_ckpt))


def format_csv(rows, columns) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    lines = [",".join(columns)]
    lines += [",".join(fmt(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def write_csv(rows, columns, path=None) -> str:
    text = format_csv(rows, columns)
    if path is not None:
        Path(path).write_text(text)
    return text
