"""Batched inference for every arm plus the metrics table for a test split."""

import numpy as np
import torch

from . import flow, metrics
from .ddpm import NoiseSchedule, sample_noise_to_intrinsic
from .errors import UsageError
from .model import CONDITION_NAMES, ConditionId, condition_index
from .scenegen import FAR_PLANE

METRIC_COLUMNS = ("psnr", "ssim", "ae_deg", "amre", "whdr")
CSV_HEADER = "sample,property," + ",".join(METRIC_COLUMNS)
DEFAULT_WHDR_PAIRS = 100


@torch.no_grad()
def predict_property(
    model,
    mode,
    images,
    cond,
    euler_steps=flow.DEFAULT_EULER_STEPS,
    sampler_steps=50,
    schedule=None,
    seed=0,
    far=FAR_PLANE,
    batch=64,
):
    """Predict one intrinsic property for a stack of images under the given
    arm's sampling paradigm. Returns decoded maps (N,H,W,C)."""
    cond = condition_index(cond) if isinstance(cond, str) else ConditionId(int(cond))
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    outs = []
    for start in range(0, len(images), batch):
        chunk = images[start : start + batch]
        z_img = torch.from_numpy(
            np.stack([flow.encode(im, "image") for im in chunk])
            .transpose(0, 3, 1, 2)
            .astype(np.float32)
        )
        if mode == "flow":
            z1 = flow.euler_integrate(
                lambda z, t, c: model(
                    z,
                    torch.full((z.shape[0],), float(t), dtype=z.dtype),
                    torch.full((z.shape[0],), int(c), dtype=torch.long),
                ),
                z_img,
                euler_steps,
                cond,
            )
        elif mode == "noise_flow":
            rng = np.random.default_rng([int(seed), start])
            z0 = torch.from_numpy(
                rng.standard_normal(size=tuple(z_img.shape)).astype(np.float32)
            )
            z1 = flow.euler_integrate(
                lambda z, t, c: model(
                    torch.cat([z, z_img], dim=1),
                    torch.full((z.shape[0],), float(t), dtype=z.dtype),
                    torch.full((z.shape[0],), int(c), dtype=torch.long),
                ),
                z0,
                euler_steps,
                cond,
            )
        elif mode in ("ddpm_baseline", "image_ddpm_v"):
            if schedule is None:
                schedule = NoiseSchedule()
            z1 = sample_noise_to_intrinsic(
                model,
                z_img,
                cond,
                schedule,
                sampler_steps,
                seed=[int(seed), start],
                parameterization="eps" if mode == "ddpm_baseline" else "v",
            )
        else:
            raise UsageError(f"unknown inference mode {mode!r}")
        latents = z1.numpy().transpose(0, 2, 3, 1)
        outs.append(np.stack([flow.decode(z, cond, far) for z in latents]))
    return np.concatenate(outs, axis=0)


def predict_all_properties(model, mode, images, properties=CONDITION_NAMES, **kw):
    return {p: predict_property(model, mode, images, p, **kw) for p in properties}


def _fmt(v):
    return "" if v is None else repr(float(v))


def sample_metric_row(pred, gt_set, prop, whdr_pairs, whdr_seed):
    """Metric dict for one (sample, property) prediction vs ground truth."""
    row = {c: None for c in METRIC_COLUMNS}
    if prop in ("albedo", "metallic", "roughness"):
        gt = getattr(gt_set, prop)
        row["psnr"] = metrics.psnr(pred, gt)
        row["ssim"] = metrics.ssim(pred, gt)
        if prop == "albedo":
            judgments = metrics.synthesize_judgments(gt, whdr_pairs, whdr_seed)
            rate, _ = metrics.whdr(pred, judgments)
            row["whdr"] = rate
    elif prop == "normal":
        row["ae_deg"] = metrics.angular_error(pred, gt_set.normal, gt_set.mask)
    elif prop == "depth":
        row["amre"] = metrics.amre(pred, gt_set.depth, gt_set.mask, align=True)
    else:
        raise UsageError(f"unknown property {prop!r}")
    return row


def evaluate_split(preds, test_split, properties=CONDITION_NAMES, whdr_pairs=DEFAULT_WHDR_PAIRS, seed=0):
    """Per-sample metric rows plus per-property aggregate rows."""
    rows = []
    for i in range(test_split.n):
        gt_set = test_split.intrinsics(i)
        for prop in properties:
            row = sample_metric_row(preds[prop][i], gt_set, prop, whdr_pairs, [int(seed), i])
            rows.append({"sample": f"sample_{i:06d}", "property": prop, **row})
    for prop in properties:
        agg = {"sample": "aggregate", "property": prop}
        for col in METRIC_COLUMNS:
            vals = [r[col] for r in rows if r["property"] == prop and r[col] is not None]
            agg[col] = float(np.mean(vals)) if vals else None
        rows.append(agg)
    return rows


def metrics_csv_text(rows):
    lines = [CSV_HEADER]
    for r in rows:
        cells = [r["sample"], r["property"]] + [_fmt(r[c]) for c in METRIC_COLUMNS]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def aggregate_value(rows, prop, column):
    for r in rows:
        if r["sample"] == "aggregate" and r["property"] == prop:
            return r[column]
    raise UsageError(f"no aggregate row for {prop}/{column}")


def albedo_psnr(model, mode, test_split, euler_steps=flow.DEFAULT_EULER_STEPS,
                sampler_steps=50, seed=0):
    """Mean test albedo PSNR for one arm; the ablation harness workhorse."""
    preds = predict_property(
        model,
        mode,
        test_split.images(),
        "albedo",
        euler_steps=euler_steps,
        sampler_steps=sampler_steps,
        seed=seed,
        far=test_split.far,
    )
    vals = [
        metrics.psnr(preds[i], test_split.intrinsics(i).albedo) for i in range(test_split.n)
    ]
    return float(np.mean(vals))


def step_sweep(model, mode, test_split, steps_list, seed=0):
    """Albedo PSNR as a function of sampling step count (Fig-9-style data)."""
    out = []
    for k in steps_list:
        if mode in ("flow", "noise_flow"):
            val = albedo_psnr(model, mode, test_split, euler_steps=int(k), seed=seed)
        else:
            val = albedo_psnr(model, mode, test_split, sampler_steps=int(k), seed=seed)
        out.append((int(k), val))
    return out
