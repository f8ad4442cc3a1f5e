"""Command-line surface.

Subcommands: gen, train, infer, eval, lightfit, relight, ablate, report.
Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
failure. All file outputs are written atomically (temp + rename).
"""

import argparse
import io
import json
import os
import sys

import numpy as np
import torch
from PIL import Image

from . import evaluate, flow, genrender, lightfit, scenegen, training
from .errors import DataFormatError, FlowirError, NumericalError, UsageError
from .model import (
    CONDITION_NAMES,
    load_checkpoint,
    model_from_checkpoint,
    parameter_counts,
)
from .tensorio import atomic_write_bytes, read_tensor, write_tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_text(path, text):
    atomic_write_bytes(path, text.encode())


def preview_u8(arr, kind, far=scenegen.FAR_PLANE):
    """Map a float map to displayable uint8 (gamma-less, per-kind range)."""
    arr = np.asarray(arr, dtype=np.float32)
    if kind == "normal":
        arr = (arr + 1.0) / 2.0
    elif kind == "depth":
        arr = arr / far
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def write_png(path, arr_u8):
    img = Image.fromarray(arr_u8)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def _load_train_config(args):
    """Resolve TrainConfig: defaults < --config file < explicit flags."""
    values = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            doc = json.load(fh)
        valid = set(training.TrainConfig().to_dict())
        unknown = set(doc) - valid
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    for key in training.TrainConfig().to_dict():
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    cfg = training.TrainConfig(**values)
    return cfg.validate()


def _echo_config(path, cfg_dict):
    _write_text(path, json.dumps(cfg_dict, indent=2, sort_keys=True) + "\n")


def cmd_gen(args):
    manifest = scenegen.generate_corpus(
        args.train, args.test, (args.res, args.res), args.seed, args.out,
        jobs=args.jobs, shadows=args.shadows,
    )
    print(f"corpus written to {args.out}: {manifest['n_train']} train / {manifest['n_test']} test")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_train_config(args)
    torch.set_num_threads(max(1, args.jobs))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    log_csv = args.log or (args.out + ".train_log.csv")
    result = training.train_run(args.corpus, cfg, out_ckpt=args.out, log_csv=log_csv)
    _echo_config(args.out + ".config.json", cfg.to_dict())
    counts = result["params"]
    print(
        f"trained {cfg.mode} for {cfg.epochs} epochs: final loss {result['final_loss']:.6f}, "
        f"{counts['trainable']}/{counts['total']} trainable params -> {args.out}"
    )
    return EXIT_OK


def _model_and_mode(ckpt_path, mode_override=None):
    ckpt = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(ckpt)
    model.eval()
    mode = mode_override or ckpt.config.get("train", {}).get("mode", "flow")
    return model, mode, ckpt


def _resolve_properties(arg):
    if not arg or arg == "all":
        return list(CONDITION_NAMES)
    props = [p.strip() for p in arg.split(",") if p.strip()]
    for p in props:
        if p not in CONDITION_NAMES:
            raise UsageError(f"unknown property {p!r}; expected subset of {CONDITION_NAMES}")
    return props


def cmd_infer(args):
    props = _resolve_properties(args.property)
    model, mode, _ = _model_and_mode(args.ckpt, args.mode)
    split = training.load_corpus(args.corpus, args.split)
    indices = [args.index] if args.index is not None else list(range(split.n))
    for i in indices:
        if not 0 <= i < split.n:
            raise UsageError(f"sample index {i} outside split of size {split.n}")
    images = split.images()[indices]
    os.makedirs(args.out, exist_ok=True)
    for prop in props:
        maps = evaluate.predict_property(
            model, mode, images, prop,
            euler_steps=args.steps, sampler_steps=args.ddpm_steps,
            seed=args.seed, far=split.far,
        )
        for j, i in enumerate(indices):
            sample_dir = os.path.join(args.out, f"sample_{i:06d}")
            os.makedirs(sample_dir, exist_ok=True)
            write_tensor(os.path.join(sample_dir, f"{prop}.dnt"), maps[j])
            write_png(os.path.join(sample_dir, f"{prop}.png"), preview_u8(maps[j], prop, split.far))
    print(f"wrote predictions for {len(indices)} sample(s) x {len(props)} properties to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    props = _resolve_properties(args.properties)
    model, mode, _ = _model_and_mode(args.ckpt, args.mode)
    split = training.load_corpus(args.corpus, args.split)
    preds = evaluate.predict_all_properties(
        model, mode, split.images(), props,
        euler_steps=args.steps, sampler_steps=args.ddpm_steps,
        seed=args.seed, far=split.far,
    )
    rows = evaluate.evaluate_split(preds, split, props, whdr_pairs=args.whdr_pairs, seed=args.seed)
    _write_text(args.out, evaluate.metrics_csv_text(rows))
    for prop in props:
        agg = next(r for r in rows if r["sample"] == "aggregate" and r["property"] == prop)
        shown = ", ".join(f"{k}={v:.4f}" for k, v in agg.items() if k in evaluate.METRIC_COLUMNS and v is not None)
        print(f"{prop}: {shown}")
    print(f"metrics written to {args.out}")
    return EXIT_OK


def _intrinsics_from_dir(path, far):
    maps = {}
    for name in ("albedo", "metallic", "roughness", "normal", "depth"):
        f = os.path.join(path, f"{name}.dnt")
        if not os.path.exists(f):
            raise DataFormatError("missing intrinsic map", path=f)
        maps[name] = read_tensor(f)
    mask_path = os.path.join(path, "mask.dnt")
    mask = read_tensor(mask_path)[..., 0] > 0.5 if os.path.exists(mask_path) else None
    return scenegen.IntrinsicSet(mask=mask, **maps)


def _camera_from_scene(scene_doc):
    cam = scene_doc["camera"]
    return scenegen.Camera(
        position=np.asarray(cam["position"], dtype=np.float64),
        look_at=np.asarray(cam["look_at"], dtype=np.float64),
        fov_deg=float(cam["fov_deg"]),
    )


def cmd_lightfit(args):
    split = training.load_corpus(args.corpus, args.split)
    if not 0 <= args.index < split.n:
        raise UsageError(f"sample index {args.index} outside split of size {split.n}")
    scene_doc = split.scene_json(args.index)
    camera = _camera_from_scene(scene_doc)
    image = split.images()[args.index]

    if args.ckpt:
        model, mode, _ = _model_and_mode(args.ckpt)
        if mode != "flow":
            raise UsageError("lightfit prediction needs a flow-mode checkpoint")
        maps = {
            p: evaluate.predict_property(
                model, mode, image, p, euler_steps=args.steps, far=split.far
            )[0]
            for p in CONDITION_NAMES
        }
        intr = scenegen.IntrinsicSet(**maps)
        intr.mask = split.intrinsics(args.index).mask  # known camera/mask, per flag
    else:
        intr = split.intrinsics(args.index)

    rng = np.random.default_rng(args.seed)
    gt_lights = scene_doc["lights"]
    positions = np.asarray([l["position"] for l in gt_lights], dtype=np.float64)
    intensities = np.asarray([l["intensity"] for l in gt_lights], dtype=np.float64)
    ambient = float(scene_doc["ambient"])
    if args.perturb > 0:
        positions = positions * (1 + rng.uniform(-args.perturb, args.perturb, positions.shape))
        intensities = intensities * (1 + rng.uniform(-args.perturb, args.perturb, intensities.shape))
        ambient = ambient * (1 + float(rng.uniform(-args.perturb, args.perturb)))
    init = lightfit.LightParams(positions, np.maximum(intensities, 0), max(ambient, 0.0))

    fitted, loss = lightfit.fit_lights(image, intr, camera, init, iters=args.iters, lr=args.lr)
    lightfit.save_lights(args.out, fitted, final_loss=loss, iters=args.iters)
    print(f"fitted {len(fitted.positions)} light(s), final loss {loss:.3e} -> {args.out}")
    return EXIT_OK


def cmd_relight(args):
    split = training.load_corpus(args.corpus, args.split)
    if not 0 <= args.index < split.n:
        raise UsageError(f"sample index {args.index} outside split of size {split.n}")
    scene_doc = split.scene_json(args.index)
    camera = _camera_from_scene(scene_doc)
    if args.intrinsics_dir:
        intr = _intrinsics_from_dir(args.intrinsics_dir, split.far)
    else:
        intr = split.intrinsics(args.index)
    if args.albedo_tint:
        tint = np.asarray([float(v) for v in args.albedo_tint.split(",")], dtype=np.float32)
        if tint.shape != (3,):
            raise UsageError("--albedo-tint expects r,g,b")
        intr.albedo = np.clip(intr.albedo * tint[None, None, :], 0.0, 1.0)
    params = lightfit.load_lights(args.lights)
    image = lightfit.relight(intr, camera, params)
    write_tensor(args.out, image)
    write_png(os.path.splitext(args.out)[0] + ".png", preview_u8(image, "image"))
    print(f"relit image written to {args.out}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_train_config(args)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    for arm in arms:
        if arm not in ("flow", "noise_flow", "image_ddpm_v", "ddpm_baseline"):
            raise UsageError(f"unknown ablation arm {arm!r}")
    seeds = [int(s) for s in args.seeds.split(",")]
    props = _resolve_properties(args.properties)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(os.path.join(args.out, "ablate.config.json"),
                 {**cfg.to_dict(), "arms": arms, "seeds": seeds, "properties": props})

    train_split = training.load_corpus(args.corpus, "train")
    test_split = training.load_corpus(args.corpus, "test")

    import dataclasses

    results = {}
    params_by_arm = {}
    sweep_rows = []
    for arm in arms:
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, mode=arm, seed=seed)
            ckpt = os.path.join(args.out, f"{arm}_seed{seed}.dnfc")
            log = os.path.join(args.out, f"{arm}_seed{seed}.train_log.csv")
            res = training.train_run(train_split, run_cfg, out_ckpt=ckpt, log_csv=log)
            model = res["model"]
            model.eval()
            params_by_arm[arm] = res["params"]["trainable"]
            preds = evaluate.predict_all_properties(
                model, arm, test_split.images(), props,
                euler_steps=cfg.euler_steps, sampler_steps=cfg.sampler_steps,
                seed=seed, far=test_split.far,
            )
            rows = evaluate.evaluate_split(preds, test_split, props, seed=seed)
            for prop in props:
                psnr_v = evaluate.aggregate_value(rows, prop, "psnr")
                ssim_v = evaluate.aggregate_value(rows, prop, "ssim")
                results.setdefault((arm, prop), []).append((psnr_v, ssim_v))
            print(f"[ablate] {arm} seed {seed} done")
            if args.sweep_arm == arm and seed == seeds[0] and args.sweep_steps:
                steps_list = [int(s) for s in args.sweep_steps.split(",")]
                for k, v in evaluate.step_sweep(model, arm, test_split, steps_list, seed=seed):
                    sweep_rows.append((arm, k, v))

    lines = ["arm,property,seeds,params_trainable,psnr_mean,psnr_std,ssim_mean,ssim_std"]
    for arm in arms:
        for prop in props:
            vals = results[(arm, prop)]
            psnrs = [v[0] for v in vals if v[0] is not None]
            ssims = [v[1] for v in vals if v[1] is not None]
            lines.append(
                ",".join(
                    [
                        arm,
                        prop,
                        str(len(seeds)),
                        str(params_by_arm[arm]),
                        repr(float(np.mean(psnrs))) if psnrs else "",
                        repr(float(np.std(psnrs))) if psnrs else "",
                        repr(float(np.mean(ssims))) if ssims else "",
                        repr(float(np.std(ssims))) if ssims else "",
                    ]
                )
            )
    _write_text(os.path.join(args.out, "ablation.csv"), "\n".join(lines) + "\n")
    if sweep_rows:
        sw = ["arm,steps,albedo_psnr"] + [f"{a},{k},{v!r}" for a, k, v in sweep_rows]
        _write_text(os.path.join(args.out, "sweep.csv"), "\n".join(sw) + "\n")
    print(f"ablation results written to {args.out}/ablation.csv")
    return EXIT_OK


def _render_csv_table(path):
    with open(path) as fh:
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    if not rows:
        return f"(empty: {path})"
    widths = [max(len(r[i]) if i < len(r) else 0 for r in rows) for i in range(len(rows[0]))]

    def fmt_cell(cell):
        try:
            return f"{float(cell):.4f}"
        except ValueError:
            return cell

    out = []
    for ri, r in enumerate(rows):
        cells = [fmt_cell(c) if ri > 0 else c for c in r]
        out.append("  ".join(c.ljust(widths[i] + 2) for i, c in enumerate(cells)))
    return "\n".join(out)


def cmd_report(args):
    sections = []
    for label, path in (("metrics", args.metrics), ("ablation", args.ablation), ("step sweep", args.sweep)):
        if path:
            if not os.path.exists(path):
                raise DataFormatError("report input not found", path=path)
            sections.append(f"== {label} ({path}) ==\n{_render_csv_table(path)}")
    if not sections:
        raise UsageError("report needs at least one of --metrics/--ablation/--sweep")
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "report.txt"), "\n\n".join(sections) + "\n")
    if args.sweep:
        with open(args.sweep) as fh:
            _write_text(os.path.join(args.out, "sweep_curve.csv"), fh.read())
    print(f"report written to {args.out}/report.txt")
    return EXIT_OK


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--mode", choices=training.MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=("constant", "cosine"))
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-rec", dest="lambda_rec", type=float)
    p.add_argument("--rec-warmup-epochs", dest="rec_warmup_epochs", type=int)
    p.add_argument("--renderer", dest="renderer_ckpt")
    p.add_argument("--adapter-mode", dest="adapter_mode", choices=training.ADAPTER_MODES)
    p.add_argument("--base-ckpt", dest="base_ckpt")
    p.add_argument("--lora-rank", dest="lora_rank", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--depth-levels", dest="depth_levels", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--euler-steps", dest="euler_steps", type=int)
    p.add_argument("--sampler-steps", dest="sampler_steps", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dnf", description="deterministic image-to-intrinsic flow matching toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--shadows", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one arm")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.dnfc)")
    p.add_argument("--log", help="training log CSV path")
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict intrinsic maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, help="sample index; omit for the whole split")
    p.add_argument("--property", default="all")
    p.add_argument("--steps", type=int, default=flow.DEFAULT_EULER_STEPS)
    p.add_argument("--ddpm-steps", dest="ddpm_steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=training.MODES, help="override arm recorded in checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--properties", default="all")
    p.add_argument("--steps", type=int, default=flow.DEFAULT_EULER_STEPS)
    p.add_argument("--ddpm-steps", dest="ddpm_steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--whdr-pairs", dest="whdr_pairs", type=int, default=evaluate.DEFAULT_WHDR_PAIRS)
    p.add_argument("--mode", choices=training.MODES)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="metrics.csv path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lightfit", help="fit point lights by reconstruction")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--ckpt", help="flow checkpoint: fit on predicted intrinsics")
    p.add_argument("--steps", type=int, default=flow.DEFAULT_EULER_STEPS)
    p.add_argument("--perturb", type=float, default=0.1, help="relative init perturbation")
    p.add_argument("--iters", type=int, default=400)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="lights.json path")
    p.set_defaults(func=cmd_lightfit)

    p = sub.add_parser("relight", help="re-render intrinsics under fitted lights")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--lights", required=True, help="lights.json from dnf lightfit")
    p.add_argument("--intrinsics-dir", dest="intrinsics_dir",
                   help="directory of edited .dnt maps (defaults to corpus ground truth)")
    p.add_argument("--albedo-tint", dest="albedo_tint", help="r,g,b multiplier for material editing")
    p.add_argument("--out", required=True, help="output image .dnt path")
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("ablate", help="train and evaluate an arm matrix")
    p.add_argument("--corpus", required=True)
    p.add_argument("--arms", required=True, help="comma list: flow,noise_flow,image_ddpm_v,ddpm_baseline")
    p.add_argument("--seeds", default="0", help="comma list of master seeds")
    p.add_argument("--properties", default="albedo")
    p.add_argument("--sweep-arm", dest="sweep_arm", help="arm to run the step sweep on")
    p.add_argument("--sweep-steps", dest="sweep_steps", help="comma list of step counts")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render CSV outputs into plain-text tables")
    p.add_argument("--metrics")
    p.add_argument("--ablation")
    p.add_argument("--sweep")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dnf {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataFormatError as exc:
        print(f"dnf {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"dnf {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FlowirError as exc:
        print(f"dnf {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"dnf {args.command}: i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
