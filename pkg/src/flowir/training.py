"""Corpus loading and the shared training loop behind every arm.

Arms (``mode``):
  flow          image-to-intrinsic flow matching (optionally + SDS term)
  noise_flow    image-conditioned noise-to-intrinsic flow matching
  image_ddpm_v  image-conditioned diffusion with v-prediction
  ddpm_baseline image-conditioned diffusion with eps-prediction
  pretrain      image self-reconstruction (base model for adapter ablations)
  renderer      intrinsic-conditioned noise-to-image denoiser

Training is single-threaded over parameter updates; all randomness flows
from one numpy generator plus torch.manual_seed, so a fixed seed reproduces
parameters bit-for-bit on the same machine.
"""

import hashlib
import json
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch

from . import flow, genrender
from .ddpm import NoiseSchedule, v_from
from .errors import DataFormatError, UsageError
from .model import (
    AdamWState,
    ModelConfig,
    N_CONDITIONS,
    OptimizerConfig,
    apply_parameters,
    build_model,
    load_checkpoint,
    model_from_checkpoint,
    named_parameters_canonical,
    optimizer_step,
    parameter_counts,
    save_checkpoint,
    set_trainable,
)
from .scenegen import FAR_PLANE, MANIFEST_NAME, MAP_NAMES, IntrinsicSet
from .tensorio import atomic_write_bytes, read_tensor

MODES = ("flow", "noise_flow", "image_ddpm_v", "ddpm_baseline", "pretrain", "renderer")
IN_CHANNELS = {
    "flow": 3,
    "pretrain": 3,
    "noise_flow": 6,
    "image_ddpm_v": 6,
    "ddpm_baseline": 6,
    "renderer": 12,
}
ADAPTER_MODES = ("scratch", "full_finetune", "lora")
TRAIN_LOG_HEADER = "epoch,step,loss_flow,loss_rec,lr"


@dataclass
class TrainConfig:
    mode: str = "flow"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-2
    lr_schedule: str = "constant"  # constant | cosine
    seed: int = 0
    lambda_rec: float = 0.0
    rec_warmup_epochs: int = 0
    rec_batch: int = 8  # items per step carrying the SDS term (0 = whole batch)
    renderer_ckpt: str = ""
    adapter_mode: str = "scratch"
    base_ckpt: str = ""
    lora_rank: int = 8
    base_channels: int = 16
    depth_levels: int = 3
    embed_dim: int = 64
    euler_steps: int = flow.DEFAULT_EULER_STEPS
    sampler_steps: int = 50
    schedule_steps: int = 1000

    def validate(self):
        if self.mode not in MODES:
            raise UsageError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise UsageError(f"unknown adapter mode {self.adapter_mode!r}")
        if self.adapter_mode != "scratch" and not self.base_ckpt:
            raise UsageError(f"adapter mode {self.adapter_mode!r} needs --base-ckpt")
        if self.lr_schedule not in ("constant", "cosine"):
            raise UsageError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.lambda_rec < 0:
            raise UsageError("lambda_rec must be non-negative")
        if self.lambda_rec > 0 and self.mode == "flow" and not self.renderer_ckpt:
            raise UsageError("lambda_rec > 0 needs a renderer checkpoint")
        if self.epochs < 0 or self.batch_size < 1:
            raise UsageError("invalid epoch or batch size")
        return self

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        cfg = TrainConfig(**d)
        return cfg.validate()


def corpus_fingerprint(corpus_dir):
    path = os.path.join(corpus_dir, MANIFEST_NAME)
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def read_manifest(corpus_dir):
    path = os.path.join(corpus_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataFormatError("corpus manifest not found", path=path)
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("format_version", "n_train", "n_test", "resolution", "seed"):
        if key not in manifest:
            raise DataFormatError(f"manifest missing key {key!r}", path=path)
    return manifest


class CorpusSplit:
    """In-memory view of one corpus split with lazily built model tensors."""

    def __init__(self, corpus_dir, split):
        self.corpus_dir = corpus_dir
        self.split = split
        self.manifest = read_manifest(corpus_dir)
        self.fingerprint = corpus_fingerprint(corpus_dir)
        self.far = float(self.manifest.get("far_plane", FAR_PLANE))
        self.n = int(self.manifest["n_train" if split == "train" else "n_test"])
        self._cache = {}
        self.sample_dirs = [
            os.path.join(corpus_dir, split, f"sample_{i:06d}") for i in range(self.n)
        ]
        for d in self.sample_dirs:
            if not os.path.isdir(d):
                raise DataFormatError("missing sample directory", path=d)

    def _load_maps(self, name):
        return np.stack(
            [read_tensor(os.path.join(d, f"{name}.dnt")) for d in self.sample_dirs]
        )

    def images(self):
        if "images" not in self._cache:
            self._cache["images"] = self._load_maps("image")
        return self._cache["images"]

    def intrinsics(self, index):
        d = self.sample_dirs[index]
        maps = {name: read_tensor(os.path.join(d, f"{name}.dnt")) for name in MAP_NAMES}
        return IntrinsicSet(
            albedo=maps["albedo"],
            metallic=maps["metallic"],
            roughness=maps["roughness"],
            normal=maps["normal"],
            depth=maps["depth"],
            mask=maps["mask"][..., 0] > 0.5,
        )

    def scene_json(self, index):
        with open(os.path.join(self.sample_dirs[index], "scene.json")) as fh:
            return json.load(fh)

    def image_latents(self):
        if "image_latents" not in self._cache:
            z = np.stack([flow.encode(img, "image") for img in self.images()])
            self._cache["image_latents"] = torch.from_numpy(
                z.transpose(0, 3, 1, 2).astype(np.float32)
            )
        return self._cache["image_latents"]

    def intrinsic_latents(self):
        """(N, 5, 3, H, W) float32 tensor indexed by ConditionId order."""
        if "intrinsic_latents" not in self._cache:
            per_prop = []
            for name in ("albedo", "metallic", "roughness", "normal", "depth"):
                maps = self._load_maps(name)
                z = np.stack([flow.encode(m, name, self.far) for m in maps])
                per_prop.append(z.transpose(0, 3, 1, 2).astype(np.float32))
            self._cache["intrinsic_latents"] = torch.from_numpy(
                np.stack(per_prop, axis=1)
            )
        return self._cache["intrinsic_latents"]

    def stacks(self):
        """(N, 9, H, W) ground-truth conditioning stacks."""
        if "stacks" not in self._cache:
            z = self.intrinsic_latents()
            self._cache["stacks"] = torch.cat(
                [z[:, 0], z[:, 1, :1], z[:, 2, :1], z[:, 3], z[:, 4, :1]], dim=1
            )
        return self._cache["stacks"]


def load_corpus(corpus_dir, split="train"):
    return CorpusSplit(corpus_dir, split)


def _as_split(corpus, split="train"):
    if isinstance(corpus, CorpusSplit):
        return corpus
    return load_corpus(corpus, split)


def model_config_for(cfg):
    return ModelConfig(
        in_channels=IN_CHANNELS[cfg.mode],
        out_channels=3,
        base_channels=cfg.base_channels,
        depth_levels=cfg.depth_levels,
        embed_dim=cfg.embed_dim,
        n_conditions=0 if cfg.mode == "renderer" else N_CONDITIONS,
        lora_rank=0,
    )


def _build_training_model(cfg):
    torch.manual_seed(cfg.seed)
    model = build_model(model_config_for(cfg))
    if cfg.adapter_mode != "scratch":
        base = load_checkpoint(cfg.base_ckpt)
        base_mc = ModelConfig.from_dict(base.config["model"])
        if base_mc.in_channels != model.config.in_channels:
            raise DataFormatError(
                f"base checkpoint has {base_mc.in_channels} input channels, "
                f"mode {cfg.mode} needs {model.config.in_channels}"
            )
        apply_parameters(model, base.params, strict=True)
    if cfg.adapter_mode == "lora":
        model.attach_adapters(cfg.lora_rank)
        set_trainable(model, adapter_only=True)
    else:
        set_trainable(model, adapter_only=False)
    return model


def _load_frozen_renderer(cfg):
    ckpt = load_checkpoint(cfg.renderer_ckpt)
    renderer = model_from_checkpoint(ckpt)
    for p in renderer.parameters():
        p.requires_grad = False
    renderer.eval()
    return renderer


def _rng_normal(rng, shape):
    return torch.from_numpy(rng.standard_normal(size=shape).astype(np.float32))


def _batch_loss(model, cfg, data, idx, rng, rng_sds, schedule, renderer, epoch):
    """Forward pass for one batch; returns (total_loss, loss_main, loss_rec).

    The SDS term draws from its own stream (rng_sds) so enabling lambda_rec
    leaves the primary batch/noise sequence untouched: lambda_rec=0 and
    lambda_rec>0 runs with the same seed see identical flow batches.
    """
    b = len(idx)
    z_img = data.image_latents()[idx]
    loss_rec = None

    if cfg.mode == "pretrain":
        t = torch.from_numpy(rng.uniform(size=b).astype(np.float32))
        cond = torch.from_numpy(rng.integers(0, N_CONDITIONS, size=b))
        pred = model(z_img, t, cond)
        loss = ((pred - z_img) ** 2).mean()
        return loss, loss, loss_rec

    if cfg.mode == "renderer":
        stack = data.stacks()[idx]
        t = torch.from_numpy(rng.uniform(size=b).astype(np.float32))
        eps = _rng_normal(rng, tuple(z_img.shape))
        alpha, sigma = schedule.alpha_sigma(t.numpy().astype(np.float64))
        a = torch.from_numpy(alpha.astype(np.float32)).reshape(-1, 1, 1, 1)
        s = torch.from_numpy(sigma.astype(np.float32)).reshape(-1, 1, 1, 1)
        eps_hat = genrender.renderer_eps(model, a * z_img + s * eps, t, stack)
        loss = ((eps_hat - eps) ** 2).mean()
        return loss, loss, loss_rec

    cond = torch.from_numpy(rng.integers(0, N_CONDITIONS, size=b))
    z_intr = data.intrinsic_latents()[idx, cond]

    if cfg.mode == "flow":
        t = torch.from_numpy(rng.uniform(size=b).astype(np.float32))
        batch = flow.FlowBatch(z_img=z_img, z_intr=z_intr, cond=cond, t=t)
        loss = flow.flow_loss(model, batch)
        if cfg.lambda_rec > 0 and epoch >= cfg.rec_warmup_epochs:
            nrec = min(b, cfg.rec_batch) if cfg.rec_batch > 0 else b
            z_rec = z_img[:nrec]
            latents = flow.one_step_latents(model, z_rec)
            stack = genrender.stack_from_latents(latents)
            t_s = torch.from_numpy(rng_sds.uniform(size=nrec).astype(np.float32))
            eps = _rng_normal(rng_sds, tuple(z_rec.shape))
            alpha, sigma = schedule.alpha_sigma(t_s.numpy().astype(np.float64))
            a = torch.from_numpy(alpha.astype(np.float32)).reshape(-1, 1, 1, 1)
            s = torch.from_numpy(sigma.astype(np.float32)).reshape(-1, 1, 1, 1)

            def renderer_fn(z_t, tvec, cond_stack):
                return genrender.renderer_eps(renderer, z_t, tvec, cond_stack)

            grad9, residual = genrender.sds_grad(renderer_fn, z_rec, stack, a, s, t_s, eps)
            loss_rec = (residual**2).mean()
            loss = loss + cfg.lambda_rec * genrender.sds_surrogate_loss(stack, grad9)
        return loss, loss, loss_rec

    if cfg.mode == "noise_flow":
        t = torch.from_numpy(rng.uniform(size=b).astype(np.float32))
        z0 = _rng_normal(rng, tuple(z_intr.shape))
        z_t = z0 * (1 - t.reshape(-1, 1, 1, 1)) + z_intr * t.reshape(-1, 1, 1, 1)
        pred = model(torch.cat([z_t, z_img], dim=1), t, cond)
        loss = ((pred - (z_intr - z0)) ** 2).mean()
        return loss, loss, loss_rec

    if cfg.mode in ("ddpm_baseline", "image_ddpm_v"):
        t_idx = rng.integers(1, schedule.steps + 1, size=b)
        abar = schedule.alpha_bar_table[t_idx - 1]
        a = torch.from_numpy(abar.astype(np.float32)).reshape(-1, 1, 1, 1)
        eps = _rng_normal(rng, tuple(z_intr.shape))
        x_t = a.sqrt() * z_intr + (1 - a).sqrt() * eps
        t = torch.from_numpy((t_idx / schedule.steps).astype(np.float32))
        pred = model(torch.cat([x_t, z_img], dim=1), t, cond)
        target = eps if cfg.mode == "ddpm_baseline" else v_from(z_intr, eps, a)
        loss = ((pred - target) ** 2).mean()
        return loss, loss, loss_rec

    raise UsageError(f"unknown training mode {cfg.mode!r}")


def fit(corpus, cfg, renderer=None):
    """Train one arm; returns (model, log_rows, opt_state, final_loss)."""
    cfg.validate()
    data = _as_split(corpus, "train")
    if data.n == 0:
        raise UsageError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    rng_sds = np.random.default_rng([cfg.seed, 0x5D5])
    model = _build_training_model(cfg)

    needs_schedule = cfg.mode in ("ddpm_baseline", "image_ddpm_v", "renderer") or (
        cfg.mode == "flow" and cfg.lambda_rec > 0
    )
    schedule = NoiseSchedule(cfg.schedule_steps) if needs_schedule else None
    if cfg.mode == "flow" and cfg.lambda_rec > 0 and renderer is None:
        renderer = _load_frozen_renderer(cfg)

    params = named_parameters_canonical(model)
    opt_cfg = OptimizerConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt_state = AdamWState()

    steps_per_epoch = max(1, -(-data.n // cfg.batch_size))
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    rows = []
    global_step = 0
    final_loss = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(data.n)
        if cfg.batch_size > data.n:
            # tiny corpora: fill the batch with repeated samples so every
            # step still sees batch_size independent (t, eps, cond) draws
            order = np.tile(order, -(-cfg.batch_size // data.n))[: cfg.batch_size]
        epoch_main = []
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            for p in model.parameters():
                p.grad = None
            loss, loss_main, loss_rec = _batch_loss(
                model, cfg, data, idx, rng, rng_sds, schedule, renderer, epoch
            )
            loss.backward()
            grads = {
                name: p.grad
                for name, p in params.items()
                if p.requires_grad and p.grad is not None
            }
            if cfg.lr_schedule == "cosine":
                progress = global_step / total_steps
                floor = 0.01 * cfg.lr
                opt_cfg.lr = floor + (cfg.lr - floor) * 0.5 * (1 + np.cos(np.pi * progress))
            optimizer_step(params, grads, opt_state, opt_cfg)
            global_step += 1
            epoch_main.append(float(loss_main.detach()))
            rows.append(
                (
                    epoch,
                    global_step,
                    float(loss_main.detach()),
                    float(loss_rec.detach()) if loss_rec is not None else 0.0,
                    opt_cfg.lr,
                )
            )
        final_loss = float(np.mean(epoch_main)) if epoch_main else float("nan")
    return model, rows, opt_state, final_loss


def write_train_log(path, rows):
    lines = [TRAIN_LOG_HEADER]
    for epoch, step, loss_flow, loss_rec, lr in rows:
        lines.append(f"{epoch},{step},{loss_flow!r},{loss_rec!r},{lr!r}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def train_run(corpus, cfg, out_ckpt=None, log_csv=None, renderer=None):
    """Train an arm and optionally persist checkpoint + training log."""
    data = _as_split(corpus, "train")
    model, rows, opt_state, final_loss = fit(data, cfg, renderer=renderer)
    if log_csv:
        write_train_log(log_csv, rows)
    if out_ckpt:
        save_checkpoint(
            out_ckpt,
            model,
            config={"model": model.config.to_dict(), "train": cfg.to_dict()},
            fingerprint=data.fingerprint,
            global_step=rows[-1][1] if rows else 0,
            opt_state=opt_state,
        )
    return {
        "model": model,
        "final_loss": final_loss,
        "rows": rows,
        "params": parameter_counts(model),
        "checkpoint": out_ckpt,
    }


def train_flow(corpus, cfg, out_ckpt=None, log_csv=None, renderer=None):
    if cfg.mode != "flow":
        raise UsageError("train_flow requires mode='flow'")
    return train_run(corpus, cfg, out_ckpt, log_csv, renderer)


def train_renderer(corpus, cfg, out_ckpt=None, log_csv=None):
    if cfg.mode != "renderer":
        raise UsageError("train_renderer requires mode='renderer'")
    return train_run(corpus, cfg, out_ckpt, log_csv)
