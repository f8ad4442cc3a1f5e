"""Trainable estimators: a compact conditional U-Net, low-rank adapters,
a decoupled-weight-decay Adam optimizer, and checkpoint persistence.

The same CondUNet class backs the velocity model (3 input channels, five
condition embeddings), the image-conditioned baselines (6 input channels),
and the generative renderer (12 input channels, no condition table).
"""

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import torch
from torch import nn

from .errors import DataFormatError, UsageError
from . import tensorio


class ConditionId(IntEnum):
    """Stable name <-> index mapping for the five intrinsic properties."""

    albedo = 0
    metallic = 1
    roughness = 2
    normal = 3
    depth = 4


CONDITION_NAMES = tuple(c.name for c in ConditionId)
N_CONDITIONS = len(CONDITION_NAMES)


def condition_index(name):
    try:
        return ConditionId[name]
    except KeyError:
        raise UsageError(f"unknown intrinsic property {name!r}; expected one of {CONDITION_NAMES}")


@dataclass
class ModelConfig:
    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 16
    depth_levels: int = 3
    embed_dim: int = 64
    n_conditions: int = N_CONDITIONS  # 0 disables the condition table
    lora_rank: int = 0  # 0 = no adapters attached

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "base_channels": self.base_channels,
            "depth_levels": self.depth_levels,
            "embed_dim": self.embed_dim,
            "n_conditions": self.n_conditions,
            "lora_rank": self.lora_rank,
        }

    @staticmethod
    def from_dict(d):
        return ModelConfig(**{k: int(v) for k, v in d.items()})


def _group_norm(channels):
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


def sinusoidal_features(t, dim):
    """Sinusoidal embedding of timesteps in [0, 1], shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype, device=t.device)
    )
    angles = t[:, None] * freqs[None, :] * 2.0 * math.pi
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ConvBlock(nn.Module):
    """Two 3x3 convs with GroupNorm/SiLU; the embedding enters as a
    per-channel bias between them."""

    def __init__(self, c_in, c_out, embed_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = _group_norm(c_out)
        self.emb_proj = nn.Linear(embed_dim, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = _group_norm(c_out)

    def forward(self, x, emb):
        h = torch.nn.functional.silu(self.norm1(self.conv1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        return torch.nn.functional.silu(self.norm2(self.conv2(h)))


class LoRAConv2d(nn.Module):
    """Conv wrapped with a low-rank residual: base(x) + scale * up(down(x)).

    ``lora_up`` starts at zero so the adapted map equals the base map exactly
    until training moves it.
    """

    def __init__(self, base, rank, scale=1.0):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scale = scale
        self.lora_down = nn.Conv2d(
            base.in_channels,
            rank,
            base.kernel_size,
            stride=base.stride,
            padding=base.padding,
            bias=False,
        )
        self.lora_up = nn.Conv2d(rank, base.out_channels, 1, bias=False)
        nn.init.normal_(self.lora_down.weight, std=1.0 / rank)
        nn.init.zeros_(self.lora_up.weight)

    def adapter_param_count(self):
        k = self.base.kernel_size[0] * self.base.kernel_size[1]
        return self.rank * (self.base.in_channels * k + self.base.out_channels)

    def forward(self, x):
        return self.base(x) + self.scale * self.lora_up(self.lora_down(x))


class LoRALinear(nn.Module):
    def __init__(self, base, rank, scale=1.0):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scale = scale
        self.lora_down = nn.Linear(base.in_features, rank, bias=False)
        self.lora_up = nn.Linear(rank, base.out_features, bias=False)
        nn.init.normal_(self.lora_down.weight, std=1.0 / rank)
        nn.init.zeros_(self.lora_up.weight)

    def adapter_param_count(self):
        return self.rank * (self.base.in_features + self.base.out_features)

    def forward(self, x):
        return self.base(x) + self.scale * self.lora_up(self.lora_down(x))


class CondUNet(nn.Module):
    """U-shaped estimator with timestep + condition embeddings injected as
    per-channel biases at every level."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        chans = [config.base_channels * (2**i) for i in range(config.depth_levels)]
        self.chans = chans
        ed = config.embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(ed, ed), nn.SiLU(), nn.Linear(ed, ed)
        )
        self.cond_table = (
            nn.Embedding(config.n_conditions, ed) if config.n_conditions > 0 else None
        )

        self.stem = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)
        self.enc = nn.ModuleList(ConvBlock(c, c, ed) for c in chans)
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(len(chans) - 1)
        )
        self.mid = ConvBlock(chans[-1], chans[-1], ed)
        self.ups = nn.ModuleList(
            nn.Conv2d(chans[i + 1], chans[i], 3, padding=1) for i in range(len(chans) - 1)
        )
        self.dec = nn.ModuleList(
            ConvBlock(2 * chans[i], chans[i], ed) for i in range(len(chans) - 1)
        )
        self.out = nn.Conv2d(chans[0], config.out_channels, 3, padding=1)

    def lora_targets(self):
        """Modules adapted by attach_adapters: everything at the deepest level."""
        return {
            f"downs.{len(self.downs) - 1}": self.downs[-1],
            "mid.conv1": self.mid.conv1,
            "mid.conv2": self.mid.conv2,
            "mid.emb_proj": self.mid.emb_proj,
            f"ups.{len(self.ups) - 1}": self.ups[-1],
        }

    def attach_adapters(self, rank, scale=1.0):
        if rank <= 0:
            raise UsageError("adapter rank must be positive")
        for path in list(self.lora_targets()):
            parent, _, attr = path.rpartition(".")
            holder = self
            if parent:
                for part in parent.split("."):
                    holder = holder[int(part)] if part.isdigit() else getattr(holder, part)
            base = holder[int(attr)] if attr.isdigit() else getattr(holder, attr)
            wrapped = (
                LoRALinear(base, rank, scale)
                if isinstance(base, nn.Linear)
                else LoRAConv2d(base, rank, scale)
            )
            if attr.isdigit():
                holder[int(attr)] = wrapped
            else:
                setattr(holder, attr, wrapped)
        self.config.lora_rank = rank
        return self

    def _embedding(self, t, cond, batch, dtype, device):
        if not torch.is_tensor(t):
            t = torch.as_tensor(t, dtype=dtype, device=device)
        if t.ndim == 0:
            t = t.expand(batch)
        t = t.to(dtype)
        if torch.any(t < -1e-6) or torch.any(t > 1 + 1e-6):
            raise UsageError("timestep outside [0, 1]")
        emb = self.time_mlp(sinusoidal_features(t, self.config.embed_dim))
        if cond is not None:
            if self.cond_table is None:
                raise UsageError("model has no condition table")
            if not torch.is_tensor(cond):
                cond = torch.as_tensor(cond, dtype=torch.long, device=device)
            if cond.ndim == 0:
                cond = cond.expand(batch)
            emb = emb + self.cond_table(cond)
        return emb

    def forward(self, x, t, cond=None):
        if x.ndim != 4:
            raise UsageError(f"expected NCHW input, got shape {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise UsageError("non-finite values in model input")
        down_factor = 2 ** (len(self.chans) - 1)
        if x.shape[2] % down_factor or x.shape[3] % down_factor:
            raise UsageError(
                f"spatial size {x.shape[2]}x{x.shape[3]} not divisible by {down_factor}"
            )
        emb = self._embedding(t, cond, x.shape[0], x.dtype, x.device)

        h = self.stem(x)
        skips = []
        for i in range(len(self.chans) - 1):
            h = self.enc[i](h, emb)
            skips.append(h)
            h = self.downs[i](h)
        h = self.enc[-1](h, emb)
        h = self.mid(h, emb)
        for i in reversed(range(len(self.ups))):
            h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = self.ups[i](h)
            h = self.dec[i](torch.cat([h, skips[i]], dim=1), emb)
        return self.out(h)


def build_model(config, seed=None, dtype=torch.float32):
    """Construct a CondUNet with deterministic initialization."""
    if seed is not None:
        torch.manual_seed(int(seed))
    model = CondUNet(config)
    if config.lora_rank > 0:
        model.attach_adapters(config.lora_rank)
    return model.to(dtype)


def is_adapter_param(name):
    return "lora_down" in name or "lora_up" in name


def set_trainable(model, adapter_only=False):
    """Mark which parameters train; adapter_only freezes every base weight."""
    if adapter_only and model.config.lora_rank <= 0:
        raise UsageError("adapter_only training requested but no adapters attached")
    for name, p in model.named_parameters():
        p.requires_grad = is_adapter_param(name) if adapter_only else True
    return model


def parameter_counts(model):
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    adapter = sum(p.numel() for n, p in model.named_parameters() if is_adapter_param(n))
    return {"total": total, "trainable": trainable, "adapter": adapter}


def expected_adapter_params(model):
    """Sum rank*(fan_in + fan_out) over adapted maps (fan_in counts the
    kernel footprint for convs)."""
    return sum(
        m.adapter_param_count()
        for m in model.modules()
        if isinstance(m, (LoRAConv2d, LoRALinear))
    )


def loss_gradient(model, loss_fn):
    """Exact gradients of a scalar loss for every trainable parameter."""
    for p in model.parameters():
        p.grad = None
    loss = loss_fn(model)
    loss.backward()
    return {
        name: p.grad.detach().clone()
        for name, p in model.named_parameters()
        if p.requires_grad and p.grad is not None
    }


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def optimizer_step(params, grads, state, config):
    """One decoupled-weight-decay adaptive update, in place.

    Parameters without an entry in ``grads`` are left untouched (frozen);
    parameters with a zero gradient still receive weight decay.
    """
    state.step += 1
    beta1, beta2 = config.betas
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if config.weight_decay:
            p.mul_(1.0 - config.lr * config.weight_decay)
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(config.eps), value=-config.lr)
    return params


def canonical_param_name(name):
    """Checkpoint name for a parameter: adapter wrapping is transparent."""
    return name.replace(".base.", ".")


def named_parameters_canonical(model):
    return {canonical_param_name(n): p for n, p in model.named_parameters()}


@dataclass
class Checkpoint:
    params: dict  # canonical name -> float32 ndarray
    config: dict  # run + model configuration
    fingerprint: str
    global_step: int
    opt_state: AdamWState = None
    version: int = tensorio.CHECKPOINT_VERSION


def save_checkpoint(path, model, config, fingerprint="", global_step=0, opt_state=None):
    arrays = {}
    for name, p in sorted(named_parameters_canonical(model).items()):
        arrays[f"param/{name}"] = p.detach().cpu().numpy().astype(np.float32)
    if opt_state is not None:
        arrays["opt/step"] = np.asarray(opt_state.step, dtype=np.int64)
        for name in sorted(opt_state.m):
            cname = canonical_param_name(name)
            arrays[f"opt/m/{cname}"] = opt_state.m[name].cpu().numpy().astype(np.float32)
            arrays[f"opt/v/{cname}"] = opt_state.v[name].cpu().numpy().astype(np.float32)
    arrays["meta/config"] = np.frombuffer(
        json.dumps(config, sort_keys=True).encode(), dtype=np.uint8
    ).copy()
    arrays["meta/fingerprint"] = np.frombuffer(fingerprint.encode(), dtype=np.uint8).copy()
    arrays["meta/global_step"] = np.asarray(global_step, dtype=np.int64)
    tensorio.write_arrays(path, arrays)


def load_checkpoint(path):
    arrays = tensorio.read_arrays(path)
    if "meta/config" not in arrays:
        raise DataFormatError("checkpoint missing meta/config entry", path=path)
    config = json.loads(bytes(arrays["meta/config"]).decode())
    fingerprint = bytes(arrays.get("meta/fingerprint", np.empty(0, np.uint8))).decode()
    global_step = int(arrays.get("meta/global_step", np.asarray(0)).item())
    params = {
        name[len("param/") :]: arr for name, arr in arrays.items() if name.startswith("param/")
    }
    opt_state = None
    if "opt/step" in arrays:
        opt_state = AdamWState(step=int(arrays["opt/step"].item()))
        for name, arr in arrays.items():
            if name.startswith("opt/m/"):
                opt_state.m[name[len("opt/m/") :]] = torch.from_numpy(arr.copy())
            elif name.startswith("opt/v/"):
                opt_state.v[name[len("opt/v/") :]] = torch.from_numpy(arr.copy())
    return Checkpoint(
        params=params,
        config=config,
        fingerprint=fingerprint,
        global_step=global_step,
        opt_state=opt_state,
    )


def apply_parameters(model, params, strict=True):
    """Copy canonical-named arrays into the model; returns unmatched names."""
    own = named_parameters_canonical(model)
    missing = [n for n in own if n not in params]
    unexpected = [n for n in params if n not in own]
    if strict and (missing or unexpected):
        raise DataFormatError(
            f"parameter name mismatch: missing {missing[:4]}, unexpected {unexpected[:4]}"
        )
    with torch.no_grad():
        for name, p in own.items():
            if name in params:
                arr = np.asarray(params[name])
                if tuple(arr.shape) != tuple(p.shape):
                    raise DataFormatError(
                        f"shape mismatch for {name}: checkpoint {arr.shape} vs model {tuple(p.shape)}"
                    )
                p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))
    return missing


def model_from_checkpoint(ckpt, dtype=torch.float32):
    """Rebuild the exact architecture recorded in a checkpoint and load it."""
    mc = ModelConfig.from_dict(ckpt.config["model"])
    model = build_model(mc, seed=0, dtype=dtype)
    apply_parameters(model, ckpt.params, strict=True)
    return model
