"""Straight-path flow matching between image latents and intrinsic latents.

The "latent" space is pixel space under an identity codec: every map is
affinely transformed to [-1, 1] and single-channel properties are replicated
to three channels so one network handles all five intrinsics. Codec
arithmetic runs in float64 so encode -> decode round trips are exact on
native-range float32 maps.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericalError, UsageError
from .model import ConditionId, condition_index
from .scenegen import FAR_PLANE, IntrinsicSet

MIN_DEPTH = 1e-3
NORMAL_EPS = 1e-6
DEFAULT_EULER_STEPS = 10  # K

_SINGLE_CHANNEL = {"metallic", "roughness", "depth"}
_KINDS = ("image", "albedo", "metallic", "roughness", "normal", "depth")


def _kind_name(kind):
    if isinstance(kind, ConditionId):
        return kind.name
    if kind not in _KINDS:
        raise UsageError(f"unknown map kind {kind!r}")
    return kind


def encode(x, kind, far=FAR_PLANE):
    """Map a native-range map to a 3-channel latent in [-1, 1] (float64)."""
    kind = _kind_name(kind)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if kind in _SINGLE_CHANNEL:
        if x.shape[-1] != 1:
            raise UsageError(f"{kind} maps are single-channel, got {x.shape[-1]}")
        x = np.repeat(x, 3, axis=-1)
    elif x.shape[-1] != 3:
        raise UsageError(f"{kind} maps are 3-channel, got {x.shape[-1]}")

    if kind in ("image", "albedo", "metallic", "roughness"):
        if x.min() < -1e-6 or x.max() > 1 + 1e-6:
            raise UsageError(f"{kind} values outside [0, 1]")
        return 2.0 * x - 1.0
    if kind == "normal":
        if x.min() < -1 - 1e-3 or x.max() > 1 + 1e-3:
            raise UsageError("normal components outside [-1, 1]")
        return x.copy()
    # depth
    if x.min() <= 0 or x.max() > far + 1e-6:
        raise UsageError(f"depth values outside (0, {far}]")
    return 2.0 * (x / far) - 1.0


def renormalize_normals(latent):
    """Unit-normalize a 3-channel normal latent; near-zero vectors fall back
    to (0,0,1). Returns (normals, degenerate_mask)."""
    latent = np.asarray(latent, dtype=np.float64)
    norms = np.linalg.norm(latent, axis=-1, keepdims=True)
    degenerate = norms[..., 0] < NORMAL_EPS
    safe = np.where(norms < NORMAL_EPS, 1.0, norms)
    unit = latent / safe
    unit[degenerate] = np.array([0.0, 0.0, 1.0])
    return unit, degenerate


def decode(latent, target, far=FAR_PLANE):
    """Invert encode for the target property; clamps to the valid range and
    averages channels for single-channel targets. Returns float32."""
    target = _kind_name(target)
    z = np.asarray(latent, dtype=np.float64)
    if z.shape[-1] != 3:
        raise UsageError(f"latents are 3-channel, got {z.shape[-1]}")
    if target in ("image", "albedo"):
        out = np.clip((z + 1.0) / 2.0, 0.0, 1.0)
    elif target in ("metallic", "roughness"):
        mean = z.mean(axis=-1, keepdims=True)
        out = np.clip((mean + 1.0) / 2.0, 0.0, 1.0)
    elif target == "depth":
        mean = z.mean(axis=-1, keepdims=True)
        out = np.clip((mean + 1.0) / 2.0 * far, MIN_DEPTH, far)
    else:  # normal
        out, _ = renormalize_normals(z)
    return out.astype(np.float32)


def interpolate(z, z_i, t):
    """Point on the straight path: z*(1-t) + z_i*t."""
    tv = t
    if torch.is_tensor(z):
        if not torch.is_tensor(tv):
            tv = torch.as_tensor(tv, dtype=z.dtype, device=z.device)
        bad = bool((tv < 0).any() or (tv > 1).any())
    else:
        tv = np.asarray(tv)
        bad = bool((tv < 0).any() or (tv > 1).any())
    if bad:
        raise UsageError("interpolation time outside [0, 1]")
    if z.shape != z_i.shape:
        raise UsageError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_i.shape)}")
    return z * (1 - tv) + z_i * tv


def flow_target(z, z_i):
    """Constant velocity of the straight path from z to z_i."""
    if z.shape != z_i.shape:
        raise UsageError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_i.shape)}")
    return z_i - z


@dataclass
class FlowBatch:
    z_img: torch.Tensor  # (B,3,H,W) image latents
    z_intr: torch.Tensor  # (B,3,H,W) matching intrinsic latents
    cond: torch.Tensor  # (B,) long condition ids
    t: torch.Tensor  # (B,) float in [0,1]


def flow_loss(model, batch):
    """Mean squared error between predicted velocity and the straight-path
    target, over batch, channels, and pixels."""
    t = batch.t.reshape(-1, 1, 1, 1)
    z_t = interpolate(batch.z_img, batch.z_intr, t)
    pred = model(z_t, batch.t, batch.cond)
    return ((pred - flow_target(batch.z_img, batch.z_intr)) ** 2).mean()


def euler_integrate(velocity_fn, z0, steps, cond=None):
    """Explicit Euler over t in {0,...,K-1}/K with step 1/K."""
    if steps < 1:
        raise UsageError("euler integration needs at least one step")
    z = z0
    for k in range(steps):
        if torch.is_tensor(z):
            finite = torch.isfinite(z).all()
        else:
            finite = np.isfinite(z).all()
        if not finite:
            raise NumericalError(f"non-finite state entering Euler step {k}/{steps}")
        v = velocity_fn(z, k / steps, cond)
        if not (torch.isfinite(v).all() if torch.is_tensor(v) else np.isfinite(v).all()):
            raise NumericalError(f"non-finite velocity at Euler step {k}/{steps}")
        z = z + v / steps
    return z


def _model_velocity(model):
    def fn(z, t, cond):
        tt = torch.full((z.shape[0],), float(t), dtype=z.dtype)
        cc = None
        if cond is not None:
            cc = torch.full((z.shape[0],), int(cond), dtype=torch.long)
        return model(z, tt, cc)

    return fn


def _to_nchw(maps):
    arr = np.asarray(maps, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))), single


def _from_nchw(t):
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


@torch.no_grad()
def euler_sample(model, image, cond, steps=DEFAULT_EULER_STEPS, far=FAR_PLANE):
    """Predict one intrinsic map from an image (or batch of images) by
    integrating the learned velocity field for K steps."""
    cond = condition_index(cond) if isinstance(cond, str) else ConditionId(int(cond))
    z0, single = _to_nchw(encode(image, "image"))
    z1 = euler_integrate(_model_velocity(model), z0, steps, cond)
    out = np.stack([decode(m, cond, far) for m in _from_nchw(z1)])
    return out[0] if single else out


def one_step_latents(model, z_img):
    """Single full-length Euler step for every condition; differentiable.

    Returns a dict ConditionId -> (B,3,H,W) latent.
    """
    t = torch.zeros(z_img.shape[0], dtype=z_img.dtype)
    out = {}
    for cond in ConditionId:
        cc = torch.full((z_img.shape[0],), int(cond), dtype=torch.long)
        out[cond] = z_img + model(z_img, t, cc)
    return out


@torch.no_grad()
def one_step_estimate(model, image, far=FAR_PLANE):
    """One-step estimation of all five intrinsic properties as an IntrinsicSet."""
    z0, single = _to_nchw(encode(image, "image"))
    if not single:
        raise UsageError("one_step_estimate takes a single image")
    latents = one_step_latents(model, z0)
    maps = {c.name: decode(_from_nchw(latents[c])[0], c, far) for c in ConditionId}
    return IntrinsicSet(
        albedo=maps["albedo"],
        metallic=maps["metallic"],
        roughness=maps["roughness"],
        normal=maps["normal"],
        depth=maps["depth"],
    )
