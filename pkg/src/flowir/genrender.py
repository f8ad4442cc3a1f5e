"""Generative renderer: an intrinsic-conditioned noise-to-image denoiser and
the score-distillation reconstruction gradient that trains the flow model
without differentiating through the renderer.

The renderer sees 12 input channels: the noised image latent (3) plus the
9-channel intrinsic stack [albedo(3), metallic(1), roughness(1), normal(3),
depth(1)], all in model range [-1, 1]. Noise stands in for the unknown
lighting, so averaging the residual over (t, eps) draws marginalizes over
lighting conditions.
"""

import numpy as np
import torch

from .ddpm import ddim_update, sampling_indices
from .errors import UsageError
from .flow import encode, decode
from .model import ConditionId
from .scenegen import FAR_PLANE, IntrinsicSet

STACK_CHANNELS = 9
# fixed channel layout of the conditioning stack
STACK_SLICES = {
    ConditionId.albedo: slice(0, 3),
    ConditionId.metallic: slice(3, 4),
    ConditionId.roughness: slice(4, 5),
    ConditionId.normal: slice(5, 8),
    ConditionId.depth: slice(8, 9),
}


def pack_stack(intrinsics, far=FAR_PLANE):
    """Pack an IntrinsicSet into the 9-channel conditioning stack (H,W,9),
    using the flow codec's range rules at native channel widths."""
    alb = encode(intrinsics.albedo, "albedo")
    met = encode(intrinsics.metallic, "metallic")[..., :1]
    rou = encode(intrinsics.roughness, "roughness")[..., :1]
    nrm = encode(intrinsics.normal, "normal")
    dep = encode(intrinsics.depth, "depth", far)[..., :1]
    return np.concatenate([alb, met, rou, nrm, dep], axis=-1).astype(np.float32)


def unpack_stack(stack, far=FAR_PLANE):
    """Invert pack_stack back to an IntrinsicSet (clamped/renormalized)."""
    stack = np.asarray(stack)
    if stack.shape[-1] != STACK_CHANNELS:
        raise UsageError(f"stack has {stack.shape[-1]} channels, expected {STACK_CHANNELS}")

    def widen(sl):
        part = stack[..., sl]
        return np.repeat(part, 3, axis=-1) if part.shape[-1] == 1 else part

    return IntrinsicSet(
        albedo=decode(widen(STACK_SLICES[ConditionId.albedo]), "albedo"),
        metallic=decode(widen(STACK_SLICES[ConditionId.metallic]), "metallic"),
        roughness=decode(widen(STACK_SLICES[ConditionId.roughness]), "roughness"),
        normal=decode(widen(STACK_SLICES[ConditionId.normal]), "normal"),
        depth=decode(widen(STACK_SLICES[ConditionId.depth]), "depth", far),
    )


def stack_from_latents(latents):
    """Assemble the (B,9,H,W) stack from per-condition 3-channel latents,
    keeping the graph intact (channel means for single-channel properties)."""
    alb = latents[ConditionId.albedo]
    met = latents[ConditionId.metallic].mean(dim=1, keepdim=True)
    rou = latents[ConditionId.roughness].mean(dim=1, keepdim=True)
    nrm = latents[ConditionId.normal]
    dep = latents[ConditionId.depth].mean(dim=1, keepdim=True)
    return torch.cat([alb, met, rou, nrm, dep], dim=1)


def renderer_eps(renderer, z_t, t, stack):
    """Predicted noise for a noised image latent under a conditioning stack."""
    if z_t.shape[1] != 3:
        raise UsageError("noised image latent must have 3 channels")
    if stack.shape[1] != STACK_CHANNELS:
        raise UsageError(f"stack must have {STACK_CHANNELS} channels")
    if z_t.shape[2:] != stack.shape[2:]:
        raise UsageError("latent and stack spatial shapes differ")
    return renderer(torch.cat([z_t, stack], dim=1), t)


def route_residual(residual):
    """Map the 3-channel noise residual onto the 9 stack channels.

    Identity surrogate per property group: 3-wide groups receive the residual
    directly, 1-wide groups its channel mean (mirroring decode averaging).
    """
    mean = residual.mean(dim=1, keepdim=True)
    return torch.cat([residual, mean, mean, residual, mean], dim=1)


def sds_grad(renderer_fn, z_img, stack, alpha_t, sigma_t, t, eps):
    """Core SDS computation with explicit (t, eps) draws.

    Diffuses the clean image latent, evaluates the frozen renderer, and
    returns the residual routed onto the stack channels. No gradient flows
    through the renderer.
    """
    with torch.no_grad():
        z_t = alpha_t * z_img + sigma_t * eps
        eps_hat = renderer_fn(z_t, t, stack.detach())
        residual = eps_hat - eps
    return route_residual(residual), residual


def sds_reconstruction_grad(renderer, image_latent, stack, schedule, seed):
    """Gradient signal w.r.t. a predicted intrinsic stack for one (t, eps)
    draw; the noise draw plays the role of an unknown lighting condition."""
    rng = np.random.default_rng(seed)
    t = float(rng.uniform(0.0, 1.0))
    eps = torch.from_numpy(
        rng.standard_normal(size=tuple(image_latent.shape)).astype(np.float32)
    ).to(image_latent.dtype)
    alpha, sigma = schedule.alpha_sigma(t)
    tt = torch.full((image_latent.shape[0],), t, dtype=image_latent.dtype)

    def fn(z_t, tvec, cond_stack):
        return renderer_eps(renderer, z_t, tvec, cond_stack)

    grad, residual = sds_grad(
        fn, image_latent, stack, float(alpha), float(sigma), tt, eps
    )
    return grad, residual


def sds_surrogate_loss(stack, grad):
    """Scalar whose gradient w.r.t. upstream parameters is the routed
    residual applied at the stack entry point, normalized per element so
    its scale is comparable to the mean-squared flow loss."""
    return (stack * grad.detach()).mean()


@torch.no_grad()
def sample_renderer(renderer, stack, schedule, steps, seed):
    """DDIM-sample the renderer conditioned on a stack; returns the final
    clean image latent (B,3,H,W)."""
    rng = np.random.default_rng(seed)
    shape = (stack.shape[0], 3, stack.shape[2], stack.shape[3])
    x = torch.from_numpy(rng.standard_normal(size=shape).astype(np.float32)).to(stack.dtype)
    indices = sampling_indices(schedule, steps)
    for t_idx, t_prev in zip(indices, indices[1:]):
        tt = torch.full((shape[0],), t_idx / schedule.steps, dtype=x.dtype)
        eps_pred = renderer_eps(renderer, x, tt, stack)
        x = ddim_update(
            x, schedule.abar_at(t_idx), schedule.abar_at(t_prev), eps_pred, x0_clip=(-1.0, 1.0)
        )
    return x
