"""Denoising-diffusion baseline arms: cosine noise schedule, forward
noising, epsilon / v-prediction targets, and the deterministic DDIM-style
reverse step used by the image-conditioned noise-to-intrinsic baselines.
"""

import math

import numpy as np
import torch

from .errors import NumericalError, UsageError

DEFAULT_T = 1000
_ABAR_FLOOR = 1e-6


class NoiseSchedule:
    """Cosine alpha-bar schedule over normalized time t in [0, 1].

    The discrete table holds abar(i/T) for i = 1..T; the continuous form
    feeds the generative renderer. abar is clipped to [1e-6, 1] so the
    x0-reconstruction in the reverse step stays finite at t = 1.
    """

    def __init__(self, steps=DEFAULT_T, s=0.008):
        if steps < 2:
            raise UsageError("schedule needs at least 2 steps")
        self.steps = steps
        self.s = s
        grid = np.arange(1, steps + 1) / steps
        self.alpha_bar_table = self.alpha_bar(grid)
        diffs = np.diff(self.alpha_bar_table)
        if not (diffs < 0).all():
            raise NumericalError("alpha-bar table is not strictly decreasing")
        if self.alpha_bar_table[-1] > 1e-3:
            raise NumericalError("alpha-bar does not reach near-pure noise")

    def alpha_bar(self, t):
        t = np.asarray(t, dtype=np.float64)
        if (t < 0).any() or (t > 1).any():
            raise UsageError("schedule time outside [0, 1]")
        f = np.cos((t + self.s) / (1 + self.s) * math.pi / 2) ** 2
        f0 = math.cos(self.s / (1 + self.s) * math.pi / 2) ** 2
        return np.clip(f / f0, _ABAR_FLOOR, 1.0)

    def abar_at(self, t_idx):
        """Discrete lookup; index 0 means t=0 (abar = 1, clean data)."""
        t_idx = int(t_idx)
        if t_idx < 0 or t_idx > self.steps:
            raise UsageError(f"timestep index {t_idx} outside [0, {self.steps}]")
        return 1.0 if t_idx == 0 else float(self.alpha_bar_table[t_idx - 1])

    def alpha_sigma(self, t):
        """Continuous (alpha_t, sigma_t) = (sqrt(abar), sqrt(1-abar))."""
        ab = self.alpha_bar(t)
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def diffuse(x0, abar, eps):
    """sqrt(abar)*x0 + sqrt(1-abar)*eps with an explicit abar value."""
    if x0.shape != eps.shape:
        raise UsageError("x0 and noise shapes differ")
    lib = torch if torch.is_tensor(x0) else np
    return lib.sqrt(_like(abar, x0)) * x0 + lib.sqrt(1.0 - _like(abar, x0)) * eps


def _like(value, ref):
    if torch.is_tensor(ref):
        v = torch.as_tensor(value, dtype=ref.dtype, device=ref.device)
        while v.ndim < ref.ndim:
            v = v.unsqueeze(-1)
        return v
    v = np.asarray(value, dtype=np.float64)
    while v.ndim < np.ndim(ref):
        v = v[..., None]
    return v


def forward_noise(x0, t_idx, eps, schedule):
    """Forward noising at a discrete timestep index."""
    return diffuse(x0, schedule.abar_at(t_idx), eps)


def eps_loss(model, x_t, t, condition_image, eps, cond_id=None):
    """MSE between predicted and true noise; the source image is concatenated
    channelwise to the noised latent."""
    inp = torch.cat([x_t, condition_image], dim=1)
    pred = model(inp, t, cond_id)
    return ((pred - eps) ** 2).mean()


def v_from(x0, eps, abar):
    """v-prediction target sqrt(abar)*eps - sqrt(1-abar)*x0."""
    lib = torch if torch.is_tensor(x0) else np
    a = _like(abar, x0)
    return lib.sqrt(a) * eps - lib.sqrt(1.0 - a) * x0


def v_target(x0, eps, t_idx, schedule):
    return v_from(x0, eps, schedule.abar_at(t_idx))


def eps_from_v(x_t, v, abar):
    """Invert the v parameterization: eps = sqrt(1-abar)*x_t + sqrt(abar)*v."""
    lib = torch if torch.is_tensor(x_t) else np
    a = _like(abar, x_t)
    return lib.sqrt(1.0 - a) * x_t + lib.sqrt(a) * v


def x0_from_eps(x_t, eps, abar):
    lib = torch if torch.is_tensor(x_t) else np
    a = _like(abar, x_t)
    return (x_t - lib.sqrt(1.0 - a) * eps) / lib.sqrt(a)


def ddim_update(x_t, abar_t, abar_prev, eps_pred, tau=0.0, eps_new=None, x0_clip=None):
    """One reverse step from abar_t to abar_prev.

    x0_hat = (x_t - sqrt(1-abar_t)*eps_pred) / sqrt(abar_t)
    x_prev = sqrt(abar_prev)*x0_hat + sqrt(1-abar_prev-tau^2)*eps_pred + tau*eps_new

    x0_clip, when set to (lo, hi), statically thresholds the reconstruction;
    samplers use it because the 1/sqrt(abar) factor near pure noise amplifies
    prediction error unboundedly. The default leaves the algebra exact.
    """
    if tau * tau > 1.0 - abar_prev + 1e-12:
        raise UsageError("tau^2 exceeds 1 - abar_prev")
    lib = torch if torch.is_tensor(x_t) else np
    x0_hat = x0_from_eps(x_t, eps_pred, abar_t)
    if x0_clip is not None:
        x0_hat = x0_hat.clamp(*x0_clip) if torch.is_tensor(x0_hat) else np.clip(x0_hat, *x0_clip)
    a_prev = _like(abar_prev, x_t)
    out = lib.sqrt(a_prev) * x0_hat + lib.sqrt(1.0 - a_prev - tau * tau) * eps_pred
    if tau > 0.0:
        if eps_new is None:
            raise UsageError("tau > 0 requires fresh noise")
        out = out + tau * eps_new
    return out


def ddim_step(x_t, t_idx, t_prev, eps_pred, schedule, tau=0.0, eps_new=None, x0_clip=None):
    """Reverse step between two (possibly strided) discrete indices."""
    if t_prev >= t_idx:
        raise UsageError("t_prev must be strictly before t_idx")
    return ddim_update(
        x_t, schedule.abar_at(t_idx), schedule.abar_at(t_prev), eps_pred, tau, eps_new, x0_clip
    )


def sampling_indices(schedule, steps):
    """Uniformly strided descending index sequence T = i_0 > ... > i_S = 0."""
    if steps < 1 or steps > schedule.steps:
        raise UsageError(f"sampler steps must be in [1, {schedule.steps}]")
    idx = np.round(np.linspace(schedule.steps, 0, steps + 1)).astype(int)
    return [int(i) for i in idx]


@torch.no_grad()
def sample_noise_to_intrinsic(
    model,
    image_latent,
    cond,
    schedule,
    steps,
    seed,
    parameterization="eps",
    tau=0.0,
):
    """DDIM-style reverse trajectory from pure noise, conditioned on the
    source image by channel concatenation. Deterministic given the seed."""
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(
        rng.standard_normal(size=tuple(image_latent.shape)).astype(np.float32)
    ).to(image_latent.dtype)
    cc = torch.full((image_latent.shape[0],), int(cond), dtype=torch.long)
    indices = sampling_indices(schedule, steps)
    for t_idx, t_prev in zip(indices, indices[1:]):
        tt = torch.full((image_latent.shape[0],), t_idx / schedule.steps, dtype=x.dtype)
        pred = model(torch.cat([x, image_latent], dim=1), tt, cc)
        abar_t = schedule.abar_at(t_idx)
        if parameterization == "v":
            eps_pred = eps_from_v(x, pred, abar_t)
        elif parameterization == "eps":
            eps_pred = pred
        else:
            raise UsageError(f"unknown parameterization {parameterization!r}")
        eps_new = None
        if tau > 0.0:
            eps_new = torch.from_numpy(
                rng.standard_normal(size=tuple(x.shape)).astype(np.float32)
            ).to(x.dtype)
        x = ddim_update(
            x, abar_t, schedule.abar_at(t_prev), eps_pred, tau, eps_new, x0_clip=(-1.0, 1.0)
        )
        if not torch.isfinite(x).all():
            raise NumericalError(f"non-finite state after reverse step t={t_idx}")
    return x
