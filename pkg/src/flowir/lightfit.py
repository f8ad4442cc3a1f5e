"""Lighting estimation by reconstruction optimization.

The analytic shading model from scenegen is mirrored here in torch (float64)
so light positions, intensities, and the ambient term can be optimized by
gradient descent with backtracking line search. Relighting reuses the exact
float32 shading path, so refitting ground-truth lights on ground-truth
intrinsics reproduces the source image bit-for-bit on shadow-free scenes.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericalError, UsageError
from .scenegen import Light, camera_frame, camera_rays, geometry_from_depth, shade
from .tensorio import atomic_write_bytes


@dataclass
class LightParams:
    positions: np.ndarray  # (L,3)
    intensities: np.ndarray  # (L,3) >= 0
    ambient: float  # >= 0

    def validate(self):
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise UsageError("light positions must be (L,3)")
        if self.intensities.shape != self.positions.shape:
            raise UsageError("one rgb intensity per light required")
        if not 1 <= len(self.positions) <= 4:
            raise UsageError("between 1 and 4 lights supported")
        if np.any(self.intensities < 0) or self.ambient < 0:
            raise UsageError("intensities and ambient must be non-negative")
        if not np.isfinite(self.positions).all():
            raise UsageError("light positions must be finite")
        return self

    def to_lights(self):
        return [Light(p.copy(), i.copy()) for p, i in zip(self.positions, self.intensities)]

    def to_dict(self):
        return {
            "lights": [
                {"position": [float(v) for v in p], "intensity": [float(v) for v in i]}
                for p, i in zip(self.positions, self.intensities)
            ],
            "ambient": float(self.ambient),
        }

    @staticmethod
    def from_dict(d):
        return LightParams(
            positions=np.asarray([l["position"] for l in d["lights"]], dtype=np.float64),
            intensities=np.asarray([l["intensity"] for l in d["lights"]], dtype=np.float64),
            ambient=float(d["ambient"]),
        ).validate()


@dataclass
class GeometryProxy:
    """Per-pixel world positions reconstructed from depth + camera."""

    positions: np.ndarray  # (H,W,3) float32
    camera: object

    @staticmethod
    def from_depth(depth, camera):
        return GeometryProxy(positions=geometry_from_depth(depth, camera), camera=camera)


def _shading_tensors(intrinsics, camera):
    """Float64 tensors of everything the torch objective needs."""
    right, up, backward = camera_frame(camera)
    basis = np.stack([right, up, backward]).astype(np.float64)
    n_world = intrinsics.normal.astype(np.float64) @ basis
    positions = geometry_from_depth(intrinsics.depth, camera).astype(np.float64)
    cam_pos = np.asarray(camera.position, dtype=np.float64)
    view = cam_pos[None, None, :] - positions
    view = view / np.maximum(np.linalg.norm(view, axis=-1, keepdims=True), 1e-12)
    return {
        "albedo": torch.from_numpy(intrinsics.albedo.astype(np.float64)),
        "metal": torch.from_numpy(intrinsics.metallic.astype(np.float64)),
        "rough": torch.from_numpy(intrinsics.roughness.astype(np.float64)),
        "n_world": torch.from_numpy(n_world),
        "positions": torch.from_numpy(positions),
        "view": torch.from_numpy(view),
        "mask": torch.from_numpy(intrinsics.mask.astype(np.bool_)),
    }


def shade_torch(tensors, positions_l, intensities_l, ambient_l):
    """Differentiable mirror of scenegen.shade (valid pixels only matter)."""
    albedo, metal, rough = tensors["albedo"], tensors["metal"], tensors["rough"]
    n_world, positions, view = tensors["n_world"], tensors["positions"], tensors["view"]
    spec_color = (1.0 - metal) + metal * albedo
    spec_strength = 0.9 * metal
    shininess = 4.0 + (1.0 - rough) ** 2 * 252.0
    out = torch.zeros_like(albedo)
    for k in range(positions_l.shape[0]):
        lvec = positions_l[k].reshape(1, 1, 3) - positions
        d2 = (lvec * lvec).sum(dim=-1, keepdim=True).clamp_min(1e-12)
        ldir = lvec / d2.sqrt()
        ndotl = (n_world * ldir).sum(dim=-1, keepdim=True).clamp_min(0.0)
        falloff = intensities_l[k].reshape(1, 1, 3) / d2
        out = out + albedo * (1.0 - metal) * ndotl * falloff
        half = ldir + view
        half = half / half.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        ndoth = (n_world * half).sum(dim=-1, keepdim=True).clamp_min(0.0)
        lit = (ndotl > 0).to(out.dtype)
        out = out + spec_color * spec_strength * ndoth**shininess * lit * falloff
    out = out + ambient_l * albedo
    return out.clamp(0.0, 1.0)


def fit_objective(tensors, target, positions_l, intensities_l, ambient_l):
    """Mean squared reconstruction error over valid pixels."""
    rendered = shade_torch(tensors, positions_l, intensities_l, ambient_l)
    diff = (rendered - target) ** 2
    mask = tensors["mask"]
    return diff[mask].mean()


def _light_basis(tensors, positions_l):
    """Per-light unit-intensity shading contribution (L,H,W,3): the image is
    clamp(sum_l I_l * basis_l + ambient*albedo, 0, 1)."""
    albedo, metal, rough = tensors["albedo"], tensors["metal"], tensors["rough"]
    n_world, positions, view = tensors["n_world"], tensors["positions"], tensors["view"]
    spec_color = (1.0 - metal) + metal * albedo
    spec_strength = 0.9 * metal
    shininess = 4.0 + (1.0 - rough) ** 2 * 252.0
    out = []
    for k in range(positions_l.shape[0]):
        lvec = positions_l[k].reshape(1, 1, 3) - positions
        d2 = (lvec * lvec).sum(dim=-1, keepdim=True).clamp_min(1e-12)
        ldir = lvec / d2.sqrt()
        ndotl = (n_world * ldir).sum(dim=-1, keepdim=True).clamp_min(0.0)
        half = ldir + view
        half = half / half.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        ndoth = (n_world * half).sum(dim=-1, keepdim=True).clamp_min(0.0)
        lit = (ndotl > 0).to(albedo.dtype)
        term = albedo * (1.0 - metal) * ndotl + spec_color * spec_strength * ndoth**shininess * lit
        out.append(term / d2)
    return torch.stack(out, dim=0)


def _refit_linear(tensors, target, positions_l):
    """Exact least-squares solve for intensities + ambient given positions.

    The pre-clamp image is linear in these parameters, so this is the
    variable-projection step; saturated target pixels are excluded. Negative
    solutions are projected to zero.
    """
    basis = _light_basis(tensors, positions_l)  # (L,H,W,3)
    n_lights = basis.shape[0]
    keep = tensors["mask"].unsqueeze(-1) & (target < 1.0 - 1e-6)
    rows = int(keep.sum())
    if rows < 3 * n_lights + 1:
        return None
    albedo = tensors["albedo"]
    cols = []
    for k in range(n_lights):
        for c in range(3):
            col = torch.zeros_like(target)
            col[..., c] = basis[k][..., c]
            cols.append(col[keep])
    cols.append(albedo[keep])
    a = torch.stack(cols, dim=1).numpy()
    b = target[keep].numpy()
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    inten = np.maximum(sol[: 3 * n_lights].reshape(n_lights, 3), 0.0)
    amb = max(float(sol[-1]), 0.0)
    return torch.from_numpy(inten), torch.tensor(amb, dtype=torch.float64)


def fit_lights(image, intrinsics, camera, init, iters=400, lr=0.5, callback=None):
    """Minimize the reconstruction error over light parameters.

    Positions descend by gradient steps with backtracking line search;
    intensities and the ambient term, in which the pre-clamp image is
    linear, are refit exactly by least squares whenever that lowers the
    loss (variable projection). All candidate updates are accepted only if
    they do not increase the loss, so the accepted-loss sequence is
    non-increasing; non-negativity is enforced by projection.
    ``callback(loss)`` runs after every accepted update.
    """
    init.validate()
    tensors = _shading_tensors(intrinsics, camera)
    target = torch.from_numpy(np.asarray(image, dtype=np.float64))

    pos = torch.from_numpy(init.positions.astype(np.float64)).clone()
    inten = torch.from_numpy(init.intensities.astype(np.float64)).clone()
    amb = torch.tensor(float(init.ambient), dtype=torch.float64)

    def value(p, i, a):
        return fit_objective(tensors, target, p, i, a)

    def try_linear_refit(loss):
        refit = _refit_linear(tensors, target, pos)
        if refit is None:
            return inten, amb, loss
        cand_int, cand_amb = refit
        cand_loss = value(pos, cand_int, cand_amb)
        if torch.isfinite(cand_loss) and float(cand_loss) <= float(loss):
            if callback is not None:
                callback(float(cand_loss))
            return cand_int, cand_amb, cand_loss
        return inten, amb, loss

    loss = value(pos, inten, amb)
    if not torch.isfinite(loss):
        raise NumericalError("non-finite loss at initialization")
    if iters > 0:
        inten, amb, loss = try_linear_refit(loss)

    step = lr
    for it in range(iters):
        p_ = pos.clone().requires_grad_(True)
        f = value(p_, inten, amb)
        f.backward()
        g_pos = p_.grad
        if not torch.isfinite(g_pos).all():
            raise NumericalError(f"non-finite gradient at iteration {it}")
        if float((g_pos**2).sum()) == 0.0:
            break
        accepted = False
        for _ in range(40):
            cand_pos = pos - step * g_pos
            cand_loss = value(cand_pos, inten, amb)
            if not torch.isfinite(cand_loss):
                raise NumericalError(f"objective diverged at iteration {it}")
            if float(cand_loss) <= float(loss):
                pos, loss = cand_pos, cand_loss
                step = min(step * 1.5, lr * 1e3)
                accepted = True
                if callback is not None:
                    callback(float(loss))
                break
            step *= 0.5
        if not accepted:
            break
        inten, amb, loss = try_linear_refit(loss)

    result = LightParams(
        positions=pos.numpy(),
        intensities=inten.numpy(),
        ambient=float(amb),
    ).validate()
    return result, float(loss)


def relight(intrinsics, camera, lights, ambient=None):
    """Re-shade intrinsics under new lighting with the float32 analytic
    model; invalid pixels keep the stored background albedo."""
    if isinstance(lights, LightParams):
        light_list = lights.to_lights()
        amb = lights.ambient if ambient is None else ambient
    else:
        light_list = lights
        amb = 0.0 if ambient is None else ambient
    image = shade(intrinsics, camera, light_list, amb)
    image[~intrinsics.mask] = intrinsics.albedo[~intrinsics.mask]
    return image


def save_lights(path, params, final_loss=None, iters=None):
    doc = params.to_dict()
    if final_loss is not None:
        doc["final_loss"] = float(final_loss)
    if iters is not None:
        doc["iters"] = int(iters)
    atomic_write_bytes(path, json.dumps(doc, indent=2, sort_keys=True).encode())


def load_lights(path):
    with open(path) as fh:
        return LightParams.from_dict(json.load(fh))
