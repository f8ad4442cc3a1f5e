"""Procedural toy-scene sampling and the analytic forward renderer.

Scenes are a handful of spheres/boxes/planes lit by point lights plus an
ambient term, viewed through a pinhole camera. Rendering produces the RGB
image together with the five per-pixel intrinsic maps (albedo, metallic,
roughness, camera-space normal, Euclidean depth) and a validity mask.

Shading is Lambertian diffuse + Blinn-Phong specular:

    image = clamp( sum_lights[ albedo*(1-m)*max(n.l,0)*I/d^2
                               + spec_color*(0.9*m)*max(n.h,0)^shininess*I/d^2 ]
                   + ambient*albedo, 0, 1)

with shininess = 4 + (1-roughness)^2 * 252 and
spec_color = (1-m)*white + m*albedo. The specular term is gated by n.l > 0.

The shading path is float32 and consumes only the stored g-buffer (intrinsic
maps + depth-reconstructed positions), so re-shading stored maps with stored
lights reproduces the stored image bit-exactly on shadow-free scenes.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, UsageError
from .tensorio import atomic_write_bytes, write_tensor

FAR_PLANE = 10.0
MIN_RESOLUTION = 8
MANIFEST_NAME = "manifest.json"
CORPUS_FORMAT_VERSION = 1
MAP_NAMES = ("image", "albedo", "metallic", "roughness", "normal", "depth", "mask")

_DIFFICULTY_CODES = {"simple": 0, "cluttered": 1}


@dataclass
class Primitive:
    shape: str  # sphere | box | plane
    position: np.ndarray  # center (sphere/box) or a point on the plane
    orientation: np.ndarray  # yaw/pitch/roll radians; plane normal derives from it
    size: np.ndarray  # sphere: [r,r,r]; box: half extents; plane: unused


@dataclass
class Material:
    albedo: np.ndarray
    metallic: float
    roughness: float


@dataclass
class Light:
    position: np.ndarray
    intensity: np.ndarray  # rgb, >= 0


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    fov_deg: float


@dataclass
class SceneSpec:
    primitives: list
    materials: list
    lights: list
    ambient: float
    camera: Camera
    background: np.ndarray
    seed: int
    difficulty: str = "simple"

    def validate(self):
        if not self.primitives:
            raise UsageError("scene needs at least one primitive")
        if not self.lights:
            raise UsageError("scene needs at least one light")
        if len(self.materials) != len(self.primitives):
            raise UsageError("one material per primitive required")
        for mat in self.materials:
            if np.any(mat.albedo < 0) or np.any(mat.albedo > 1):
                raise UsageError("albedo outside [0,1]")
            if not 0 <= mat.metallic <= 1 or not 0 <= mat.roughness <= 1:
                raise UsageError("material scalars outside [0,1]")
        for light in self.lights:
            if np.any(light.intensity < 0):
                raise UsageError("light intensity must be non-negative")
        if not 0 <= self.ambient <= 0.3:
            raise UsageError("ambient outside [0, 0.3]")

    def to_dict(self):
        return {
            "seed": int(self.seed),
            "difficulty": self.difficulty,
            "primitives": [
                {
                    "shape": p.shape,
                    "position": [float(v) for v in p.position],
                    "orientation": [float(v) for v in p.orientation],
                    "size": [float(v) for v in p.size],
                }
                for p in self.primitives
            ],
            "materials": [
                {
                    "albedo": [float(v) for v in m.albedo],
                    "metallic": float(m.metallic),
                    "roughness": float(m.roughness),
                }
                for m in self.materials
            ],
            "lights": [
                {
                    "position": [float(v) for v in l.position],
                    "intensity": [float(v) for v in l.intensity],
                }
                for l in self.lights
            ],
            "ambient": float(self.ambient),
            "camera": {
                "position": [float(v) for v in self.camera.position],
                "look_at": [float(v) for v in self.camera.look_at],
                "fov_deg": float(self.camera.fov_deg),
            },
            "background": [float(v) for v in self.background],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(d):
        return SceneSpec(
            primitives=[
                Primitive(
                    shape=p["shape"],
                    position=np.asarray(p["position"], dtype=np.float64),
                    orientation=np.asarray(p["orientation"], dtype=np.float64),
                    size=np.asarray(p["size"], dtype=np.float64),
                )
                for p in d["primitives"]
            ],
            materials=[
                Material(
                    albedo=np.asarray(m["albedo"], dtype=np.float64),
                    metallic=float(m["metallic"]),
                    roughness=float(m["roughness"]),
                )
                for m in d["materials"]
            ],
            lights=[
                Light(
                    position=np.asarray(l["position"], dtype=np.float64),
                    intensity=np.asarray(l["intensity"], dtype=np.float64),
                )
                for l in d["lights"]
            ],
            ambient=float(d["ambient"]),
            camera=Camera(
                position=np.asarray(d["camera"]["position"], dtype=np.float64),
                look_at=np.asarray(d["camera"]["look_at"], dtype=np.float64),
                fov_deg=float(d["camera"]["fov_deg"]),
            ),
            background=np.asarray(d["background"], dtype=np.float64),
            seed=int(d["seed"]),
            difficulty=d.get("difficulty", "simple"),
        )

    @staticmethod
    def from_json(text):
        return SceneSpec.from_dict(json.loads(text))


@dataclass
class IntrinsicSet:
    """The five per-pixel property maps plus validity mask, all float32."""

    albedo: np.ndarray  # H,W,3 in [0,1]
    metallic: np.ndarray  # H,W,1 in [0,1]
    roughness: np.ndarray  # H,W,1 in [0,1]
    normal: np.ndarray  # H,W,3 unit vectors, camera space
    depth: np.ndarray  # H,W,1 meters in (0, far]
    mask: np.ndarray = field(default=None)  # H,W bool, True on geometry hits

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.albedo.shape[:2], dtype=bool)

    def validate(self, far=FAR_PLANE):
        for name in ("albedo", "metallic", "roughness"):
            arr = getattr(self, name)
            if arr.min() < 0 or arr.max() > 1:
                raise DataFormatError(f"{name} outside [0,1]")
        norms = np.linalg.norm(self.normal[self.mask], axis=-1)
        if norms.size and (norms.min() < 1 - 1e-4 or norms.max() > 1 + 1e-4):
            raise DataFormatError("normals not unit length on valid pixels")
        d = self.depth[self.mask]
        if d.size and d.min() <= 0:
            raise DataFormatError("non-positive depth on valid pixels")
        if self.depth.max() > far + 1e-4:
            raise DataFormatError(f"depth beyond far plane {far}")

    def maps(self):
        return {
            "albedo": self.albedo,
            "metallic": self.metallic,
            "roughness": self.roughness,
            "normal": self.normal,
            "depth": self.depth,
        }


def _unit(v):
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise UsageError("degenerate zero-length direction")
    return v / n


def camera_frame(camera):
    """Right/up/backward orthonormal basis, float32. Backward faces the camera."""
    forward = np.asarray(camera.look_at, dtype=np.float64) - np.asarray(
        camera.position, dtype=np.float64
    )
    forward = _unit(forward)
    world_up = np.array([0.0, 1.0, 0.0])
    if abs(float(forward @ world_up)) > 0.999:
        world_up = np.array([0.0, 0.0, 1.0])
    right = _unit(np.cross(forward, world_up))
    up = np.cross(right, forward)
    return (
        right.astype(np.float32),
        up.astype(np.float32),
        (-forward).astype(np.float32),
    )


def camera_rays(camera, h, w):
    """Unit ray directions through pixel centers, float32 (H,W,3)."""
    right, up, backward = camera_frame(camera)
    forward = -backward.astype(np.float64)
    tan_half = np.tan(np.deg2rad(camera.fov_deg) / 2.0)
    aspect = w / h
    xs = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * tan_half * aspect
    ys = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * tan_half
    dirs = (
        forward[None, None, :]
        + xs[None, :, None] * right.astype(np.float64)[None, None, :]
        + ys[:, None, None] * up.astype(np.float64)[None, None, :]
    )
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs.astype(np.float32)


def _euler_matrix(orientation):
    yaw, pitch, roll = (float(a) for a in orientation)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return ry @ rx @ rz


def _plane_normal(prim):
    return _euler_matrix(prim.orientation) @ np.array([0.0, 0.0, 1.0])


def _as_ray_origins(origin, n):
    origin = np.asarray(origin, dtype=np.float64)
    if origin.ndim == 1:
        return np.broadcast_to(origin, (n, 3))
    return origin


def _intersect_sphere(origin, dirs, prim):
    o = _as_ray_origins(origin, dirs.shape[0])
    oc = o - prim.position
    radius = float(prim.size[0])
    b = np.sum(dirs * oc, axis=1)
    c = np.sum(oc * oc, axis=1) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    cand = np.where(t1 > 1e-6, t1, np.where(t2 > 1e-6, t2, np.inf))
    return np.where(ok, cand, np.inf)


def _sphere_normal(origin, dirs, t, prim):
    o = _as_ray_origins(origin, dirs.shape[0])
    pts = o + dirs * t[:, None]
    n = pts - prim.position
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _intersect_plane(origin, dirs, prim):
    o = _as_ray_origins(origin, dirs.shape[0])
    n = _plane_normal(prim)
    denom = dirs @ n
    num = (prim.position - o) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    return np.where((np.abs(denom) > 1e-9) & (t > 1e-6), t, np.inf)


def _plane_normal_at(origin, dirs, t, prim):
    n = _plane_normal(prim)
    facing = -np.sign(dirs @ n)
    facing[facing == 0] = 1.0
    return facing[:, None] * n[None, :]


def _intersect_box(origin, dirs, prim):
    o = _as_ray_origins(origin, dirs.shape[0])
    rot = _euler_matrix(prim.orientation)
    ob = (o - prim.position) @ rot  # into box frame (rot is orthonormal)
    d = dirs @ rot
    with np.errstate(divide="ignore"):
        inv = 1.0 / d
    t_lo = (-prim.size - ob) * inv
    t_hi = (prim.size - ob) * inv
    lo = np.minimum(t_lo, t_hi)
    hi = np.maximum(t_lo, t_hi)
    # parallel rays: slab constraint becomes a containment test
    inside = (np.abs(ob) <= prim.size) | np.isfinite(inv)
    lo = np.where(np.isfinite(lo), lo, -np.inf)
    hi = np.where(np.isfinite(hi), hi, np.inf)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_near <= t_far) & (t_far > 1e-6) & inside.all(axis=1)
    t = np.where(t_near > 1e-6, t_near, t_far)
    return np.where(hit, t, np.inf)


def _box_normal(origin, dirs, t, prim):
    o = _as_ray_origins(origin, dirs.shape[0])
    rot = _euler_matrix(prim.orientation)
    pts = (o + dirs * t[:, None] - prim.position) @ rot
    rel = pts / prim.size
    axis = np.argmax(np.abs(rel), axis=1)
    n_local = np.zeros_like(pts)
    rows = np.arange(len(axis))
    signs = np.sign(rel[rows, axis])
    signs[signs == 0] = 1.0
    n_local[rows, axis] = signs
    return n_local @ rot.T


_INTERSECTORS = {
    "sphere": (_intersect_sphere, _sphere_normal),
    "box": (_intersect_box, _box_normal),
    "plane": (_intersect_plane, _plane_normal_at),
}


def _raycast(spec, origin, dirs, want_normals=True):
    """Nearest hit over all primitives. Returns (t, prim_index, world_normal)."""
    n_rays = dirs.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_idx = np.full(n_rays, -1, dtype=np.int64)
    for i, prim in enumerate(spec.primitives):
        fn, _ = _INTERSECTORS[prim.shape]
        t = fn(origin, dirs, prim)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_idx[closer] = i
    if not want_normals:
        return best_t, best_idx, None
    normals = np.zeros((n_rays, 3))
    origins = _as_ray_origins(origin, n_rays)
    for i, prim in enumerate(spec.primitives):
        sel = best_idx == i
        if not sel.any():
            continue
        _, nfn = _INTERSECTORS[prim.shape]
        normals[sel] = nfn(origins[sel], dirs[sel], best_t[sel], prim)
    return best_t, best_idx, normals


def geometry_from_depth(depth, camera, rays=None):
    """Per-pixel world positions from Euclidean depth + camera (float32)."""
    h, w = depth.shape[:2]
    if rays is None:
        rays = camera_rays(camera, h, w)
    pos = np.asarray(camera.position, dtype=np.float32)[None, None, :]
    return pos + rays * depth.reshape(h, w, 1)


def shade(intrinsics, camera, lights, ambient, background=None, rays=None, visibility=None):
    """Float32 deferred shading of a g-buffer; the single source of truth
    shared by render() and lightfit's relight().

    visibility: optional list of H,W float32 masks (one per light) for hard
    shadows; 1 = lit.
    """
    h, w = intrinsics.albedo.shape[:2]
    if rays is None:
        rays = camera_rays(camera, h, w)
    right, up, backward = camera_frame(camera)
    positions = geometry_from_depth(intrinsics.depth, camera, rays=rays)
    basis = np.stack([right, up, backward], axis=0)  # rows
    n_world = intrinsics.normal.astype(np.float32) @ basis  # n_cam coords -> world
    albedo = intrinsics.albedo.astype(np.float32)
    metal = intrinsics.metallic.astype(np.float32)
    rough = intrinsics.roughness.astype(np.float32)

    cam_pos = np.asarray(camera.position, dtype=np.float32)[None, None, :]
    view = cam_pos - positions
    view = view / np.maximum(np.linalg.norm(view, axis=-1, keepdims=True), np.float32(1e-12))

    spec_color = (np.float32(1.0) - metal) + metal * albedo
    spec_strength = np.float32(0.9) * metal
    shininess = np.float32(4.0) + (np.float32(1.0) - rough) ** 2 * np.float32(252.0)

    out = np.zeros((h, w, 3), dtype=np.float32)
    for k, light in enumerate(lights):
        lpos = np.asarray(light.position, dtype=np.float32)[None, None, :]
        lvec = lpos - positions
        d2 = np.maximum(np.sum(lvec * lvec, axis=-1, keepdims=True), np.float32(1e-12))
        ldir = lvec / np.sqrt(d2)
        ndotl = np.maximum(np.sum(n_world * ldir, axis=-1, keepdims=True), np.float32(0.0))
        falloff = np.asarray(light.intensity, dtype=np.float32)[None, None, :] / d2
        half = ldir + view
        half = half / np.maximum(np.linalg.norm(half, axis=-1, keepdims=True), np.float32(1e-12))
        ndoth = np.maximum(np.sum(n_world * half, axis=-1, keepdims=True), np.float32(0.0))
        lit = (ndotl > 0).astype(np.float32)
        term = albedo * (np.float32(1.0) - metal) * ndotl * falloff
        term += spec_color * spec_strength * (ndoth**shininess) * lit * falloff
        if visibility is not None:
            term *= visibility[k].reshape(h, w, 1).astype(np.float32)
        out += term
    out += np.float32(ambient) * albedo
    out = np.clip(out, np.float32(0.0), np.float32(1.0))
    if background is not None:
        out[~intrinsics.mask] = np.asarray(background, dtype=np.float32)
    return out


def render(spec, resolution, shadows=False):
    """Render a SceneSpec into (image, IntrinsicSet) at the given (H, W)."""
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    h, w = resolution
    if h < MIN_RESOLUTION or w < MIN_RESOLUTION:
        raise UsageError(f"resolution below minimum {MIN_RESOLUTION}x{MIN_RESOLUTION}")
    spec.validate()

    rays32 = camera_rays(spec.camera, h, w)
    dirs = rays32.reshape(-1, 3).astype(np.float64)
    origin = np.asarray(spec.camera.position, dtype=np.float64)
    t, idx, n_world = _raycast(spec, origin, dirs)

    valid = np.isfinite(t) & (t <= FAR_PLANE)
    idx = np.where(valid, idx, -1)

    right, up, backward = camera_frame(spec.camera)
    basis = np.stack([right, up, backward], axis=0).astype(np.float64)
    n_cam = n_world @ basis.T

    albedo = np.empty((h * w, 3), dtype=np.float32)
    metal = np.empty((h * w, 1), dtype=np.float32)
    rough = np.empty((h * w, 1), dtype=np.float32)
    bg = spec.background.astype(np.float32)
    albedo[:] = bg[None, :]
    metal[:] = 0.0
    rough[:] = 1.0
    for i, mat in enumerate(spec.materials):
        sel = idx == i
        if not sel.any():
            continue
        albedo[sel] = mat.albedo.astype(np.float32)
        metal[sel] = np.float32(mat.metallic)
        rough[sel] = np.float32(mat.roughness)

    normal = np.where(valid[:, None], n_cam, np.array([0.0, 0.0, 1.0])).astype(np.float32)
    depth = np.where(valid, t, FAR_PLANE).astype(np.float32)

    intr = IntrinsicSet(
        albedo=albedo.reshape(h, w, 3),
        metallic=metal.reshape(h, w, 1),
        roughness=rough.reshape(h, w, 1),
        normal=normal.reshape(h, w, 3),
        depth=depth.reshape(h, w, 1),
        mask=valid.reshape(h, w),
    )

    visibility = None
    if shadows:
        points = origin[None, :] + dirs * np.where(valid, t, 0.0)[:, None]
        visibility = []
        for light in spec.lights:
            vis = np.ones(h * w, dtype=np.float32)
            pv = points[valid]
            lvec = light.position[None, :] - pv
            dist = np.linalg.norm(lvec, axis=1)
            ldir = lvec / dist[:, None]
            t_occ, _, _ = _raycast(spec, pv + ldir * 1e-4, ldir, want_normals=False)
            vis_valid = (t_occ >= dist - 1e-4).astype(np.float32)
            vis[valid] = vis_valid
            visibility.append(vis.reshape(h, w))

    image = shade(
        intr, spec.camera, spec.lights, spec.ambient, spec.background,
        rays=rays32, visibility=visibility,
    )
    return image, intr


def sample_scene(seed, difficulty="simple"):
    """Draw a deterministic SceneSpec for the given seed and difficulty."""
    if difficulty not in _DIFFICULTY_CODES:
        raise UsageError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _DIFFICULTY_CODES[difficulty]])

    if difficulty == "simple":
        n_prims = int(rng.integers(1, 4))
        n_lights = 1
    else:
        n_prims = int(rng.integers(4, 9))
        n_lights = int(rng.integers(1, 5))

    primitives = []
    materials = []

    # first primitive is a large backdrop plane (floor or back wall)
    if rng.random() < 0.5:
        pos = np.array([0.0, -1.0 - rng.uniform(0.0, 0.5), 0.0])
        orientation = np.array([0.0, -np.pi / 2 + rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)])
    else:
        pos = np.array([0.0, 0.0, -1.5 - rng.uniform(0.0, 1.0)])
        orientation = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 0.0])
    primitives.append(Primitive("plane", pos, orientation, np.array([1.0, 1.0, 1.0])))

    for _ in range(n_prims - 1):
        kind = "sphere" if rng.random() < 0.55 else "box"
        center = np.array(
            [rng.uniform(-1.2, 1.2), rng.uniform(-0.9, 1.0), rng.uniform(-0.9, 0.9)]
        )
        if kind == "sphere":
            r = rng.uniform(0.25, 0.7)
            primitives.append(Primitive("sphere", center, np.zeros(3), np.array([r, r, r])))
        else:
            half = rng.uniform(0.2, 0.55, size=3)
            angles = rng.uniform(-np.pi, np.pi, size=3)
            primitives.append(Primitive("box", center, angles, half))

    for _ in range(n_prims):
        materials.append(
            Material(
                albedo=rng.uniform(0.0, 1.0, size=3),
                metallic=float(rng.uniform(0.0, 1.0)),
                roughness=float(rng.uniform(0.0, 1.0)),
            )
        )

    lights = []
    for _ in range(n_lights):
        lpos = np.array([rng.uniform(-2.0, 2.0), rng.uniform(0.3, 2.5), rng.uniform(0.8, 3.0)])
        base = rng.uniform(2.5, 10.0) / n_lights
        tint = rng.uniform(0.5, 1.0, size=3)
        lights.append(Light(lpos, base * tint))

    ambient = float(rng.uniform(0.0, 0.3))
    cam_pos = np.array(
        [rng.uniform(-1.2, 1.2), rng.uniform(0.2, 1.4), rng.uniform(2.6, 4.0)]
    )
    look_at = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.0])
    fov = float(rng.uniform(40.0, 60.0))
    background = rng.uniform(0.0, 0.35, size=3)

    spec = SceneSpec(
        primitives=primitives,
        materials=materials,
        lights=lights,
        ambient=ambient,
        camera=Camera(cam_pos, look_at, fov),
        background=background,
        seed=int(seed),
        difficulty=difficulty,
    )
    spec.validate()
    return spec


def _scene_seed(corpus_seed, split, index):
    # stable 64-bit FNV-style mix of (corpus seed, split, sample index)
    h = int(corpus_seed) & 0xFFFFFFFFFFFFFFFF
    for part in (0 if split == "train" else 1, index):
        h = ((h * 0x100000001B3) ^ part) & 0xFFFFFFFFFFFFFFFF
    return h


def write_sample(sample_dir, spec, image, intr):
    os.makedirs(sample_dir, exist_ok=True)
    arrays = dict(intr.maps())
    arrays["image"] = image
    arrays["mask"] = intr.mask.astype(np.float32)[..., None]
    for name in MAP_NAMES:
        write_tensor(os.path.join(sample_dir, f"{name}.dnt"), arrays[name])
    atomic_write_bytes(os.path.join(sample_dir, "scene.json"), spec.to_json().encode())


def generate_corpus(n_train, n_test, resolution, seed, out_dir, jobs=1, shadows=False):
    """Render a train/test corpus to disk and return the manifest dict."""
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    if n_train < 0 or n_test < 0:
        raise UsageError("sample counts must be non-negative")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create corpus directory: {exc}", path=out_dir)

    work = [("train", i) for i in range(n_train)] + [("test", i) for i in range(n_test)]

    def build(item):
        split, index = item
        difficulty = "cluttered" if index % 2 else "simple"
        spec = sample_scene(_scene_seed(seed, split, index), difficulty)
        image, intr = render(spec, resolution, shadows=shadows)
        intr.validate()
        sample_dir = os.path.join(out_dir, split, f"sample_{index:06d}")
        write_sample(sample_dir, spec, image, intr)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(build, work))
    else:
        for item in work:
            build(item)

    manifest = {
        "format_version": CORPUS_FORMAT_VERSION,
        "n_train": int(n_train),
        "n_test": int(n_test),
        "resolution": [int(resolution[0]), int(resolution[1])],
        "seed": int(seed),
        "far_plane": FAR_PLANE,
        "shadows": bool(shadows),
        "difficulty_rule": "even index simple, odd cluttered",
    }
    atomic_write_bytes(
        os.path.join(out_dir, MANIFEST_NAME),
        json.dumps(manifest, indent=2, sort_keys=True).encode(),
    )
    return manifest
