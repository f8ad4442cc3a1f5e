import json
import os

import numpy as np
import pytest

from flowir import scenegen
from flowir.errors import UsageError
from flowir.scenegen import Camera, Light, Material, Primitive, SceneSpec


def lambertian_sphere_scene(albedo=0.5, metallic=0.0, falloff=0.8):
    """Camera on +z axis looking at a unit sphere; light 1m above the
    nearest surface point along the normal so I/d^2 = falloff exactly."""
    return SceneSpec(
        primitives=[
            Primitive("sphere", np.array([0.0, 0.0, 0.0]), np.zeros(3), np.array([1.0, 1.0, 1.0]))
        ],
        materials=[Material(np.full(3, albedo), metallic, 0.5)],
        lights=[Light(np.array([0.0, 0.0, 2.0]), np.full(3, falloff))],
        ambient=0.0,
        camera=Camera(np.array([0.0, 0.0, 3.0]), np.zeros(3), 45.0),
        background=np.zeros(3),
        seed=0,
    )


def test_lambertian_center_pixel_exact():
    img, intr = scenegen.render(lambertian_sphere_scene(), (9, 9))
    assert img[4, 4] == pytest.approx((0.4, 0.4, 0.4), abs=1e-7)
    assert np.array_equal(intr.normal[4, 4], np.array([0, 0, 1], np.float32))
    assert intr.depth[4, 4, 0] == np.float32(2.0)


def test_zero_albedo_scene_is_black():
    img, _ = scenegen.render(lambertian_sphere_scene(albedo=0.0, metallic=0.0), (9, 9))
    assert img.max() == 0.0


def test_plane_facing_camera_constant_normal():
    spec = SceneSpec(
        primitives=[
            Primitive("plane", np.array([0.0, 0.0, 0.0]), np.zeros(3), np.ones(3))
        ],
        materials=[Material(np.full(3, 0.6), 0.0, 0.5)],
        lights=[Light(np.array([0.0, 0.0, 2.0]), np.ones(3))],
        ambient=0.1,
        camera=Camera(np.array([0.0, 0.0, 3.0]), np.zeros(3), 50.0),
        background=np.zeros(3),
        seed=0,
    )
    _, intr = scenegen.render(spec, (12, 12))
    assert intr.mask.all()
    assert np.allclose(intr.normal, [0.0, 0.0, 1.0], atol=1e-6)


def test_sample_scene_deterministic_and_sized():
    a = scenegen.sample_scene(7, "simple")
    b = scenegen.sample_scene(7, "simple")
    assert a.to_json() == b.to_json()
    assert 1 <= len(a.primitives) <= 3
    assert len(a.lights) == 1
    c = scenegen.sample_scene(7, "cluttered")
    assert 4 <= len(c.primitives) <= 8
    assert a.to_json() != c.to_json()


def test_sample_scene_rejects_unknown_difficulty():
    with pytest.raises(UsageError):
        scenegen.sample_scene(1, "extreme")


def test_render_rejects_small_resolution():
    with pytest.raises(UsageError):
        scenegen.render(lambertian_sphere_scene(), (4, 4))


def test_degenerate_camera_rejected():
    spec = lambertian_sphere_scene()
    spec.camera = Camera(np.zeros(3), np.zeros(3), 45.0)
    with pytest.raises(UsageError):
        scenegen.render(spec, (9, 9))


@pytest.mark.parametrize("seed", [0, 3, 12, 55])
def test_rendered_scenes_satisfy_invariants(seed):
    spec = scenegen.sample_scene(seed, "cluttered")
    img, intr = scenegen.render(spec, (16, 16))
    intr.validate()
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert img.dtype == np.float32


def test_scene_spec_json_roundtrip_renders_identically():
    spec = scenegen.sample_scene(21, "cluttered")
    img1, _ = scenegen.render(spec, (16, 16))
    img2, _ = scenegen.render(SceneSpec.from_json(spec.to_json()), (16, 16))
    assert np.array_equal(img1, img2)


def test_shadow_mode_renders_and_darkens_only():
    spec = scenegen.sample_scene(33, "cluttered")
    plain, _ = scenegen.render(spec, (16, 16))
    shadowed, intr = scenegen.render(spec, (16, 16), shadows=True)
    intr.validate()
    ambient_floor = np.float32(spec.ambient) * intr.albedo
    assert (shadowed <= plain + 1e-6).all()
    assert (shadowed[intr.mask] >= ambient_floor[intr.mask] - 1e-6).all()


def test_generate_corpus_layout_and_determinism(tmp_path):
    out1, out2 = tmp_path / "c1", tmp_path / "c2"
    m = scenegen.generate_corpus(3, 2, (16, 16), seed=4, out_dir=str(out1))
    assert m["n_train"] == 3 and m["n_test"] == 2
    sample = out1 / "train" / "sample_000000"
    for name in scenegen.MAP_NAMES:
        assert (sample / f"{name}.dnt").exists()
    assert (sample / "scene.json").exists()
    scenegen.generate_corpus(3, 2, (16, 16), seed=4, out_dir=str(out2))
    for rel_root, _, files in os.walk(out1):
        for f in files:
            p1 = os.path.join(rel_root, f)
            p2 = p1.replace(str(out1), str(out2))
            assert open(p1, "rb").read() == open(p2, "rb").read(), p1


def test_generate_corpus_empty_train_split(tmp_path):
    m = scenegen.generate_corpus(0, 1, (16, 16), seed=4, out_dir=str(tmp_path / "c"))
    assert m["n_train"] == 0
    assert not (tmp_path / "c" / "train").exists()
    assert (tmp_path / "c" / "test" / "sample_000000").exists()


def test_corpus_jobs_flag_matches_serial(tmp_path):
    out1, out2 = tmp_path / "s", tmp_path / "p"
    scenegen.generate_corpus(4, 0, (16, 16), seed=9, out_dir=str(out1), jobs=1)
    scenegen.generate_corpus(4, 0, (16, 16), seed=9, out_dir=str(out2), jobs=3)
    for i in range(4):
        a = (out1 / "train" / f"sample_{i:06d}" / "image.dnt").read_bytes()
        b = (out2 / "train" / f"sample_{i:06d}" / "image.dnt").read_bytes()
        assert a == b


def test_material_marginals_cover_unit_interval():
    albedo, metallic, roughness = [], [], []
    for seed in range(1000):
        spec = scenegen.sample_scene(seed, "cluttered" if seed % 2 else "simple")
        for mat in spec.materials:
            albedo.extend(mat.albedo.tolist())
            metallic.append(mat.metallic)
            roughness.append(mat.roughness)
    for name, vals in (("albedo", albedo), ("metallic", metallic), ("roughness", roughness)):
        span = max(vals) - min(vals)
        assert span >= 0.9, f"{name} span {span}"


def test_stored_sample_reproduces_image(tiny_corpus, tiny_train):
    idx = 1
    doc = tiny_train.scene_json(idx)
    spec = SceneSpec.from_dict(doc)
    res = tiny_train.manifest["resolution"]
    img, _ = scenegen.render(spec, tuple(res))
    assert np.array_equal(img, tiny_train.images()[idx])
