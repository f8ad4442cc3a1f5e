import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowir import flow
from flowir.errors import NumericalError, UsageError
from flowir.model import ConditionId, build_model, ModelConfig


def test_encode_albedo_affine():
    x = np.full((4, 4, 3), 0.5, dtype=np.float32)
    assert np.all(flow.encode(x, "albedo") == 0.0)


def test_encode_replicates_single_channel():
    x = np.full((4, 4, 1), 0.25, dtype=np.float32)
    z = flow.encode(x, "roughness")
    assert z.shape == (4, 4, 3)
    assert np.all(z == -0.5)
    assert np.all(z[..., 0] == z[..., 1]) and np.all(z[..., 1] == z[..., 2])


def test_encode_depth_far_plane_maps_to_one():
    z = flow.encode(np.full((2, 2, 1), 10.0, dtype=np.float32), "depth")
    assert np.all(z == 1.0)


def test_encode_rejects_out_of_range():
    with pytest.raises(UsageError):
        flow.encode(np.full((2, 2, 3), 1.5, dtype=np.float32), "albedo")
    with pytest.raises(UsageError):
        flow.encode(np.zeros((2, 2, 1), dtype=np.float32), "depth")


def test_roundtrip_exact_on_random_maps():
    rng = np.random.default_rng(0)
    alb = rng.random((8, 8, 3)).astype(np.float32)
    assert np.abs(flow.decode(flow.encode(alb, "albedo"), "albedo") - alb).max() == 0.0
    met = rng.random((8, 8, 1)).astype(np.float32)
    assert np.abs(flow.decode(flow.encode(met, "metallic"), "metallic") - met).max() == 0.0
    dep = (rng.random((8, 8, 1)) * 9.9 + 0.05).astype(np.float32)
    assert np.abs(flow.decode(flow.encode(dep, "depth"), "depth") - dep).max() == 0.0


def test_roundtrip_exact_on_corpus_maps(tiny_train):
    intr = tiny_train.intrinsics(0)
    for name in ("albedo", "metallic", "roughness", "depth"):
        m = getattr(intr, name)
        back = flow.decode(flow.encode(m, name, tiny_train.far), name, tiny_train.far)
        assert np.abs(back - m).max() == 0.0, name
    n_back = flow.decode(flow.encode(intr.normal, "normal"), "normal")
    # unit inputs come back up to renormalization
    assert np.abs(n_back - intr.normal).max() < 1e-4


def test_decode_roughness_channel_mean():
    z = np.zeros((1, 1, 3))
    z[0, 0] = (-0.4, -0.5, -0.6)
    assert flow.decode(z, "roughness")[0, 0, 0] == pytest.approx(0.25, abs=1e-7)


def test_decode_degenerate_normal_guard():
    z = np.zeros((2, 2, 3))
    z[0, 0] = (1e-9, 0.0, 0.0)
    unit, degenerate = flow.renormalize_normals(z)
    assert degenerate[0, 0] and degenerate.sum() == 4
    assert np.array_equal(unit[0, 0], [0.0, 0.0, 1.0])
    out = flow.decode(z, "normal")
    assert np.array_equal(out[0, 0], np.array([0, 0, 1], dtype=np.float32))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_interpolate_endpoints_exact(seed):
    rng = np.random.default_rng(seed)
    z = torch.from_numpy(rng.standard_normal((2, 3, 4, 4)))
    zi = torch.from_numpy(rng.standard_normal((2, 3, 4, 4)))
    assert torch.equal(flow.interpolate(z, zi, 0.0), z)
    assert torch.equal(flow.interpolate(z, zi, 1.0), zi)


def test_interpolate_midpoint():
    z = -torch.ones(1, 3, 2, 2)
    zi = torch.ones(1, 3, 2, 2)
    assert torch.equal(flow.interpolate(z, zi, 0.5), torch.zeros_like(z))


def test_interpolate_rejects_bad_t():
    z = torch.zeros(1, 3, 2, 2)
    with pytest.raises(UsageError):
        flow.interpolate(z, z, 1.5)
    with pytest.raises(UsageError):
        flow.interpolate(z, torch.zeros(1, 3, 4, 4), 0.5)


def test_flow_target_identities():
    rng = np.random.default_rng(1)
    z = torch.from_numpy(rng.standard_normal((2, 3, 4, 4)))
    zi = torch.from_numpy(rng.standard_normal((2, 3, 4, 4)))
    assert torch.equal(flow.flow_target(z, z), torch.zeros_like(z))
    assert torch.equal(flow.flow_target(torch.zeros_like(z), torch.ones_like(z)), torch.ones_like(z))
    assert torch.equal(flow.flow_target(z, zi), -flow.flow_target(zi, z))


class _Oracle:
    """Velocity oracle returning the exact straight-path target."""

    def __init__(self, z_img, z_intr):
        self.z_img = z_img
        self.z_intr = z_intr

    def __call__(self, z_t, t, cond):
        return self.z_intr - self.z_img


def _random_batch(seed, b=4):
    rng = np.random.default_rng(seed)
    z = torch.from_numpy(rng.uniform(-1, 1, (b, 3, 8, 8)).astype(np.float32))
    zi = torch.from_numpy(rng.uniform(-1, 1, (b, 3, 8, 8)).astype(np.float32))
    t = torch.from_numpy(rng.uniform(0, 1, b).astype(np.float32))
    cond = torch.from_numpy(rng.integers(0, 5, b))
    return flow.FlowBatch(z_img=z, z_intr=zi, cond=cond, t=t)


def test_flow_loss_zero_at_oracle():
    batch = _random_batch(0)
    loss = flow.flow_loss(_Oracle(batch.z_img, batch.z_intr), batch)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_flow_loss_zero_model_unit_gap():
    b = 3
    batch = flow.FlowBatch(
        z_img=torch.zeros(b, 3, 8, 8),
        z_intr=torch.ones(b, 3, 8, 8),
        cond=torch.zeros(b, dtype=torch.long),
        t=torch.rand(b),
    )
    loss = flow.flow_loss(lambda z, t, c: torch.zeros_like(z), batch)
    assert float(loss) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flow_loss_nonnegative(seed):
    batch = _random_batch(seed)
    m = build_model(ModelConfig(base_channels=4, depth_levels=2, embed_dim=8), seed=0)
    with torch.no_grad():
        assert float(flow.flow_loss(m, batch)) >= 0.0


def test_euler_exact_on_constant_field():
    rng = np.random.default_rng(2)
    z0 = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
    target = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
    v = target - z0
    for k in (1, 3, 10):
        z1 = flow.euler_integrate(lambda z, t, c: v, z0, k)
        assert torch.allclose(z1, target, atol=1e-12)


def test_euler_linear_field_matches_scalar_recurrence():
    # independent oracle: the scalar recurrence z <- z * (1 - 1/K)
    K = 10
    expected = 1.0
    for _ in range(K):
        expected *= 1.0 - 1.0 / K
    assert expected == pytest.approx(0.34867844010000004, abs=1e-15)
    z0 = torch.ones(1, 3, 4, 4, dtype=torch.float64)
    z1 = flow.euler_integrate(lambda z, t, c: -z, z0, K)
    assert float(z1[0, 0, 0, 0]) == pytest.approx(expected, abs=1e-6)


def test_euler_first_order_convergence():
    exact = np.exp(-1.0)

    def err(k):
        z = flow.euler_integrate(lambda z, t, c: -z, torch.ones(1, dtype=torch.float64), k)
        return abs(float(z) - exact)

    for k in (16, 32, 64):
        ratio = err(k) / err(2 * k)
        assert 1.8 < ratio < 2.2, (k, ratio)


def test_euler_rejects_zero_steps_and_nonfinite():
    with pytest.raises(UsageError):
        flow.euler_integrate(lambda z, t, c: z, torch.ones(1), 0)
    with pytest.raises(NumericalError, match="velocity at Euler step 0/4"):
        flow.euler_integrate(
            lambda z, t, c: z * float("inf"), torch.ones(1, 3, 4, 4), 4
        )
    with pytest.raises(NumericalError, match="state entering Euler step 0/2"):
        flow.euler_integrate(
            lambda z, t, c: z, torch.full((1, 3, 4, 4), float("nan")), 2
        )


def test_euler_sample_k1_equals_one_step(tiny_train):
    m = build_model(ModelConfig(base_channels=4, depth_levels=2, embed_dim=8), seed=5)
    m.eval()
    img = tiny_train.images()[0]
    one = flow.euler_sample(m, img, "albedo", steps=1)
    est = flow.one_step_estimate(m, img)
    assert np.array_equal(one, est.albedo)


def test_one_step_estimate_oracle_recovers_ground_truth(tiny_train):
    img = tiny_train.images()[0]
    intr = tiny_train.intrinsics(0)
    z_img = tiny_train.image_latents()[0:1]
    z_all = tiny_train.intrinsic_latents()[0]

    class CondOracle:
        def __call__(self, z, t, cond):
            return z_all[int(cond[0])].unsqueeze(0) - z_img

    est = flow.one_step_estimate(CondOracle(), img)
    assert np.abs(est.albedo - intr.albedo).max() < 1e-6
    assert np.abs(est.metallic - intr.metallic).max() < 1e-6
    assert np.abs(est.depth - intr.depth).max() < 2e-5
    # normals agree up to renormalization
    dots = np.clip(np.sum(est.normal * intr.normal, axis=-1), -1, 1)
    assert np.degrees(np.arccos(dots)).max() < 0.1


def test_one_step_estimate_valid_and_deterministic(tiny_train):
    m = build_model(ModelConfig(base_channels=4, depth_levels=2, embed_dim=8), seed=7)
    m.eval()
    img = tiny_train.images()[1]
    a = flow.one_step_estimate(m, img)
    b = flow.one_step_estimate(m, img)
    a.validate()
    for name, arr in a.maps().items():
        assert np.array_equal(arr, getattr(b, name)), name
