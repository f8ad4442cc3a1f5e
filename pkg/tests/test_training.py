import numpy as np
import pytest
import torch

from flowir import evaluate, flow, training
from flowir.errors import DataFormatError, UsageError
from flowir.model import ConditionId


def test_manifest_required(tmp_path):
    with pytest.raises(DataFormatError):
        training.load_corpus(str(tmp_path), "train")


def test_corpus_split_loading(tiny_corpus, tiny_train, tiny_test):
    assert tiny_train.n == 24 and tiny_test.n == 4
    imgs = tiny_train.images()
    assert imgs.shape == (24, 16, 16, 3)
    z = tiny_train.image_latents()
    assert z.shape == (24, 3, 16, 16) and z.dtype == torch.float32
    zi = tiny_train.intrinsic_latents()
    assert zi.shape == (24, 5, 3, 16, 16)
    stacks = tiny_train.stacks()
    assert stacks.shape == (24, 9, 16, 16)
    assert len(tiny_train.fingerprint) == 64


def test_train_config_validation():
    with pytest.raises(UsageError):
        training.TrainConfig(mode="sd3").validate()
    with pytest.raises(UsageError):
        training.TrainConfig(adapter_mode="lora").validate()  # needs base ckpt
    with pytest.raises(UsageError):
        training.TrainConfig(lambda_rec=0.1).validate()  # needs renderer
    training.TrainConfig(lambda_rec=0.1, renderer_ckpt="r.dnfc").validate()


def test_fit_is_deterministic(tiny_train):
    cfg = training.TrainConfig(mode="flow", epochs=2, batch_size=8, seed=13, base_channels=4)
    m1, rows1, _, _ = training.fit(tiny_train, cfg)
    m2, rows2, _, _ = training.fit(tiny_train, cfg)
    assert rows1 == rows2
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)


def test_fit_loss_decreases(tiny_train):
    cfg = training.TrainConfig(mode="flow", epochs=30, batch_size=8, lr=2e-3,
                               weight_decay=0.0, seed=0, base_channels=8)
    _, rows, _, _ = training.fit(tiny_train, cfg)
    losses = [r[2] for r in rows]
    first = np.mean(losses[:6])
    last = np.mean(losses[-6:])
    assert last < 0.5 * first


def test_lambda_rec_zero_never_needs_renderer(tiny_train):
    cfg = training.TrainConfig(
        mode="flow", epochs=1, batch_size=8, seed=0, base_channels=4,
        lambda_rec=0.0, renderer_ckpt="/nonexistent/renderer.dnfc",
    )
    model, rows, _, _ = training.fit(tiny_train, cfg)  # must not try to load it
    assert all(r[3] == 0.0 for r in rows)


def test_all_baseline_modes_train(tiny_train):
    for mode in ("noise_flow", "image_ddpm_v", "ddpm_baseline", "pretrain"):
        cfg = training.TrainConfig(mode=mode, epochs=1, batch_size=8, seed=0, base_channels=4)
        model, rows, _, final = training.fit(tiny_train, cfg)
        assert np.isfinite(final), mode
        expected_in = training.IN_CHANNELS[mode]
        assert model.config.in_channels == expected_in


def test_train_log_format(tiny_train, tmp_path):
    cfg = training.TrainConfig(mode="flow", epochs=1, batch_size=8, seed=0, base_channels=4)
    log = tmp_path / "log.csv"
    training.train_run(tiny_train, cfg, log_csv=str(log))
    lines = log.read_text().strip().split("\n")
    assert lines[0] == "epoch,step,loss_flow,loss_rec,lr"
    assert len(lines) == 1 + 3  # 24 samples / batch 8
    cells = lines[1].split(",")
    assert cells[0] == "0" and cells[1] == "1"
    float(cells[2]), float(cells[3]), float(cells[4])


def test_train_run_writes_checkpoint(tiny_train, tmp_path):
    from flowir.model import load_checkpoint, model_from_checkpoint

    ckpt_path = tmp_path / "m.dnfc"
    cfg = training.TrainConfig(mode="flow", epochs=1, batch_size=8, seed=0, base_channels=4)
    res = training.train_run(tiny_train, cfg, out_ckpt=str(ckpt_path))
    ckpt = load_checkpoint(ckpt_path)
    assert ckpt.fingerprint == tiny_train.fingerprint
    assert ckpt.config["train"]["mode"] == "flow"
    rebuilt = model_from_checkpoint(ckpt)
    x = torch.randn(1, 3, 16, 16)
    t = torch.tensor([0.5])
    c = torch.tensor([0])
    with torch.no_grad():
        assert torch.equal(rebuilt(x, t, c), res["model"](x, t, c))


def test_one_training_step_deterministic(tiny_train):
    cfg = training.TrainConfig(mode="flow", epochs=1, batch_size=24, seed=5, base_channels=4)
    m1, _, _, _ = training.fit(tiny_train, cfg)
    m2, _, _, _ = training.fit(tiny_train, cfg)
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)


def condition_routing_matrix(model, split, steps=flow.DEFAULT_EULER_STEPS):
    """losses[i, j]: loss of the condition-i trajectory against the
    condition-j ground truth. Identity argmin = correct trigger routing.
    The full diagonal-identity assertion runs in the acceptance suite on a
    properly trained model; here the budget only supports a weaker check."""
    z_img = split.image_latents()
    z_intr = split.intrinsic_latents()
    losses = np.zeros((5, 5))
    with torch.no_grad():
        for ci in range(5):
            z1 = flow.euler_integrate(
                lambda z, t, c: model(
                    z, torch.full((z.shape[0],), float(t)), torch.full((z.shape[0],), ci, dtype=torch.long)
                ),
                z_img,
                steps,
                ci,
            )
            for cj in range(5):
                losses[ci, cj] = float(((z1 - z_intr[:, cj]) ** 2).mean())
    return losses


def test_condition_routing_is_active(tiny_test, small_flow_model):
    losses = condition_routing_matrix(small_flow_model, tiny_test)
    # distinct triggers produce genuinely different trajectories
    assert np.ptp(losses, axis=0).min() > 1e-4
    # the albedo trigger already routes correctly at this tiny budget
    assert np.argmin(losses[int(ConditionId.albedo)]) == int(ConditionId.albedo)


def test_pretrain_then_lora_and_full_finetune(tiny_train, tmp_path):
    base_path = tmp_path / "base.dnfc"
    pre_cfg = training.TrainConfig(mode="pretrain", epochs=2, batch_size=8, seed=0, base_channels=8)
    training.train_run(tiny_train, pre_cfg, out_ckpt=str(base_path))

    lora_cfg = training.TrainConfig(
        mode="flow", epochs=1, batch_size=8, seed=0, base_channels=8,
        adapter_mode="lora", base_ckpt=str(base_path), lora_rank=4,
    )
    res = training.train_run(tiny_train, lora_cfg)
    counts = res["params"]
    assert counts["trainable"] == counts["adapter"] > 0
    assert counts["trainable"] < 0.15 * (counts["total"] - counts["adapter"])

    full_cfg = training.TrainConfig(
        mode="flow", epochs=1, batch_size=8, seed=0, base_channels=8,
        adapter_mode="full_finetune", base_ckpt=str(base_path),
    )
    res_full = training.train_run(tiny_train, full_cfg)
    assert res_full["params"]["trainable"] == res_full["params"]["total"]
