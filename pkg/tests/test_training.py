import dataclasses
import struct

import numpy as np
import pytest
import torch

from suft.data import DataError, DatasetManifest, DegradationSpec, ManifestRecord, read_manifest
from suft.network import NetworkConfig, SUFTNet
from suft.toyset import write_toy_dataset
from suft.training import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    ChecksumError,
    StructureError,
    TrainConfig,
    TrainState,
    VersionError,
    adam_step,
    fit,
    l1_loss,
    load_checkpoint,
    lr_for_epoch,
    model_from_checkpoint,
    new_state,
    read_trace,
    save_checkpoint,
    train_epoch,
)

NET = NetworkConfig(
    scale=4, base_channels=4, reduction=2, rgb_blocks=1, suft_stages=1,
    shallow_groups=1, shallow_blocks=1, deep_groups=1, deep_blocks=1,
)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return read_manifest(write_toy_dataset(root, n=3, size=32, seed=1)["train"])


def cfg(**kw):
    return TrainConfig(**{"patch_size": 16, "epochs": 2, **kw})


def test_l1_loss_examples():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert l1_loss(a, a, torch.ones(2, 2, dtype=bool)) == 0
    assert l1_loss(a + 0.5, a) == pytest.approx(0.5)
    gt = torch.tensor([[0.0, 2.0], [5.0, 4.0]])
    assert l1_loss(a, gt, torch.ones(2, 2, dtype=bool)).item() == pytest.approx(0.75)


def test_l1_loss_ignores_masked_pixels():
    pred, gt = torch.rand(4, 4), torch.rand(4, 4)
    mask = torch.rand(4, 4) > 0.3
    other = torch.where(mask, pred, pred + 100.0)
    assert l1_loss(pred, gt, mask) == l1_loss(other, gt, mask)
    assert l1_loss(pred, gt, mask) >= 0
    with pytest.raises(ValueError):
        l1_loss(pred, gt, torch.zeros(4, 4, dtype=bool))
    with pytest.raises(ValueError):
        l1_loss(pred, gt[:3])


def test_masked_pixels_get_zero_gradient():
    pred = torch.rand(3, 3, requires_grad=True)
    mask = torch.ones(3, 3, dtype=bool)
    mask[1, 1] = False
    l1_loss(pred, torch.zeros(3, 3), mask).backward()
    assert pred.grad[1, 1] == 0 and torch.count_nonzero(pred.grad) == 8


def test_lr_schedule():
    std = TrainConfig.standard()
    assert lr_for_epoch(0, std) == 1e-4
    assert lr_for_epoch(99, std) == 1e-4
    assert lr_for_epoch(100, std) == pytest.approx(1e-5, rel=1e-12)
    assert lr_for_epoch(205, std) == pytest.approx(1e-6, rel=1e-12)
    assert lr_for_epoch(70, TrainConfig.real_world()) == pytest.approx(3e-5, rel=1e-12)
    lrs = [lr_for_epoch(e, std) for e in range(400)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert len(set(lrs)) == 4
    with pytest.raises(ValueError):
        lr_for_epoch(-1, std)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def _scalar_state(value=0.0):
    return TrainState.fresh({"w": torch.tensor([value])})


def test_adam_zero_gradient_keeps_params():
    state = TrainState.fresh({"a": torch.randn(3, 2), "b": torch.randn(4)})
    before = {k: v.clone() for k, v in state.params.items()}
    adam_step(state, {k: torch.zeros_like(v) for k, v in before.items()}, 0.1)
    assert all(torch.equal(before[k], state.params[k]) for k in before)
    assert state.step == 1


def test_adam_first_step_hand_value():
    state = TrainState.fresh({"w": torch.zeros(1, dtype=torch.float64)})
    adam_step(state, {"w": torch.ones(1, dtype=torch.float64)}, 0.1)
    assert state.params["w"].item() == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-14)


def test_adam_matches_torch_optimizer():
    gen = torch.Generator().manual_seed(0)
    init = torch.randn(5, generator=gen, dtype=torch.float64)
    grads = [torch.randn(5, generator=gen, dtype=torch.float64) for _ in range(6)]
    state = TrainState.fresh({"w": init.clone()})
    ref = init.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    for g in grads:
        adam_step(state, {"w": g}, 1e-2)
        ref.grad = g.clone()
        opt.step()
    np.testing.assert_allclose(state.params["w"].numpy(), ref.detach().numpy(), rtol=1e-12)


def test_adam_structure_errors():
    state = _scalar_state()
    with pytest.raises(StructureError):
        adam_step(state, {"v": torch.ones(1)}, 0.1)
    with pytest.raises(StructureError):
        adam_step(state, {"w": torch.ones(2)}, 0.1)


def test_adam_deterministic():
    def run():
        state = TrainState.fresh({"w": torch.linspace(-1, 1, 7)})
        for k in range(5):
            adam_step(state, {"w": torch.sin(state.params["w"] * (k + 1))}, 1e-3)
        return state

    a, b = run(), run()
    assert torch.equal(a.params["w"], b.params["w"])
    assert torch.equal(a.exp_avg_sq["w"], b.exp_avg_sq["w"])


def _train(manifest, epochs=2, **kw):
    model, state = new_state(NET, cfg(epochs=epochs, **kw))
    for _ in range(epochs):
        train_epoch(state, manifest, NET, cfg(epochs=epochs, **kw), model=model)
    return state


def test_train_epoch_deterministic_and_traced(toy):
    a, b = _train(toy), _train(toy)
    assert a.epoch == 2 and a.step == 2 * len(toy)
    assert [r[3] for r in a.trace] == [r[3] for r in b.trace]
    assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)
    assert [r[0] for r in a.trace] == list(range(1, 7))


def test_train_epoch_batches(toy):
    state = _train(toy, epochs=1, batch_size=2)
    assert state.step == 2


def test_train_epoch_reports_bad_sample(tmp_path, toy):
    bad = ManifestRecord(str(tmp_path / "missing_depth.png"), toy.records[0].rgb_path)
    manifest = DatasetManifest([bad], "train", toy.d_max)
    model, state = new_state(NET, cfg())
    with pytest.raises(DataError, match="missing"):
        train_epoch(state, manifest, NET, cfg(), model=model)


def test_checkpoint_round_trip_bit_exact(tmp_path, toy):
    state = _train(toy, epochs=1)
    ckpt = Checkpoint(NET, cfg(), state, d_max=toy.d_max)
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    assert loaded.network == NET and loaded.train == cfg()
    assert (loaded.state.epoch, loaded.state.step, loaded.state.seed) == (1, 3, 0)
    for tree in ("params", "exp_avg", "exp_avg_sq"):
        orig, back = getattr(state, tree), getattr(loaded.state, tree)
        assert list(orig) == list(back)
        assert all(torch.equal(orig[k], back[k]) for k in orig)

    d, g = torch.rand(1, 1, 4, 4), torch.rand(1, 3, 16, 16)
    before = SUFTNet.from_params(NET, state.params).eval()
    with torch.no_grad():
        assert torch.equal(before(d, g).depth_sr, model_from_checkpoint(loaded)(d, g).depth_sr)


def test_checkpoint_corruption_and_version(tmp_path):
    model, state = new_state(NET, cfg())
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, Checkpoint(NET, cfg(), state))
    data = bytearray(path.read_bytes())
    data[200] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")

    import hashlib

    raw = path.read_bytes()[:-32]
    (text_len,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    text = raw[len(MAGIC) + 4: len(MAGIC) + 4 + text_len].replace(b"format_version = 1", b"format_version = 9")
    payload = MAGIC + struct.pack("<I", len(text)) + text + raw[len(MAGIC) + 4 + text_len:]
    (tmp_path / "v9.ckpt").write_bytes(payload + hashlib.sha256(payload).digest())
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "v9.ckpt")


def test_resume_reproduces_uninterrupted_run(tmp_path, toy):
    sched = dict(decay_period=2, epochs=5, checkpoint_every=0)
    straight = fit(NET, cfg(**sched), toy, out_dir=tmp_path / "a")

    fit(NET, cfg(**{**sched, "epochs": 3}), toy, out_dir=tmp_path / "b")
    partial = load_checkpoint(tmp_path / "b" / "final.ckpt")
    resumed = fit(NET, cfg(**sched), toy, out_dir=tmp_path / "b", resume=partial)

    trace_a = read_trace(tmp_path / "a" / "loss_trace.txt")
    trace_b = read_trace(tmp_path / "b" / "loss_trace.txt")
    assert [r[2] for r in trace_a] == [r[2] for r in trace_b]
    assert [r[:3] for r in trace_a] == [r[:3] for r in trace_b]
    assert trace_a[-1][2] == pytest.approx(1e-6)
    assert all(torch.equal(straight.state.params[k], resumed.state.params[k]) for k in straight.state.params)


def test_fit_writes_periodic_checkpoints(tmp_path, toy):
    fit(NET, cfg(epochs=4, checkpoint_every=2), toy, out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert names == ["epoch_0002.ckpt", "epoch_0004.ckpt", "final.ckpt"]
    rows = read_trace(tmp_path / "loss_trace.txt")
    assert len(rows) == 4 * len(toy) and rows[0][:3] == (1, 0, 1e-4)


def test_provided_lr_training(tmp_path, toy):
    from suft.data import degrade, load_sample, write_depth_png

    records = []
    for r in toy.records:
        depth, _ = load_sample(r)
        lr_path = tmp_path / (r.sample_id + "_lr.png")
        write_depth_png(lr_path, degrade(depth, DegradationSpec(4)).values)
        records.append(dataclasses.replace(r, lr_path=str(lr_path)))
    manifest = DatasetManifest(records, "train", toy.d_max)
    model, state = new_state(NET, cfg())
    train_epoch(state, manifest, NET, cfg(), DegradationSpec(4, "provided_lr"), model=model)
    assert state.step == len(records)
