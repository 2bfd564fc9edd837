import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

import oracles
from suft.data import (
    DatasetManifest,
    DegradationSpec,
    DepthMap,
    GuidanceImage,
    ManifestRecord,
    bicubic_resample,
    degrade,
    load_sample,
    read_depth_file,
    read_manifest,
    write_depth_png,
    write_rgb_png,
)
from suft.evaluation import (
    MetricReport,
    baseline_bicubic,
    evaluate,
    export_maps,
    false_color,
    read_report,
    rmse,
    write_report,
)
from suft.network import NetworkConfig, build_model
from suft.toyset import write_toy_dataset

NET = NetworkConfig(
    scale=4, base_channels=4, reduction=2, rgb_blocks=1, suft_stages=1,
    shallow_groups=1, shallow_blocks=1, deep_groups=1, deep_blocks=1,
)


def test_rmse_examples():
    gt = np.random.default_rng(0).uniform(1, 3, (5, 5))
    mask = np.ones_like(gt, bool)
    assert rmse(gt, gt, mask) == 0
    assert rmse(gt + 0.01, gt, mask, 100.0) == pytest.approx(1.0, rel=1e-9)
    assert rmse(np.array([3.0, 4.0]), np.zeros(2), np.ones(2, bool), 1.0) == pytest.approx(
        np.sqrt(12.5), rel=1e-12
    )
    with pytest.raises(ValueError):
        rmse(gt, gt, np.zeros_like(mask))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1.0, 100.0]))
def test_rmse_matches_direct_summation(seed, unit):
    rng = np.random.default_rng(seed)
    pred, gt = rng.uniform(0, 5, (7, 6)), rng.uniform(0, 5, (7, 6))
    mask = rng.random((7, 6)) > 0.2
    mask[0, 0] = True
    expected = oracles.rmse_direct(pred, gt, mask, unit)
    assert abs(rmse(pred, gt, mask, unit) - expected) <= 1e-9 * expected


def test_rmse_ignores_masked_values():
    rng = np.random.default_rng(3)
    pred, gt = rng.random((4, 4)), rng.random((4, 4))
    mask = rng.random((4, 4)) > 0.5
    assert rmse(pred, gt, mask) == rmse(np.where(mask, pred, 1e6), gt, mask)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("evaltoy")
    return read_manifest(write_toy_dataset(root, n=4, size=32, seed=2)["test"])


def test_baseline_matches_direct_computation(toy):
    spec = DegradationSpec(4)
    report = baseline_bicubic(toy, spec)
    assert len(report.per_sample) == 4 and report.ok
    for (sid, value), record in zip(report.per_sample, toy.records):
        assert sid == record.sample_id
        depth, _ = load_sample(record)
        lr = degrade(depth, spec)
        pred = oracles.bicubic_direct(lr.values, 32, 32)
        assert value == pytest.approx(oracles.rmse_direct(pred, depth.values, depth.valid_mask, 100.0),
                                      rel=1e-9)
    assert report.mean_rmse == np.mean([v for _, v in report.per_sample])


def test_baseline_constant_scene_is_zero(tmp_path):
    write_depth_png(tmp_path / "a_depth.png", np.full((16, 16), 2.5))
    write_rgb_png(tmp_path / "a_rgb.png", np.full((3, 16, 16), 0.3))
    manifest = DatasetManifest(
        [ManifestRecord(str(tmp_path / "a_depth.png"), str(tmp_path / "a_rgb.png"))], "test", 10.0
    )
    assert baseline_bicubic(manifest, DegradationSpec(4)).mean_rmse == pytest.approx(0, abs=1e-9)


def test_evaluate_deterministic_and_order_independent(toy):
    model = build_model(NET)
    spec = DegradationSpec(4)
    a = evaluate(model, NET, toy, spec)
    b = evaluate(model, NET, toy, spec)
    shuffled = DatasetManifest(list(reversed(toy.records)), "test", toy.d_max)
    c = evaluate(model, NET, shuffled, spec)
    assert a.per_sample == b.per_sample == c.per_sample
    assert a.mean_rmse == c.mean_rmse
    assert all(v >= 0 for _, v in a.per_sample)


def test_evaluate_records_failures_and_continues(tmp_path, toy):
    bad = ManifestRecord(str(tmp_path / "gone_depth.png"), toy.records[0].rgb_path)
    manifest = DatasetManifest([bad] + toy.records[:2], "test", toy.d_max)
    report = evaluate(build_model(NET), NET, manifest, DegradationSpec(4))
    assert len(report.per_sample) == 2
    assert report.failures and report.failures[0][0] == "gone" and not report.ok


def test_report_file_round_trip(tmp_path):
    report = MetricReport([("a", 1.5), ("b", 2.25), ("c", 0.1)], "cm", 8, "abc123")
    write_report(tmp_path / "r.txt", report)
    lines = (tmp_path / "r.txt").read_text().splitlines()
    assert lines[:3] == ["# unit\tcm", "# scale\t8", "# config\tabc123"]
    assert lines[3] == "a\t1.5" and lines[-1].startswith("mean\t")
    back, stored_mean = read_report(tmp_path / "r.txt")
    assert back.per_sample == report.per_sample
    assert back.mean_rmse == stored_mean == report.mean_rmse
    assert (back.unit, back.scale, back.fingerprint) == ("cm", 8, "abc123")


def test_export_maps(tmp_path):
    rng = np.random.default_rng(0)
    gt = rng.uniform(1, 3, (8, 8))
    pred = gt + rng.normal(0, 0.05, gt.shape)
    maps = [rng.random((1, 8, 8)), rng.random((1, 8, 8))]
    written = export_maps(tmp_path, "s01", pred, gt, maps)
    names = sorted(p.name for p in written)
    assert names == ["s01_err.png", "s01_maps.txt", "s01_sr.png", "s01_unc1.png", "s01_unc2.png"]
    back = read_depth_file(tmp_path / "s01_sr.png")
    np.testing.assert_allclose(back.values, pred, atol=5e-4)
    err = np.asarray(Image.open(tmp_path / "s01_err.png"))
    assert err.shape == (8, 8, 3) and err.dtype == np.uint8
    assert "colormap" in (tmp_path / "s01_maps.txt").read_text()


def test_false_color_linear_ramp():
    img = false_color(np.array([[0.0, 0.5, 1.0]]), 1.0)
    assert img.shape == (1, 3, 3)
    assert not np.array_equal(img[0, 0], img[0, 2])
    assert np.array_equal(false_color(np.zeros((2, 2))), false_color(np.zeros((2, 2)), 0.0))


def test_evaluate_exports(tmp_path, toy):
    report = evaluate(build_model(NET), NET, toy, DegradationSpec(4), export_dir=tmp_path)
    assert report.ok
    assert (tmp_path / f"{toy.records[0].sample_id}_unc1.png").is_file()
