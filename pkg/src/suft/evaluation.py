"""RMSE evaluation, bicubic baseline, report files and image exports."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import (
    METERS_TO_CM,
    DatasetManifest,
    DegradationSpec,
    bicubic_resample,
    denormalize_depth,
    make_pair,
    normalize_depth,
    write_depth_png,
)

log = logging.getLogger(__name__)

COLORMAP = "viridis"


def rmse(pred, gt, mask, unit_to_cm: float = METERS_TO_CM) -> float:
    """Root mean squared error over valid pixels, reported in cm (or native units)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    if not mask.any():
        raise ValueError("mask has no valid pixels")
    err = (pred[mask] - gt[mask]) * unit_to_cm
    return float(np.sqrt(np.mean(err * err)))


def unit_name(unit_to_cm: float) -> str:
    return "cm" if unit_to_cm == METERS_TO_CM else "disparity"


def config_fingerprint(*configs) -> str:
    blob = json.dumps([c if isinstance(c, dict) else c.to_dict() for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricReport:
    per_sample: list = field(default_factory=list)  # (sample_id, rmse)
    unit: str = "cm"
    scale: int = 4
    fingerprint: str = ""
    failures: list = field(default_factory=list)  # (sample_id, message)

    @property
    def mean_rmse(self) -> float:
        if not self.per_sample:
            return float("nan")
        return float(np.mean([r for _, r in self.per_sample]))

    @property
    def ok(self) -> bool:
        return not self.failures and bool(self.per_sample)


def _predict(model, lr_norm: np.ndarray, guidance: np.ndarray, diagnostics: bool):
    d = torch.from_numpy(lr_norm.astype(np.float32))[None, None]
    g = torch.from_numpy(guidance.astype(np.float32))[None]
    with torch.no_grad():
        out = model(d, g, diagnostics=diagnostics)
    maps = [m[0, 0].double().numpy() for m in out.uncertainty]
    return out.depth_sr[0, 0].double().numpy(), maps


def _run(manifest, spec, fingerprint, predict, export_dir=None) -> MetricReport:
    report = MetricReport(scale=spec.scale, fingerprint=fingerprint)
    units = {r.unit_to_cm for r in manifest.records}
    report.unit = unit_name(units.pop()) if len(units) == 1 else "mixed"
    results = {}
    for record in manifest.records:
        sid = record.sample_id
        try:
            pair = make_pair(record, spec)
            pred, maps = predict(pair)
            gt = pair.depth_hr
            results[sid] = rmse(pred, gt.values, gt.valid_mask, gt.unit_to_cm)
            if export_dir is not None:
                export_maps(export_dir, sid, pred, gt.values, maps, gt.unit_to_cm, gt.valid_mask)
        except Exception as exc:  # noqa: BLE001 - recorded, evaluation continues
            log.error("sample %s failed: %s", sid, exc)
            report.failures.append((sid, str(exc)))
    report.per_sample = sorted(results.items())
    return report


def evaluate(model, net_config, manifest: DatasetManifest, spec: DegradationSpec,
             export_dir=None) -> MetricReport:
    model.eval()
    d_max = manifest.d_max

    def predict(pair):
        lr = normalize_depth(pair.depth_lr, d_max)
        pred, maps = _predict(model, lr, pair.guidance.values, export_dir is not None)
        return denormalize_depth(pred, d_max), maps

    fp = config_fingerprint(net_config, {"mode": spec.mode, "scale": spec.scale})
    return _run(manifest, spec, fp, predict, export_dir)


def baseline_bicubic(manifest: DatasetManifest, spec: DegradationSpec) -> MetricReport:
    def predict(pair):
        return bicubic_resample(pair.depth_lr.values, *pair.depth_hr.shape), []

    fp = config_fingerprint({"baseline": "bicubic", "mode": spec.mode, "scale": spec.scale})
    return _run(manifest, spec, fp, predict)


def write_report(path, report: MetricReport) -> None:
    lines = [f"# unit\t{report.unit}", f"# scale\t{report.scale}", f"# config\t{report.fingerprint}"]
    lines += [f"{sid}\t{value!r}" for sid, value in report.per_sample]
    lines += [f"# failed\t{sid}\t{msg}" for sid, msg in report.failures]
    lines.append(f"mean\t{report.mean_rmse!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> tuple[MetricReport, float]:
    """Parse a report file; returns the report and the stored mean."""
    report = MetricReport()
    stored_mean = float("nan")
    for line in Path(path).read_text().splitlines():
        cols = line.split("\t")
        if cols[0] == "# unit":
            report.unit = cols[1]
        elif cols[0] == "# scale":
            report.scale = int(cols[1])
        elif cols[0] == "# config":
            report.fingerprint = cols[1]
        elif cols[0] == "# failed":
            report.failures.append((cols[1], cols[2] if len(cols) > 2 else ""))
        elif cols[0] == "mean":
            stored_mean = float(cols[1])
        elif len(cols) == 2:
            report.per_sample.append((cols[0], float(cols[1])))
    return report, stored_mean


def false_color(values, vmax: float | None = None) -> np.ndarray:
    """Map a 2D array linearly from [0, vmax] onto an RGB colormap (uint8)."""
    import matplotlib

    values = np.asarray(values, dtype=np.float64)
    vmax = float(values.max()) if vmax is None else vmax
    scaled = values / vmax if vmax > 0 else np.zeros_like(values)
    rgba = matplotlib.colormaps[COLORMAP](np.clip(scaled, 0, 1))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def export_maps(output_dir, sample_id: str, d_sr, gt, uncertainty_maps=(),
                unit_to_cm: float = METERS_TO_CM, mask=None) -> list[Path]:
    """Write ``<id>_sr.png`` (16-bit), ``<id>_err.png``, ``<id>_unc<k>.png`` and a sidecar."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    d_sr = np.asarray(d_sr, dtype=np.float64)
    err = np.abs(d_sr - np.asarray(gt, dtype=np.float64))
    if mask is not None:
        err = np.where(mask, err, 0.0)
    written = [out / f"{sample_id}_sr.png", out / f"{sample_id}_err.png"]
    write_depth_png(written[0], np.maximum(d_sr, 0.0), unit_to_cm)
    err_max = float(err.max())
    Image.fromarray(false_color(err, err_max)).save(written[1])
    meta = [f"colormap\t{COLORMAP}", f"err\t0\t{err_max!r}\t{unit_name(unit_to_cm)}"]
    for k, m in enumerate(uncertainty_maps, start=1):
        p = out / f"{sample_id}_unc{k}.png"
        Image.fromarray(false_color(np.squeeze(np.asarray(m)), 1.0)).save(p)
        meta.append(f"unc{k}\t0\t1.0")
        written.append(p)
    sidecar = out / f"{sample_id}_maps.txt"
    sidecar.write_text("\n".join(meta) + "\n")
    written.append(sidecar)
    return written


def export_uncertainty_png(path, sigma, vmax: float | None = None) -> float:
    """Write a false-colour PNG of a pixel-space uncertainty map; returns the ramp maximum."""
    sigma = np.squeeze(np.asarray(sigma, dtype=np.float64))
    vmax = float(sigma.max()) if vmax is None else vmax
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(false_color(sigma, vmax)).save(path)
    return vmax
