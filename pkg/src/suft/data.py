"""RGB-D sample loading, bicubic degradation, patch cropping and depth scaling."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

VALID_SCALES = (2, 4, 8, 16)
METERS_TO_CM = 100.0


class DataError(Exception):
    """Base class for data-pipeline failures."""


class MissingFileError(DataError):
    pass


class MalformedFileError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class ManifestError(DataError):
    pass


@dataclass
class DepthMap:
    values: np.ndarray
    valid_mask: np.ndarray
    unit_to_cm: float = METERS_TO_CM

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError(f"depth must be 2D, got shape {self.values.shape}")
        if self.valid_mask.shape != self.values.shape:
            raise ValueError(
                f"mask shape {self.valid_mask.shape} != depth shape {self.values.shape}"
            )
        if not self.unit_to_cm > 0:
            raise ValueError(f"unit_to_cm must be positive, got {self.unit_to_cm}")
        if np.any(self.values[self.valid_mask] < 0):
            raise ValueError("valid depth values must be non-negative")

    @classmethod
    def from_values(cls, values, unit_to_cm: float = METERS_TO_CM) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, values > 0, unit_to_cm)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class GuidanceImage:
    values: np.ndarray  # 3 x H x W in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] != 3:
            raise ValueError(f"guidance must be 3xHxW, got {self.values.shape}")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("guidance values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]


@dataclass
class SamplePair:
    depth_hr: DepthMap
    guidance: GuidanceImage
    depth_lr: DepthMap
    scale: int

    def __post_init__(self):
        check_scale(self.scale)
        h, w = self.depth_lr.shape
        expected = (h * self.scale, w * self.scale)
        if self.depth_hr.shape != expected or self.guidance.shape != expected:
            raise DimensionMismatchError(
                f"HR depth {self.depth_hr.shape} and guidance {self.guidance.shape} "
                f"must both be {expected} for LR {self.depth_lr.shape} at x{self.scale}"
            )


@dataclass
class DegradationSpec:
    scale: int
    mode: str = "synthetic_bicubic"

    def __post_init__(self):
        check_scale(self.scale)
        if self.mode not in ("synthetic_bicubic", "provided_lr"):
            raise ValueError(f"unknown degradation mode {self.mode!r}")


@dataclass
class ManifestRecord:
    depth_path: str
    rgb_path: str
    unit_to_cm: float = METERS_TO_CM
    lr_path: str | None = None

    @property
    def sample_id(self) -> str:
        name = Path(self.depth_path).stem
        for suffix in ("_depth", "-depth"):
            if name.endswith(suffix):
                return name[: -len(suffix)]
        return name


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    split: str = "train"
    d_max: float = 10.0

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ManifestError(f"split must be train or test, got {self.split!r}")
        if not self.d_max > 0:
            raise ManifestError(f"d_max must be positive, got {self.d_max}")

    @property
    def count(self) -> int:
        return len(self.records)

    def __len__(self):
        return len(self.records)


def check_scale(scale: int) -> int:
    if scale not in VALID_SCALES:
        raise ValueError(f"scale must be one of {VALID_SCALES}, got {scale}")
    return scale


# -- bicubic resampling ------------------------------------------------------


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def reflect_index(idx, n: int):
    """Fold integer indices into [0, n) by mirror reflection without edge repeat."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def resample_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """Dense (n_out, n_in) matrix applying 1D bicubic resampling.

    Half-pixel centres; when shrinking, the kernel is stretched by the
    inverse scale so the filter also acts as an anti-aliasing prefilter.
    Rows are normalised to sum to one.
    """
    scale = n_out / n_in
    support_scale = 1.0 / scale if scale < 1 else 1.0
    centres = (np.arange(n_out) + 0.5) / scale - 0.5
    radius = 2.0 * support_scale
    left = np.floor(centres - radius).astype(int)
    taps = int(np.ceil(2 * radius)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((centres[:, None] - idx) / support_scale, a)
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, reflect_index(idx, n_in).ravel()), weights.ravel())
    return mat


def bicubic_resample(img, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2D array with a separable Keys (a=-0.5) bicubic filter."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValueError(f"expected a non-empty 2D array, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dims must be positive, got {out_h}x{out_w}")
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    return resample_matrix(in_h, out_h) @ img @ resample_matrix(in_w, out_w).T


def degrade(depth_hr: DepthMap, spec: DegradationSpec) -> DepthMap:
    """Synthesise a low-resolution depth map by bicubic downsampling."""
    h, w = depth_hr.shape
    s = spec.scale
    if h % s or w % s:
        raise DimensionMismatchError(f"depth dims {h}x{w} not divisible by scale {s}")
    values = bicubic_resample(depth_hr.values, h // s, w // s)
    mask = depth_hr.valid_mask.reshape(h // s, s, w // s, s).all(axis=(1, 3))
    # bicubic overshoot near depth discontinuities can dip below zero
    values = np.where(mask, np.maximum(values, 0.0), 0.0)
    return DepthMap(values, mask, depth_hr.unit_to_cm)


def modcrop(depth: DepthMap, guidance: GuidanceImage, scale: int):
    """Trim bottom/right borders so both dims are multiples of ``scale``."""
    h, w = depth.shape
    h2, w2 = h - h % scale, w - w % scale
    return (
        DepthMap(depth.values[:h2, :w2], depth.valid_mask[:h2, :w2], depth.unit_to_cm),
        GuidanceImage(guidance.values[:, :h2, :w2]),
    )


def crop_offset(shape, size: int, seed) -> tuple[int, int]:
    h, w = shape
    if size < 1 or h < size or w < size:
        raise ValueError(f"cannot crop {size}x{size} patch from {h}x{w} image")
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def crop_training_patch(depth_hr: DepthMap, guidance: GuidanceImage, size: int, seed):
    """Co-located random crop of depth and guidance.

    ``seed`` may be an int or a sequence of ints (e.g. ``(seed, epoch, index)``);
    it is handed straight to :func:`numpy.random.default_rng`.
    """
    if depth_hr.shape != guidance.shape:
        raise DimensionMismatchError(
            f"depth {depth_hr.shape} and guidance {guidance.shape} are not aligned"
        )
    y, x = crop_offset(depth_hr.shape, size, seed)
    sl = (slice(y, y + size), slice(x, x + size))
    return (
        DepthMap(depth_hr.values[sl], depth_hr.valid_mask[sl], depth_hr.unit_to_cm),
        GuidanceImage(guidance.values[(slice(None),) + sl]),
    )


def normalize_depth(d: DepthMap | np.ndarray, d_max: float) -> np.ndarray:
    if not d_max > 0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    values = d.values if isinstance(d, DepthMap) else np.asarray(d, dtype=np.float64)
    return np.clip(values / d_max, 0.0, 1.0)


def denormalize_depth(x, d_max: float) -> np.ndarray:
    if not d_max > 0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    return np.asarray(x, dtype=np.float64) * d_max


# -- file IO -----------------------------------------------------------------


def png_depth_factor(unit_to_cm: float) -> float:
    """Stored-integer to native-unit factor: millimetres for metric data,
    raw values otherwise (disparity is kept as-is)."""
    return 1e-3 if unit_to_cm == METERS_TO_CM else 1.0


def read_raw_float(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise MalformedFileError(f"{path}: truncated header")
    h, w = struct.unpack("<ii", data[:8])
    if h < 1 or w < 1 or len(data) != 8 + 4 * h * w:
        raise MalformedFileError(f"{path}: header {h}x{w} does not match payload size")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(h, w).astype(np.float64)


def write_raw_float(path, values) -> None:
    values = np.asarray(values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", h, w))
        fh.write(values.tobytes())


def read_depth_file(path, unit_to_cm: float = METERS_TO_CM) -> DepthMap:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"depth file not found: {path}")
    if path.suffix.lower() == ".png":
        try:
            with Image.open(path) as im:
                raw = np.array(im)
        except Exception as exc:
            raise MalformedFileError(f"{path}: {exc}") from exc
        if raw.ndim != 2 or raw.dtype not in (np.uint16, np.int32):
            raise MalformedFileError(f"{path}: expected a 16-bit grayscale PNG")
        values = raw.astype(np.float64) * png_depth_factor(unit_to_cm)
    else:
        values = read_raw_float(path)
    values = np.where(np.isfinite(values), values, 0.0)
    return DepthMap(np.maximum(values, 0.0), values > 0, unit_to_cm)


def write_depth_png(path, values, unit_to_cm: float = METERS_TO_CM) -> None:
    stored = np.asarray(values, dtype=np.float64) / png_depth_factor(unit_to_cm)
    stored = np.clip(np.rint(stored), 0, 65535).astype(np.uint16)
    Image.fromarray(stored).save(path)


def read_rgb_file(path) -> GuidanceImage:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"RGB file not found: {path}")
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    return GuidanceImage(rgb.transpose(2, 0, 1))


def write_rgb_png(path, guidance) -> None:
    values = guidance.values if isinstance(guidance, GuidanceImage) else guidance
    rgb = np.clip(np.rint(np.asarray(values).transpose(1, 2, 0) * 255), 0, 255)
    Image.fromarray(rgb.astype(np.uint8)).save(path)


def load_sample(record: ManifestRecord, scale: int = 1):
    """Load one registered (depth, guidance) pair.

    ``scale`` is the ratio between guidance and depth resolution; it is 1 for
    HR ground truth and the SR factor when the depth file is an LR capture.
    """
    depth = read_depth_file(record.depth_path, record.unit_to_cm)
    guidance = read_rgb_file(record.rgb_path)
    h, w = depth.shape
    if guidance.shape != (h * scale, w * scale):
        raise DimensionMismatchError(
            f"{record.depth_path}: depth {depth.shape} x{scale} does not match "
            f"RGB {guidance.shape}"
        )
    return depth, guidance


def load_lr(record: ManifestRecord, hr_shape, scale: int) -> DepthMap:
    """Load a provided LR depth map, resampling it onto the HR/scale grid if needed."""
    if record.lr_path is None:
        raise ManifestError(f"{record.depth_path}: provided_lr mode needs an LR path")
    lr = read_depth_file(record.lr_path, record.unit_to_cm)
    target = (hr_shape[0] // scale, hr_shape[1] // scale)
    if lr.shape != target:
        values = np.maximum(bicubic_resample(lr.values, *target), 0.0)
        mask = bicubic_resample(lr.valid_mask.astype(float), *target) > 0.999
        lr = DepthMap(np.where(mask, values, 0.0), mask, lr.unit_to_cm)
    return lr


def make_pair(record: ManifestRecord, spec: DegradationSpec) -> SamplePair:
    """Load a record and attach its LR input (synthetic or provided)."""
    depth, guidance = load_sample(record)
    depth, guidance = modcrop(depth, guidance, spec.scale)
    if spec.mode == "synthetic_bicubic":
        lr = degrade(depth, spec)
    else:
        lr = load_lr(record, depth.shape, spec.scale)
    return SamplePair(depth, guidance, lr, spec.scale)


# -- manifests ---------------------------------------------------------------


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = {}
    for part in lines[0].split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise ManifestError(f"{path}:1: malformed header {lines[0]!r}")
        header[key.strip()] = value.strip()
    try:
        split = header["split"]
        d_max = float(header["d_max"])
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}:1: header needs split= and d_max=") from exc
    base = path.parent
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise ManifestError(f"{path}:{lineno}: expected 3 or 4 tab-separated columns")
        resolve = lambda p: p if os.path.isabs(p) else str(base / p)  # noqa: E731
        try:
            unit = float(cols[2])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: bad unit_to_cm {cols[2]!r}") from exc
        records.append(
            ManifestRecord(
                resolve(cols[0]), resolve(cols[1]), unit,
                resolve(cols[3]) if len(cols) == 4 else None,
            )
        )
    return DatasetManifest(records, split, d_max)


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        try:
            return os.path.relpath(Path(p).resolve(), base)
        except ValueError:
            return str(p)

    lines = [f"split={manifest.split}, d_max={manifest.d_max!r}"]
    for r in manifest.records:
        cols = [rel(r.depth_path), rel(r.rgb_path), repr(float(r.unit_to_cm))]
        if r.lr_path is not None:
            cols.append(rel(r.lr_path))
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n")
