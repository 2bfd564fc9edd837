"""L1 training loop, step-decay schedule, Adam updates and checkpoint files."""

from __future__ import annotations

import hashlib
import io
import logging
import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import (
    DataError,
    DatasetManifest,
    DegradationSpec,
    DepthMap,
    GuidanceImage,
    crop_offset,
    crop_training_patch,
    degrade,
    load_lr,
    load_sample,
    normalize_depth,
)
from .network import NetworkConfig, SUFTNet, build_model

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"SUFTCKPT"


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class StructureError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay_factor: float = 0.1
    decay_period: int = 100
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    patch_size: int = 256
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.decay_period < 1:
            raise ValueError("decay_period must be >= 1")

    @classmethod
    def standard(cls, **kw) -> "TrainConfig":
        return cls(**{"lr0": 1e-4, "decay_factor": 0.1, "decay_period": 100, **kw})

    @classmethod
    def real_world(cls, **kw) -> "TrainConfig":
        return cls(**{"lr0": 6e-5, "decay_factor": 0.5, "decay_period": 70, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    params: "OrderedDict[str, torch.Tensor]"
    exp_avg: "OrderedDict[str, torch.Tensor]"
    exp_avg_sq: "OrderedDict[str, torch.Tensor]"
    epoch: int = 0
    step: int = 0
    seed: int = 0
    trace: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params, seed: int = 0) -> "TrainState":
        params = OrderedDict(params)
        zeros = lambda: OrderedDict((k, torch.zeros_like(v)) for k, v in params.items())  # noqa: E731
        return cls(params, zeros(), zeros(), seed=seed)


def l1_loss(d_sr, d_hr, mask=None):
    """Mean absolute error over valid pixels."""
    d_sr, d_hr = torch.as_tensor(d_sr), torch.as_tensor(d_hr)
    if d_sr.shape != d_hr.shape:
        raise ValueError(f"shape mismatch: {tuple(d_sr.shape)} vs {tuple(d_hr.shape)}")
    diff = (d_sr - d_hr).abs()
    if mask is None:
        return diff.mean()
    mask = torch.as_tensor(mask, dtype=torch.bool).expand_as(diff)
    if not mask.any():
        raise ValueError("mask has no valid pixels")
    return diff[mask].mean()


def lr_for_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_period)


def adam_step(state: TrainState, grads, lr: float, cfg: TrainConfig | None = None) -> TrainState:
    """Bias-corrected Adam update of ``state.params`` in place."""
    cfg = cfg or TrainConfig()
    if set(grads) != set(state.params):
        raise StructureError(
            f"gradient keys do not match parameters: "
            f"{sorted(set(grads) ^ set(state.params))[:5]}"
        )
    state.step += 1
    t = state.step
    bc1 = 1 - cfg.beta1**t
    bc2 = 1 - cfg.beta2**t
    with torch.no_grad():
        for name, p in state.params.items():
            g = grads[name]
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise StructureError(f"{name}: grad shape {tuple(g.shape)} != {tuple(p.shape)}")
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            p.sub_(lr * (m / bc1) / denom)
    return state


# -- training loop -----------------------------------------------------------


def training_patch(record, spec: DegradationSpec, size: int, seed, cache=None):
    """Load, crop and degrade one training sample (numpy, native units)."""
    key = record.depth_path
    if cache is not None and key in cache:
        depth, guidance, lr = cache[key]
    else:
        depth, guidance = load_sample(record)
        lr = load_lr(record, depth.shape, spec.scale) if spec.mode == "provided_lr" else None
        if cache is not None:
            cache[key] = (depth, guidance, lr)
    if lr is None:
        depth_p, guid_p = crop_training_patch(depth, guidance, size, seed)
        return depth_p, guid_p, degrade(depth_p, spec)
    s = spec.scale
    if size % s:
        raise ValueError(f"patch size {size} not divisible by scale {s}")
    y, x = crop_offset(lr.shape, size // s, seed)
    lr_sl = (slice(y, y + size // s), slice(x, x + size // s))
    hr_sl = (slice(y * s, (y + size // s) * s), slice(x * s, (x + size // s) * s))
    return (
        DepthMap(depth.values[hr_sl], depth.valid_mask[hr_sl], depth.unit_to_cm),
        GuidanceImage(guidance.values[(slice(None),) + hr_sl]),
        DepthMap(lr.values[lr_sl], lr.valid_mask[lr_sl], lr.unit_to_cm),
    )


def to_tensors(depth_hr: DepthMap, guidance: GuidanceImage, depth_lr: DepthMap, d_max: float):
    as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))  # noqa: E731
    return (
        as_t(normalize_depth(depth_lr, d_max))[None, None],
        as_t(guidance.values)[None],
        as_t(normalize_depth(depth_hr, d_max))[None, None],
        torch.from_numpy(depth_hr.valid_mask)[None, None],
    )


def attach(model: SUFTNet, state: TrainState) -> SUFTNet:
    """Point the model's parameters at the tensors held by ``state``."""
    for name, p in model.named_parameters():
        p.data = state.params[name]
    return model


def train_step(model, state, batch, lr, cfg):
    d_lr, i_g, d_hr, mask = batch
    model.zero_grad(set_to_none=True)
    loss = l1_loss(model(d_lr, i_g).depth_sr, d_hr, mask)
    loss.backward()
    grads = {n: p.grad for n, p in model.named_parameters()}
    adam_step(state, grads, lr, cfg)
    return loss.item()


def train_epoch(
    state: TrainState,
    manifest: DatasetManifest,
    net_config: NetworkConfig,
    cfg: TrainConfig,
    spec: DegradationSpec | None = None,
    model: SUFTNet | None = None,
    trace_file=None,
    cache: dict | None = None,
) -> TrainState:
    """One pass over ``manifest`` with one random patch per sample."""
    spec = spec or DegradationSpec(net_config.scale)
    model = attach(model or SUFTNet(net_config), state).train()
    epoch = state.epoch
    lr = lr_for_epoch(epoch, cfg)
    order = np.random.default_rng((state.seed, epoch)).permutation(len(manifest))
    for start in range(0, len(order), cfg.batch_size):
        parts = []
        for idx in order[start : start + cfg.batch_size]:
            record = manifest.records[idx]
            try:
                patch = training_patch(record, spec, cfg.patch_size, (state.seed, epoch, int(idx)), cache)
            except (DataError, ValueError) as exc:
                raise DataError(f"sample {idx} ({record.sample_id}): {exc}") from exc
            parts.append(to_tensors(*patch, manifest.d_max))
        batch = tuple(torch.cat(t) for t in zip(*parts))
        loss = train_step(model, state, batch, lr, cfg)
        row = (state.step, epoch, lr, loss)
        state.trace.append(row)
        if trace_file is not None:
            trace_file.write(format_trace_row(row) + "\n")
    state.epoch += 1
    return state


def format_trace_row(row) -> str:
    step, epoch, lr, loss = row
    return f"{step}\t{epoch}\t{lr!r}\t{loss!r}"


def read_trace(path) -> list[tuple[int, int, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            step, epoch, lr, loss = line.split("\t")
            rows.append((int(step), int(epoch), float(lr), float(loss)))
    return rows


def new_state(net_config: NetworkConfig, cfg: TrainConfig) -> tuple[SUFTNet, TrainState]:
    model = build_model(net_config)
    params = OrderedDict((n, p.data) for n, p in model.named_parameters())
    return model, TrainState.fresh(params, cfg.seed)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    network: NetworkConfig
    train: TrainConfig
    state: TrainState
    d_max: float = 10.0
    degradation: str = "synthetic_bicubic"
    format_version: int = FORMAT_VERSION


def _format_value(v) -> str:
    return repr(v) if isinstance(v, (float, str)) else str(v)


def _parse_value(text: str, like):
    if isinstance(like, bool):
        if text not in ("True", "False"):
            raise CheckpointError(f"bad boolean {text!r}")
        return text == "True"
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text.strip("'\"")


def _manifest_text(ckpt: Checkpoint) -> str:
    lines = [f"format_version = {ckpt.format_version}", "[network]"]
    lines += [f"{k} = {_format_value(v)}" for k, v in ckpt.network.to_dict().items()]
    lines.append("[train]")
    lines += [f"{k} = {_format_value(v)}" for k, v in ckpt.train.to_dict().items()]
    lines += ["[data]", f"d_max = {ckpt.d_max!r}", f"degradation = {ckpt.degradation}"]
    lines.append("[state]")
    s = ckpt.state
    lines += [f"epoch = {s.epoch}", f"step = {s.step}", f"seed = {s.seed}"]
    return "\n".join(lines) + "\n"


def _parse_manifest(text: str):
    sections: dict[str, dict[str, str]] = {"": {}}
    current = ""
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = {}
            continue
        key, _, value = line.partition("=")
        sections[current][key.strip()] = value.strip()
    return sections


def _typed(cls, raw: dict):
    defaults = cls.__dataclass_fields__
    out = {}
    for f in fields(cls):
        if f.name in raw:
            out[f.name] = _parse_value(raw[f.name], defaults[f.name].default)
    return cls(**out)


def _write_tensor(buf, key: str, t: torch.Tensor):
    kb = key.encode()
    arr = t.detach().cpu().numpy().astype("<f4", copy=False)
    buf.write(struct.pack("<I", len(kb)))
    buf.write(kb)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    text = _manifest_text(ckpt).encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    s = ckpt.state
    tensors = [("param/" + k, v) for k, v in s.params.items()]
    tensors += [("adam_m/" + k, v) for k, v in s.exp_avg.items()]
    tensors += [("adam_v/" + k, v) for k, v in s.exp_avg_sq.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for key, t in tensors:
        _write_tensor(buf, key, t)
    payload = buf.getvalue()
    payload += hashlib.sha256(payload).digest()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 32 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (file corrupt or truncated)")

    view = memoryview(payload)
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (text_len,) = struct.unpack("<I", take(4))
    sections = _parse_manifest(bytes(take(text_len)).decode())
    version = int(sections[""].get("format_version", -1))
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
    network = _typed(NetworkConfig, sections["network"])
    train = _typed(TrainConfig, sections["train"])

    trees = {"param": OrderedDict(), "adam_m": OrderedDict(), "adam_v": OrderedDict()}
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        key = bytes(take(klen)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = math.prod(shape)
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        prefix, _, name = key.partition("/")
        trees[prefix][name] = torch.from_numpy(arr.astype(np.float32))

    st = sections["state"]
    state = TrainState(
        trees["param"], trees["adam_m"], trees["adam_v"],
        epoch=int(st["epoch"]), step=int(st["step"]), seed=int(st["seed"]),
    )
    data_sec = sections.get("data", {})
    return Checkpoint(
        network, train, state,
        d_max=float(data_sec.get("d_max", 10.0)),
        degradation=data_sec.get("degradation", "synthetic_bicubic"),
        format_version=version,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SUFTNet:
    return SUFTNet.from_params(ckpt.network, ckpt.state.params).eval()


def fit(
    net_config: NetworkConfig,
    cfg: TrainConfig,
    manifest: DatasetManifest,
    spec: DegradationSpec | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Train for ``cfg.epochs`` total epochs, optionally resuming.

    With ``out_dir`` set, the loss trace is appended to ``loss_trace.txt``,
    ``epoch_XXXX.ckpt`` is written every ``cfg.checkpoint_every`` epochs and
    ``final.ckpt`` at the end.
    """
    spec = spec or DegradationSpec(net_config.scale)
    if resume is not None:
        model = SUFTNet(net_config)
        state = resume.state
    else:
        model, state = new_state(net_config, cfg)
    out = Path(out_dir) if out_dir is not None else None
    trace_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace_fh = open(out / "loss_trace.txt", "a" if resume is not None else "w")
    cache: dict = {}

    def snapshot():
        return Checkpoint(net_config, cfg, state, manifest.d_max, spec.mode)

    try:
        while state.epoch < cfg.epochs:
            train_epoch(state, manifest, net_config, cfg, spec, model, trace_fh, cache)
            last = state.trace[-1][3] if state.trace else float("nan")
            log.info("epoch %d done, step %d, last loss %.6f", state.epoch, state.step, last)
            if out is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{state.epoch:04d}.ckpt", snapshot())
    finally:
        if trace_fh is not None:
            trace_fh.close()
    ckpt = snapshot()
    if out is not None:
        save_checkpoint(out / "final.ckpt", ckpt)
    return ckpt
