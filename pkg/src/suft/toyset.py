"""Synthetic RGB-D scenes: piecewise-constant depth with partially aligned colour edges."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import (
    METERS_TO_CM,
    DatasetManifest,
    DepthMap,
    GuidanceImage,
    ManifestRecord,
    write_depth_png,
    write_manifest,
    write_rgb_png,
)


def _shape_mask(rng, size):
    yy, xx = np.mgrid[:size, :size]
    if rng.random() < 0.5:
        y0, x0 = rng.integers(0, size - 8, 2)
        h, w = rng.integers(8, size // 2 + 1, 2)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    cy, cx = rng.uniform(0, size, 2)
    r = rng.uniform(size / 10, size / 3)
    return (yy - cy) ** 2 + (xx - cx) ** 2 < r * r


def _texture(rng, size):
    yy, xx = np.mgrid[:size, :size].astype(float)
    period = rng.uniform(3, 8)
    angle = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period)
    return stripes


def make_scene(rng: np.random.Generator, size: int = 64, n_objects: int = 4):
    """Return (DepthMap in metres, GuidanceImage) for one synthetic scene.

    Most depth regions get their own colour, so colour edges line up with depth
    edges; some objects share the background colour (depth edge without colour
    edge) and a few painted textures have no depth counterpart.
    """
    depth = np.full((size, size), rng.uniform(3.0, 6.0))
    colour = np.broadcast_to(rng.uniform(0.2, 0.8, (3, 1, 1)), (3, size, size)).copy()
    background = colour[:, 0, 0].copy()

    for _ in range(n_objects):
        mask = _shape_mask(rng, size)
        depth[mask] = rng.uniform(0.8, 3.0)
        tint = background if rng.random() < 0.25 else rng.uniform(0.05, 0.95, 3)
        colour[:, mask] = tint[:, None]

    for _ in range(rng.integers(1, 3)):
        mask = _shape_mask(rng, size)
        tex = _texture(rng, size)
        contrast = rng.uniform(0.2, 0.5)
        colour[:, mask] = np.clip(colour[:, mask] + contrast * (tex[mask] - 0.5), 0, 1)

    colour = np.clip(colour + rng.normal(0, 0.01, colour.shape), 0, 1)
    return DepthMap.from_values(depth), GuidanceImage(colour)


def write_toy_dataset(root, n: int = 5, size: int = 64, seed: int = 0, d_max: float = 10.0):
    """Write ``n`` scenes as ``toy_XXX_{depth,rgb}.png`` and a test+train manifest pair.

    Returns the paths of the written manifests.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        depth, rgb = make_scene(rng, size)
        d_path, r_path = root / f"toy_{i:03d}_depth.png", root / f"toy_{i:03d}_rgb.png"
        write_depth_png(d_path, depth.values)
        write_rgb_png(r_path, rgb)
        records.append(ManifestRecord(str(d_path), str(r_path), METERS_TO_CM))
    paths = {}
    for split in ("train", "test"):
        paths[split] = root / f"{split}.txt"
        write_manifest(paths[split], DatasetManifest(records, split, d_max))
    return paths
