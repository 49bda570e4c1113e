"""Procedural top-down camera view of the gear platform around the peg.

The scene lives in the platform frame (millimeters, same frame as the grid).
An observation is an orthographic crop centred on the gripper, so moving the
gripper by ``d`` shifts every platform feature by ``-d`` in the image. The
in-hand gear occludes a disc in the middle of the frame, hiding the peg once
the gripper is close to it.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .core import GridMap, rng_stream

MANIFEST_VERSION = 1

_OCCLUDER_RGB = np.array([0.32, 0.34, 0.36])
_PEG_RGB = np.array([0.95, 0.85, 0.20])
_GEAR_RGB = np.array([0.80, 0.30, 0.22])


@dataclass(frozen=True)
class SceneParams:
    platform_radius_mm: float = 30.0
    peg_radius_mm: float = 2.5
    occluder_radius_mm: float = 10.0
    texture_seed: int = 1234
    view_window_mm: float = 40.0
    mounted_gear_offset_mm: tuple[float, float] = (-13.0, 9.0)
    mounted_gear_teeth: int = 20
    mounted_gear_radius_mm: float = 6.0
    image_size: int = 64

    def __post_init__(self):
        for name in ("platform_radius_mm", "peg_radius_mm", "occluder_radius_mm",
                     "view_window_mm", "mounted_gear_radius_mm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mounted_gear_teeth < 1 or self.image_size < 8:
            raise ValueError("need at least one tooth and an 8 px image")


@lru_cache(maxsize=16)
def _texture_waves(seed: int, n_waves: int = 14):
    rng = rng_stream(seed, 0xBEEF)
    wavelength = rng.uniform(1.2, 5.0, size=n_waves)
    angle = rng.uniform(0.0, 2 * np.pi, size=n_waves)
    k = (2 * np.pi / wavelength)[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    phase = rng.uniform(0.0, 2 * np.pi, size=n_waves)
    amp = rng.uniform(0.3, 1.0, size=(n_waves, 3))
    amp /= amp.sum(axis=0, keepdims=True)
    return k, phase, amp


def background_texture(X: np.ndarray, Y: np.ndarray, seed: int) -> np.ndarray:
    """Seeded multi-wave texture in platform coordinates, values in [-1, 1]."""
    k, phase, amp = _texture_waves(seed)
    arg = X[..., None] * k[:, 0] + Y[..., None] * k[:, 1] + phase
    return np.sin(arg) @ amp


def _coverage(signed_dist: np.ndarray, soft_mm: float) -> np.ndarray:
    # positive inside; linear ramp gives sub-pixel anti-aliasing
    return np.clip(signed_dist / soft_mm + 0.5, 0.0, 1.0)


@lru_cache(maxsize=16)
def _pixel_offsets(size: int, window: float):
    px = (np.arange(size) + 0.5) / size * window - window / 2.0
    ox = np.broadcast_to(px[None, :], (size, size))
    oy = np.broadcast_to(-px[:, None], (size, size))  # image row 0 is +y
    return ox, oy


def occluder_mask(scene: SceneParams) -> np.ndarray:
    ox, oy = _pixel_offsets(scene.image_size, scene.view_window_mm)
    return np.hypot(ox, oy) <= scene.occluder_radius_mm


def render_observation(gripper_pos, scene: SceneParams, peg_mm=(17.5, 15.0)) -> np.ndarray:
    """Render the RGB view (H, W, 3) in [0, 1] for the gripper at ``gripper_pos`` mm."""
    ox, oy = _pixel_offsets(scene.image_size, scene.view_window_mm)
    soft = scene.view_window_mm / scene.image_size
    X = ox + float(gripper_pos[0])
    Y = oy + float(gripper_pos[1])
    tex = background_texture(X, Y, scene.texture_seed)

    img = 0.45 + 0.12 * tex

    dx, dy = X - peg_mm[0], Y - peg_mm[1]
    r = np.hypot(dx, dy)
    inv_r = 1.0 / np.maximum(r, 1e-6)
    R = scene.platform_radius_mm
    rings = 1.0 - 0.35 * np.exp(-(((r % 4.0) - 2.0) / 0.35) ** 2)
    plat = np.stack([
        0.25 + 0.55 * np.minimum(r / R, 1.0),
        0.5 + 0.3 * dx * inv_r,
        0.5 + 0.3 * dy * inv_r,
    ], axis=-1)
    plat = plat * rings[..., None] + 0.05 * tex
    a = _coverage(R - r, soft)[..., None]
    img = img * (1 - a) + plat * a

    a = _coverage(scene.peg_radius_mm - r, soft)[..., None]
    img = img * (1 - a) + _PEG_RGB * a

    gx = dx - scene.mounted_gear_offset_mm[0]
    gy = dy - scene.mounted_gear_offset_mm[1]
    phi = np.arctan2(gy, gx)
    rg = scene.mounted_gear_radius_mm + 0.8 * np.tanh(3.0 * np.cos(scene.mounted_gear_teeth * phi))
    a = _coverage(rg - np.hypot(gx, gy), soft)[..., None]
    img = img * (1 - a) + _GEAR_RGB * a

    img = np.clip(img, 0.0, 1.0)
    img[occluder_mask(scene)] = _OCCLUDER_RGB
    return img.astype(np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    """8-bit camera quantisation, returned as float32 in [0, 1]."""
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class DatasetManifest:
    n_rows: int
    n_cols: int
    cell_mm: float
    image_width: int
    image_height: int
    texture_seed: int
    entries: list[dict] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        with open(path) as f:
            raw = json.load(f)
        if raw.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {raw.get('format_version')}")
        return cls(**raw)


def render_grid_dataset(gmap: GridMap, scene: SceneParams, out_dir) -> DatasetManifest:
    """Render one PNG per grid point plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset dir {out}: {e}") from e
    manifest = DatasetManifest(
        n_rows=gmap.n_rows, n_cols=gmap.n_cols, cell_mm=gmap.cell_mm,
        image_width=scene.image_size, image_height=scene.image_size,
        texture_seed=scene.texture_seed,
    )
    peg = tuple(gmap.target_mm)
    for idx in gmap.indices():
        pos = gmap.coords(idx)
        name = f"r{idx.row}_c{idx.col}.png"
        img = to_uint8(render_observation(pos, scene, peg))
        try:
            Image.fromarray(img, mode="RGB").save(out / name, format="PNG", optimize=False)
        except OSError as e:
            raise OSError(f"failed writing {out / name}: {e}") from e
        manifest.entries.append({"row": idx.row, "col": idx.col,
                                 "x_mm": float(pos[0]), "y_mm": float(pos[1]), "file": name})
    tmp = out / "manifest.json.tmp"
    tmp.write_text(manifest.to_json())
    os.replace(tmp, out / "manifest.json")
    return manifest


def load_grid_images(dataset_dir) -> tuple[DatasetManifest, np.ndarray]:
    """Load a rendered/sampled grid dataset as float32 array (rows, cols, H, W, 3)."""
    root = Path(dataset_dir)
    manifest = DatasetManifest.load(root)
    imgs = np.zeros((manifest.n_rows, manifest.n_cols, manifest.image_height,
                     manifest.image_width, 3), dtype=np.float32)
    for e in manifest.entries:
        with Image.open(root / e["file"]) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape != imgs.shape[2:]:
            raise ValueError(f"{e['file']}: shape {arr.shape} does not match manifest")
        imgs[e["row"], e["col"]] = arr
    return manifest, imgs
