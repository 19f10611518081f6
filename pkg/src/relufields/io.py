"""File formats: grid checkpoints, PNG images, depth PNGs, OBJ meshes,
NeRF-style datasets, run configs and metrics CSV."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, FormatError, InvalidArgumentError
from .field import FieldGrid
from .mesh import TriangleMesh
from .optim import TrainConfig
from .render import CameraPose

MAGIC = b"RLUF"
VERSION = 1
DEFAULT_SCENE_AABB = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
METRICS_COLUMNS = ("run_id", "scene", "mode", "grid_dims", "stage", "iteration", "loss", "psnr_db", "wall_seconds")
_CHUNK_BYTES = 1 << 24


# ---------------------------------------------------------------- grid files

def grid_header(dims, channels: int, aabb) -> bytes:
    m = len(dims)
    aabb = np.asarray(aabb, dtype="<f8").reshape(2, m)
    return (MAGIC + struct.pack("<HH", VERSION, m) + struct.pack(f"<{m}I", *dims)
            + struct.pack("<I", channels) + aabb.tobytes())


def grid_file_size(dims, channels: int) -> int:
    m = len(dims)
    return 4 + 4 + 4 * m + 4 + 16 * m + 4 * channels * int(np.prod(dims))


def save_grid(path, grid: FieldGrid) -> None:
    """Write a grid checkpoint; values are stored as little-endian float32.

    The values are streamed in chunks, so read-only or broadcast arrays of
    any size can be written without a full float32 copy in memory.
    """
    path = Path(path)
    flat = grid.values.reshape(-1)
    step = max(1, _CHUNK_BYTES // 4)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(grid_header(grid.dims, grid.channels, grid.aabb))
        for start in range(0, flat.size, step):
            fh.write(np.ascontiguousarray(flat[start:start + step], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_grid(path) -> FieldGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a grid file (bad magic)")
    version, m = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if m not in (2, 3):
        raise FormatError(f"{path}: unsupported dimensionality {m}")
    head = 8 + 4 * m + 4 + 16 * m
    if len(data) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{m}I", data, 8)
    (channels,) = struct.unpack_from("<I", data, 8 + 4 * m)
    aabb = np.frombuffer(data, dtype="<f8", count=2 * m, offset=8 + 4 * m + 4).reshape(2, m)
    count = int(np.prod(dims)) * channels
    if len(data) != head + 4 * count:
        raise FormatError(f"{path}: expected {head + 4 * count} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", count=count, offset=head).astype(np.float64)
    try:
        return FieldGrid(values.reshape(tuple(dims) + (channels,)), aabb.astype(np.float64))
    except InvalidArgumentError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -------------------------------------------------------------------- images

def load_png(path, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """8-bit PNG as float RGB in [0, 1]; alpha is composited over ``background``."""
    with Image.open(path) as im:
        if im.mode in ("RGBA", "LA", "P") or "transparency" in im.info:
            arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
            alpha = arr[..., 3:]
            return arr[..., :3] * alpha + np.asarray(background, dtype=np.float64) * (1.0 - alpha)
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64)[..., None].repeat(3, axis=-1) / 255.0
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def encode_depth(depth, t_near, t_far) -> np.ndarray:
    """Map depths linearly from ``[t_near, t_far]`` to 1..65535; misses become 0."""
    depth = np.asarray(depth, dtype=np.float64)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), depth.shape)
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), depth.shape)
    out = np.zeros(depth.shape, dtype=np.uint16)
    ok = np.isfinite(depth) & np.isfinite(t_near) & np.isfinite(t_far)
    span = np.where(ok, t_far - t_near, 1.0)
    span = np.where(span > 0, span, 1.0)
    frac = np.clip((np.where(ok, depth, 0.0) - np.where(ok, t_near, 0.0)) / span, 0.0, 1.0)
    out[ok] = np.round(1.0 + frac[ok] * 65534.0).astype(np.uint16)
    return out


def decode_depth(codes, t_near, t_far) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    depth = np.asarray(t_near) + (codes - 1.0) / 65534.0 * (np.asarray(t_far) - np.asarray(t_near))
    return np.where(codes == 0, np.inf, depth)


def save_depth_png(path, depth, t_near, t_far) -> None:
    Image.fromarray(encode_depth(depth, t_near, t_far)).save(path)


def load_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint16)


# -------------------------------------------------------------------- meshes

def load_obj(path) -> TriangleMesh:
    """ASCII OBJ: ``v`` and ``f`` records; polygons are fan-triangulated.

    Face tokens may carry texture/normal indices (``7/1/3``); only the
    vertex index is used. Negative (relative) indices are accepted.
    """
    verts, tris = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs three coordinates")
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    if len(idx) < 3:
                        raise ValueError("face needs at least three vertices")
                    tris += [(idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1)]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not tris:
        raise FormatError(f"{path}: no faces")
    mesh = TriangleMesh(np.array(verts), np.array(tris))
    if mesh.triangles.min() < 0 or mesh.triangles.max() >= len(mesh.vertices):
        raise FormatError(f"{path}: face index out of range")
    return mesh


def save_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for t in mesh.triangles:
            fh.write("f {} {} {}\n".format(*(int(i) + 1 for i in t)))


# ------------------------------------------------------------------ datasets

@dataclass
class DatasetManifest:
    root: Path
    split: str
    image_paths: list
    poses: list
    aabb: np.ndarray

    def __len__(self):
        return len(self.poses)

    def load_images(self, background=(1.0, 1.0, 1.0)) -> list:
        images = []
        for path, pose in zip(self.image_paths, self.poses):
            img = load_png(path, background)
            if img.shape[:2] != (pose.H, pose.W):
                raise DatasetError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, pose expects {pose.W}x{pose.H}")
            images.append(img)
        return images


def _field(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetError(f"{where}: missing field '{key}'")
    return obj[key]


def load_nerf_dataset(root, split: str, aabb=None) -> DatasetManifest:
    """Read ``transforms_<split>.json`` (Blender synthetic layout)."""
    root = Path(root)
    path = root / f"transforms_{split}.json"
    if not path.exists():
        raise DatasetError(f"{path} does not exist")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    try:
        angle = float(_field(meta, "camera_angle_x", path))
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: field 'camera_angle_x' is not a number") from exc
    frames = _field(meta, "frames", path)
    if not isinstance(frames, list) or not frames:
        raise DatasetError(f"{path}: field 'frames' is empty")
    image_paths, poses = [], []
    size = None
    for i, frame in enumerate(frames):
        where = f"{path} frame {i}"
        rel = _field(frame, "file_path", where)
        if not isinstance(rel, str):
            raise DatasetError(f"{where}: field 'file_path' is not a string")
        img_path = root / rel
        if not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise DatasetError(f"{where}: image {img_path} not found")
        if size is None:
            with Image.open(img_path) as im:
                size = im.size  # (W, H)
        try:
            m = np.asarray(_field(frame, "transform_matrix", where), dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: field 'transform_matrix' is not numeric") from exc
        if m.shape != (4, 4):
            raise DatasetError(f"{where}: field 'transform_matrix' must be 4x4, got {m.shape}")
        rot = m[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-4 or np.linalg.det(rot) <= 0:
            raise InvalidArgumentError(f"{where}: transform_matrix rotation block is not a rotation")
        u, _, vt = np.linalg.svd(rot)
        W, H = size
        F = 0.5 * W / np.tan(0.5 * angle)
        image_paths.append(img_path)
        poses.append(CameraPose(u @ vt, m[:3, 3].copy(), H, W, F))
    box = np.asarray(DEFAULT_SCENE_AABB if aabb is None else aabb, dtype=np.float64).reshape(2, 3)
    return DatasetManifest(root, split, image_paths, poses, box)


def save_nerf_dataset(root, split: str, images, poses) -> None:
    """Write images and a ``transforms_<split>.json`` readable by ``load_nerf_dataset``."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    if not poses:
        raise InvalidArgumentError("no views to write")
    W, F = poses[0].W, poses[0].F
    frames = []
    for i, (img, pose) in enumerate(zip(images, poses)):
        if (pose.W, pose.F) != (W, F):
            raise InvalidArgumentError("all views in a split must share W and F")
        rel = f"./{split}/r_{i}"
        save_png(root / f"{rel}.png", img)
        frames.append({"file_path": rel, "transform_matrix": pose.camera_to_world().tolist()})
    meta = {"camera_angle_x": float(2.0 * np.arctan(0.5 * W / F)), "frames": frames}
    (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# ------------------------------------------------------------------- configs

def _tupled(v):
    return tuple(_tupled(x) for x in v) if isinstance(v, list) else v


def write_config(path, cfg: TrainConfig, extra: dict | None = None) -> None:
    """Flat ``key = value`` file; values are JSON literals."""
    items = dict(dataclasses.asdict(cfg))
    items.update(extra or {})
    with open(path, "w") as fh:
        for key, value in items.items():
            fh.write(f"{key} = {json.dumps(value)}\n")


def read_config(path) -> tuple[TrainConfig, dict]:
    """Parse a config file into a TrainConfig plus any non-config keys."""
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    cfg_items, extra = {}, {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key = key.strip()
            try:
                value = _tupled(json.loads(raw.strip()))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: bad value for {key}") from exc
            (cfg_items if key in known else extra)[key] = value
    return TrainConfig(**cfg_items), extra


# ------------------------------------------------------------------- metrics

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class MetricsWriter:
    """Appends metric rows to a CSV with the fixed column set."""

    def __init__(self, path, run_id: str, scene: str, mode: str):
        self.path = Path(path)
        self.fixed = {"run_id": run_id, "scene": scene, "mode": mode}
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRICS_COLUMNS)
        self.rows = []

    def __call__(self, row: dict) -> None:
        full = {**self.fixed, **row}
        self.rows.append(full)
        self._writer.writerow([_cell(full.get(c)) for c in METRICS_COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
