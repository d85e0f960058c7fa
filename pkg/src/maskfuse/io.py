"""On-disk formats: dataset directories, 16-bit PNGs, binary PLY point clouds."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .features import write_sidecar
from .volume import CameraIntrinsics, Frame


class DatasetError(ValueError):
    """A dataset file is missing or malformed; the message names the file."""


def read_png16(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    try:
        with Image.open(path) as img:
            arr = np.array(img)
    except OSError as exc:
        raise DatasetError(f"{path}: cannot decode image ({exc})") from None
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr.astype(np.int64)


def write_png16(path, values) -> None:
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() > 65535):
        raise ValueError(f"{path}: values do not fit in 16 bits")
    Image.fromarray(values.astype(np.uint16)).save(path, format="PNG")


def read_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    parts = path.read_text().split()
    if len(parts) != 6:
        raise DatasetError(f"{path}: expected 6 numbers (fx fy cx cy width height), found {len(parts)}")
    try:
        fx, fy, cx, cy = (float(v) for v in parts[:4])
        width, height = (int(float(v)) for v in parts[4:])
        return CameraIntrinsics(fx, fy, cx, cy, width, height)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    Path(path).write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n")


def read_pose(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    try:
        vals = [float(v) for v in path.read_text().split()]
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    if len(vals) != 16:
        raise DatasetError(f"{path}: expected 16 numbers, found {len(vals)}")
    return np.array(vals).reshape(4, 4)


def write_pose(path, pose) -> None:
    rows = np.asarray(pose, dtype=np.float64).reshape(4, 4)
    Path(path).write_text("\n".join(" ".join(repr(float(v)) for v in r) for r in rows) + "\n")


def read_gt_points(path) -> tuple[np.ndarray, np.ndarray]:
    """``x y z label`` per line -> (points, labels)."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    text = path.read_text()
    if not text.strip():
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    try:
        data = np.loadtxt(text.splitlines(), ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    if data.shape[1] != 4:
        raise DatasetError(f"{path}: expected 4 columns (x y z label), found {data.shape[1]}")
    return data[:, :3].copy(), data[:, 3].astype(np.int64)


def write_gt_points(path, points, labels) -> None:
    with open(path, "w") as fh:
        for (x, y, z), lab in zip(np.asarray(points, dtype=np.float64), np.asarray(labels)):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {int(lab)}\n")


# -- PLY -----------------------------------------------------------------------

_PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("instance", "<i4")])


def write_ply(path, points, labels) -> None:
    """Binary little-endian PLY with float x, y, z and an int ``instance`` property."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (points.shape[0],):
        raise ValueError("one label per point required")
    rec = np.empty(points.shape[0], dtype=_PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    rec["instance"] = labels
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {points.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property int instance\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Reads files produced by :func:`write_ply` -> (points, labels)."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise DatasetError(f"{path}: only binary little-endian PLY is supported")
    props = [ln.split()[-1] for ln in header if ln.startswith("property")]
    if props != ["x", "y", "z", "instance"]:
        raise DatasetError(f"{path}: unexpected vertex properties {props}")
    count = next(int(ln.split()[2]) for ln in header if ln.startswith("element vertex"))
    body = data[end + len(b"end_header\n"):]
    if len(body) != count * _PLY_DTYPE.itemsize:
        raise DatasetError(f"{path}: body holds {len(body)} bytes, expected {count * _PLY_DTYPE.itemsize}")
    rec = np.frombuffer(body, dtype=_PLY_DTYPE)
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return points, rec["instance"].astype(np.int64)


# -- dataset directories -------------------------------------------------------

class DirectoryDataset:
    """Frames streamed lazily from a dataset directory, in frame-index order."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"{self.root}: dataset directory not found")
        self.intrinsics = read_intrinsics(self.root / "intrinsics.txt")
        depth_dir = self.root / "depth"
        if not depth_dir.is_dir():
            raise DatasetError(f"{depth_dir}: directory not found")
        ids = []
        for p in sorted(depth_dir.glob("*.png")):
            try:
                ids.append(int(p.stem))
            except ValueError:
                raise DatasetError(f"{p}: file name is not a frame index") from None
        self.frame_ids = sorted(ids)

    def __len__(self):
        return len(self.frame_ids)

    @property
    def features_dir(self) -> Path | None:
        d = self.root / "features"
        return d if d.is_dir() else None

    @property
    def gt_path(self) -> Path | None:
        p = self.root / "gt_points.txt"
        return p if p.exists() else None

    def load(self, frame_id: int) -> Frame:
        name = f"{frame_id:06d}"
        depth = read_png16(self.root / "depth" / f"{name}.png").astype(np.float64) / 1000.0
        pose = read_pose(self.root / "pose" / f"{name}.txt")
        mask_path = self.root / "masks" / f"{name}.png"
        labels = read_png16(mask_path) if mask_path.exists() else None
        K = self.intrinsics
        for what, arr in (("depth", depth), ("mask", labels)):
            if arr is not None and arr.shape != (K.height, K.width):
                raise DatasetError(
                    f"frame {frame_id}: {what} image is {arr.shape[1]}x{arr.shape[0]}, "
                    f"intrinsics say {K.width}x{K.height}"
                )
        return Frame(frame_id, depth, pose, K, labels)

    def __iter__(self):
        for fid in self.frame_ids:
            yield self.load(fid)


def write_dataset(root, frames, gt_points=None, gt_labels=None, semantic=None) -> None:
    """Write frames in the directory layout.

    ``semantic`` optionally maps ``frame_id`` to a ``(mask_count, dim)`` array
    written as that frame's feature sidecar.
    """
    root = Path(root)
    for sub in ("depth", "pose", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    frames = list(frames)
    if frames:
        write_intrinsics(root / "intrinsics.txt", frames[0].intrinsics)
    for fr in frames:
        name = f"{fr.frame_id:06d}"
        write_png16(root / "depth" / f"{name}.png", np.round(np.asarray(fr.depth) * 1000.0))
        write_pose(root / "pose" / f"{name}.txt", fr.pose)
        if fr.mask_labels is not None:
            write_png16(root / "masks" / f"{name}.png", fr.mask_labels)
    if semantic:
        (root / "features").mkdir(exist_ok=True)
        for fid, vectors in sorted(semantic.items()):
            write_sidecar(root / "features" / f"{fid:06d}.f32", vectors)
    if gt_points is not None:
        write_gt_points(root / "gt_points.txt", gt_points, gt_labels)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
