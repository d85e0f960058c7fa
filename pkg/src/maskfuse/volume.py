"""Hashed voxel volume: TSDF fusion, mask lifting, per-voxel mask IDs and overlap queries.

Voxel keys are integer grid coordinates packed into one int64; the key
``(i, j, k)`` names the cell centred at ``(i, j, k) * voxel_size``.  A voxel set
is a sorted, duplicate-free ``int64`` array of packed keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1


class FrameError(ValueError):
    """A frame violates its geometric contract (pose, depth, intrinsics)."""


class MappingIntegrityError(LookupError):
    """A voxel entry holds an original mask ID the mapping table does not know."""


def pack_keys(ijk) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    if ijk.size and (ijk.min() < -_OFFSET or ijk.max() >= _OFFSET):
        raise ValueError("voxel coordinate outside the packable range")
    shifted = ijk + _OFFSET
    return (shifted[:, 0] << (2 * _BITS)) | (shifted[:, 1] << _BITS) | shifted[:, 2]


def unpack_keys(keys) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.shape[0], 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * _BITS)) & _MASK
    out[:, 1] = (keys >> _BITS) & _MASK
    out[:, 2] = keys & _MASK
    return out - _OFFSET


def points_to_keys(points, voxel_size: float) -> np.ndarray:
    """Packed key of the cell containing each point (cells are centred on grid nodes)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pack_keys(np.floor(points / voxel_size + 0.5).astype(np.int64))


def key_centers(keys, voxel_size: float) -> np.ndarray:
    return unpack_keys(keys).astype(np.float64) * voxel_size


def as_voxel_set(keys) -> np.ndarray:
    return np.unique(np.asarray(keys, dtype=np.int64))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")


@dataclass
class Frame:
    frame_id: int
    depth: np.ndarray
    pose: np.ndarray
    intrinsics: CameraIntrinsics
    mask_labels: np.ndarray | None = None

    def validate(self) -> None:
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise FrameError(f"frame {self.frame_id}: pose must be 4x4")
        rot = pose[:3, :3]
        if (
            not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6)
            or abs(np.linalg.det(rot) - 1.0) > 1e-6
            or not np.allclose(pose[3], [0, 0, 0, 1], atol=1e-6)
        ):
            raise FrameError(f"frame {self.frame_id}: pose is not a rigid transform")
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != shape:
            raise FrameError(
                f"frame {self.frame_id}: depth shape {self.depth.shape} does not match intrinsics {shape}"
            )
        if not np.all(np.isfinite(self.depth)) or (self.depth < 0).any():
            raise FrameError(f"frame {self.frame_id}: depth must be finite and non-negative")
        if self.mask_labels is not None and self.mask_labels.shape != shape:
            raise FrameError(f"frame {self.frame_id}: mask label image shape mismatch")


@dataclass
class VoxelEntry:
    tsdf: float
    fusion_weight: float
    mask_ids: tuple = field(default_factory=tuple)


def unproject(frame: Frame, rows, cols, depth) -> np.ndarray:
    """World-space points for pixels (rows, cols) at optical-axis depth ``depth``."""
    K = frame.intrinsics
    z = np.asarray(depth, dtype=np.float64)
    x = (np.asarray(cols, dtype=np.float64) - K.cx) / K.fx * z
    y = (np.asarray(rows, dtype=np.float64) - K.cy) / K.fy * z
    cam = np.stack([x, y, z], axis=-1)
    pose = np.asarray(frame.pose, dtype=np.float64)
    return cam @ pose[:3, :3].T + pose[:3, 3]


def world_to_camera(frame: Frame, points: np.ndarray):
    """Camera coordinates of world points, evaluated component-wise."""
    pose = np.asarray(frame.pose, dtype=np.float64)
    dx = points[:, 0] - pose[0, 3]
    dy = points[:, 1] - pose[1, 3]
    dz = points[:, 2] - pose[2, 3]
    xc = pose[0, 0] * dx + pose[1, 0] * dy + pose[2, 0] * dz
    yc = pose[0, 1] * dx + pose[1, 1] * dy + pose[2, 1] * dz
    zc = pose[0, 2] * dx + pose[1, 2] * dy + pose[2, 2] * dz
    return xc, yc, zc


def project_to_pixels(frame: Frame, points: np.ndarray):
    """Returns (zc, row, col, inside); pixel indices are only meaningful where ``inside``."""
    K = frame.intrinsics
    xc, yc, zc = world_to_camera(frame, points)
    front = zc > 0
    safe_z = np.where(front, zc, 1.0)
    col = np.floor(K.fx * xc / safe_z + K.cx + 0.5)
    row = np.floor(K.fy * yc / safe_z + K.cy + 0.5)
    inside = front & (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    col = np.where(inside, col, 0).astype(np.int64)
    row = np.where(inside, row, 0).astype(np.int64)
    return zc, row, col, inside


class VoxelVolume:
    """Sparse TSDF volume whose entries also carry append-only lists of original mask IDs."""

    def __init__(
        self,
        voxel_size: float = 0.05,
        truncation: float | None = None,
        max_depth: float = 8.0,
        occlusion_tolerance: float | None = None,
        surface_band: float = 0.5,
        capacity: int = 1024,
        kernels=None,
    ):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation) if truncation is not None else 2.0 * voxel_size
        self.max_depth = float(max_depth)
        self.occlusion_tolerance = (
            float(occlusion_tolerance) if occlusion_tolerance is not None else 2.0 * voxel_size
        )
        self.surface_band = float(surface_band)
        self.kernels = kernels if kernels is not None else _kernels
        self._index = self.kernels.KeyIndex(capacity)
        self._chains = self.kernels.IdChains()
        self._tsdf = np.ones(0, dtype=np.float64)
        self._weight = np.zeros(0, dtype=np.float64)
        self._registered: set[int] = set()

    def __len__(self) -> int:
        return len(self._index)

    # -- storage -----------------------------------------------------------

    def _allocate(self, keys: np.ndarray) -> np.ndarray:
        slots = self._index.get_or_insert(keys)
        n = len(self._index)
        if n > self._tsdf.shape[0]:
            grow = max(n, 2 * self._tsdf.shape[0], 1024) - self._tsdf.shape[0]
            self._tsdf = np.concatenate([self._tsdf, np.ones(grow)])
            self._weight = np.concatenate([self._weight, np.zeros(grow)])
        return slots

    def keys(self) -> np.ndarray:
        return self._index.keys()

    def entry(self, key: int) -> VoxelEntry | None:
        slot = int(self._index.lookup(np.array([key], dtype=np.int64))[0])
        if slot < 0:
            return None
        return VoxelEntry(
            float(self._tsdf[slot]), float(self._weight[slot]), tuple(self._chains.ids(slot))
        )

    def tsdf_of(self, keys) -> tuple[np.ndarray, np.ndarray]:
        """(tsdf, fusion_weight) per key; unallocated keys read as (1, 0)."""
        slots = self._index.lookup(np.asarray(keys, dtype=np.int64))
        ok = slots >= 0
        tsdf = np.ones(slots.shape[0])
        weight = np.zeros(slots.shape[0])
        tsdf[ok] = self._tsdf[slots[ok]]
        weight[ok] = self._weight[slots[ok]]
        return tsdf, weight

    def mask_ids_of(self, key: int) -> list[int]:
        slot = int(self._index.lookup(np.array([key], dtype=np.int64))[0])
        return self._chains.ids(slot) if slot >= 0 else []

    # -- fusion ------------------------------------------------------------

    def integrate_frame(self, frame: Frame, truncation: float | None = None) -> int:
        """Fuse one depth image; returns the number of voxels updated."""
        trunc = self.truncation if truncation is None else float(truncation)
        if trunc < 2.0 * self.voxel_size - 1e-12:
            raise ValueError("truncation must be at least two voxels")
        frame.validate()
        depth = np.asarray(frame.depth, dtype=np.float64)
        rows, cols = np.nonzero((depth > 0) & (depth <= self.max_depth))
        if rows.size == 0:
            return 0
        d = depth[rows, cols]

        # candidate voxels: samples along each pixel ray inside the truncation band
        step = 0.5 * self.voxel_size
        offsets = np.arange(-trunc, trunc + 0.5 * step, step)
        z = (d[:, None] + offsets[None, :]).ravel()
        r = np.repeat(rows, offsets.size)
        c = np.repeat(cols, offsets.size)
        keep = z > 0
        candidates = np.unique(points_to_keys(unproject(frame, r[keep], c[keep], z[keep]), self.voxel_size))

        # projective signed distance along the optical axis
        centers = key_centers(candidates, self.voxel_size)
        zc, prow, pcol, inside = project_to_pixels(frame, centers)
        dpix = np.where(inside, depth[prow, pcol], 0.0)
        valid = inside & (dpix > 0) & (dpix <= self.max_depth)
        sdf = dpix - zc
        valid &= sdf >= -trunc
        if not valid.any():
            return 0
        obs = np.clip(sdf[valid] / trunc, -1.0, 1.0)
        slots = self._allocate(candidates[valid])
        w = self._weight[slots]
        self._tsdf[slots] = (self._tsdf[slots] * w + obs) / (w + 1.0)
        self._weight[slots] = w + 1.0
        return int(slots.size)

    def extract_surface_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Centres of observed voxels near the zero crossing, sorted by key: (points, keys)."""
        n = len(self._index)
        if n == 0:
            return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
        sel = (self._weight[:n] > 0) & (np.abs(self._tsdf[:n]) < self.surface_band)
        keys = np.sort(self._index.keys()[sel])
        return key_centers(keys, self.voxel_size), keys

    # -- masks -------------------------------------------------------------

    def back_project_mask(self, frame: Frame, label: int) -> np.ndarray:
        """Voxel set hit by the pixels carrying ``label`` that have valid depth."""
        if frame.mask_labels is None:
            raise ValueError(f"frame {frame.frame_id} has no mask labels")
        if label <= 0:
            raise ValueError("mask label must be positive")
        hit = frame.mask_labels == label
        if not hit.any():
            raise KeyError(f"label {label} absent from frame {frame.frame_id}")
        depth = np.asarray(frame.depth, dtype=np.float64)
        hit &= (depth > 0) & (depth <= self.max_depth)
        rows, cols = np.nonzero(hit)
        if rows.size == 0:
            return np.zeros(0, dtype=np.int64)
        points = unproject(frame, rows, cols, depth[rows, cols])
        return np.unique(points_to_keys(points, self.voxel_size))

    def register_mask(self, voxels, original_id: int) -> None:
        """Append ``original_id`` to every voxel of the set, allocating entries on demand."""
        original_id = int(original_id)
        if original_id in self._registered:
            raise ValueError(f"original mask ID {original_id} already registered")
        voxels = np.asarray(voxels, dtype=np.int64)
        slots = self._allocate(voxels)
        self._chains.append(slots, original_id)
        self._registered.add(original_id)

    def query_overlaps(self, voxels, mapping) -> dict[int, int]:
        """Intersection size with every current mask touching ``voxels``."""
        idmap = getattr(mapping, "idmap", mapping)
        slots = self._index.lookup(np.asarray(voxels, dtype=np.int64))
        try:
            return self._chains.count_resolved(slots, idmap)
        except KeyError as exc:
            raise MappingIntegrityError(f"original mask ID {exc.args[0]} missing from mapping table") from None

    def visibility_mask(self, voxels, frame: Frame) -> np.ndarray:
        """Per voxel: projects inside the image, in front, and not occluded beyond tolerance."""
        voxels = np.asarray(voxels, dtype=np.int64)
        centers = key_centers(voxels, self.voxel_size)
        zc, row, col, inside = project_to_pixels(frame, centers)
        d = np.where(inside, np.asarray(frame.depth, dtype=np.float64)[row, col], 0.0)
        return inside & (d > 0) & (zc <= d + self.occlusion_tolerance)

    def project_visible(self, voxels, frames) -> np.ndarray:
        """Subset of ``voxels`` visible in at least one of ``frames``."""
        frames = list(frames)
        if not frames:
            raise ValueError("project_visible needs at least one frame")
        voxels = np.asarray(voxels, dtype=np.int64)
        seen = np.zeros(voxels.shape[0], dtype=bool)
        for frame in frames:
            seen |= self.visibility_mask(voxels, frame)
        return voxels[seen]
