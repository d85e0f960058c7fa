"""Per-mask semantic features and per-point geometric features.

Real encoders are not run in-process.  ``StubHashProvider`` is a deterministic
stand-in; ``SidecarProvider`` reads semantic vectors computed offline.  An
all-zeros vector is the "no feature" sentinel and contributes zero similarity.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .volume import points_to_keys

NORM_TOL = 1e-6


class SidecarError(ValueError):
    """Malformed semantic sidecar file."""


class FeatureProvider(Protocol):
    semantic_dim: int
    geometric_dim: int

    def semantic(self, frame_id: int, label: int) -> np.ndarray | None: ...

    def pointwise_geometric(self, points: np.ndarray) -> np.ndarray: ...


def normalize_or_zero(vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm < 1e-12:
        return np.zeros_like(vec)
    return vec / norm


def aggregate_geometric(mask_voxels, surface_points, point_features, voxel_size: float) -> np.ndarray:
    """Average-pool the features of surface points inside the mask's voxels, then renormalise."""
    surface_points = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    point_features = np.asarray(point_features, dtype=np.float64)
    if point_features.ndim != 2 or point_features.shape[0] != surface_points.shape[0]:
        raise ValueError("surface points and point features are not index-aligned")
    if surface_points.shape[0] == 0:
        return np.zeros(point_features.shape[1])
    inside = np.isin(points_to_keys(surface_points, voxel_size), np.asarray(mask_voxels, dtype=np.int64))
    if not inside.any():
        return np.zeros(point_features.shape[1])
    return normalize_or_zero(point_features[inside].mean(axis=0))


def _hash_vector(seed: int, key: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}|{key}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return normalize_or_zero(rng.standard_normal(dim))


class StubHashProvider:
    """Deterministic unit vectors derived from keyed hashes.

    ``semantic_tags`` maps ``(frame_id, label)`` to an object tag so that masks of
    one object share a semantic vector.  ``region_fn`` maps points to an object
    region ID (negative for unknown); points without a region hash their
    quantised position instead.
    """

    def __init__(
        self,
        seed: int = 0,
        semantic_dim: int = 64,
        geometric_dim: int = 64,
        semantic_tags: dict | None = None,
        region_fn: Callable[[np.ndarray], np.ndarray] | None = None,
        quantum: float = 0.05,
    ):
        self.seed = int(seed)
        self.semantic_dim = int(semantic_dim)
        self.geometric_dim = int(geometric_dim)
        self.semantic_tags = semantic_tags or {}
        self.region_fn = region_fn
        self.quantum = float(quantum)
        self._cache: dict[tuple, np.ndarray] = {}

    def _vector(self, kind: str, key, dim: int) -> np.ndarray:
        ck = (kind, key)
        vec = self._cache.get(ck)
        if vec is None:
            vec = _hash_vector(self.seed, f"{kind}:{key}", dim)
            self._cache[ck] = vec
        return vec

    def semantic(self, frame_id: int, label: int) -> np.ndarray:
        tag = self.semantic_tags.get((int(frame_id), int(label)))
        if tag is not None:
            return self._vector("object", tag, self.semantic_dim)
        return self._vector("mask", (int(frame_id), int(label)), self.semantic_dim)

    def pointwise_geometric(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.zeros((points.shape[0], self.geometric_dim))
        if points.shape[0] == 0:
            return out
        regions = (
            np.asarray(self.region_fn(points), dtype=np.int64)
            if self.region_fn is not None
            else np.full(points.shape[0], -1, dtype=np.int64)
        )
        known = regions >= 0
        if known.any():
            uniq, inv = np.unique(regions[known], return_inverse=True)
            table = np.stack([self._vector("region", int(r), self.geometric_dim) for r in uniq])
            out[known] = table[inv]
        if (~known).any():
            cells = points_to_keys(points[~known], self.quantum)
            uniq, inv = np.unique(cells, return_inverse=True)
            table = np.stack([self._vector("cell", int(c), self.geometric_dim) for c in uniq])
            out[~known] = table[inv]
        return out


def write_sidecar(path, vectors) -> None:
    """Little-endian: uint32 mask_count, uint32 dim, then mask_count*dim float32 rows."""
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise ValueError("sidecar vectors must be a 2-D array")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", vectors.shape[0], vectors.shape[1]))
        fh.write(vectors.tobytes())


def read_sidecar(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8:
        raise SidecarError(f"{path}: truncated header at offset {len(data)} (need 8 bytes)")
    count, dim = struct.unpack_from("<II", data, 0)
    need = 8 + 4 * count * dim
    if len(data) != need:
        raise SidecarError(
            f"{path}: expected {need} bytes for {count} masks x {dim} floats, "
            f"found {len(data)} (payload breaks at offset {min(len(data), need)})"
        )
    vectors = np.frombuffer(data, dtype="<f4", offset=8).reshape(count, dim).astype(np.float64)
    if not np.all(np.isfinite(vectors)):
        bad = int(np.argmax(~np.isfinite(vectors).ravel()))
        raise SidecarError(f"{path}: non-finite value at offset {8 + 4 * bad}")
    return vectors


class SidecarProvider:
    """Semantic vectors from per-frame sidecar files; geometry from a delegate provider."""

    def __init__(self, directory, geometric: FeatureProvider | None = None, pattern: str = "{:06d}.f32"):
        self.directory = Path(directory)
        self.pattern = pattern
        self.geometric = geometric if geometric is not None else StubHashProvider()
        self.geometric_dim = self.geometric.geometric_dim
        self._frames: dict[int, np.ndarray | None] = {}
        self.semantic_dim = self._probe_dim()

    def _probe_dim(self) -> int:
        for path in sorted(self.directory.glob("*.f32")):
            with open(path, "rb") as fh:
                head = fh.read(8)
            if len(head) == 8:
                return struct.unpack("<II", head)[1]
        return 0

    def _load(self, frame_id: int):
        if frame_id not in self._frames:
            path = self.directory / self.pattern.format(frame_id)
            vectors = read_sidecar(path) if path.exists() else None
            if vectors is not None and self.semantic_dim and vectors.shape[1] != self.semantic_dim:
                raise SidecarError(f"{path}: dimension {vectors.shape[1]} != {self.semantic_dim}")
            self._frames[frame_id] = vectors
        return self._frames[frame_id]

    def semantic(self, frame_id: int, label: int) -> np.ndarray | None:
        vectors = self._load(int(frame_id))
        if vectors is None or not (1 <= label <= vectors.shape[0]):
            return None
        vec = normalize_or_zero(vectors[label - 1])
        return vec if vec.any() else None

    def pointwise_geometric(self, points) -> np.ndarray:
        return self.geometric.pointwise_geometric(points)
