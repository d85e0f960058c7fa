"""Mask bank: per-mask records, the original->current ID mapping table and the overlap matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import aggregate_geometric, normalize_or_zero
from .volume import Frame, VoxelVolume


class DeadMaskError(KeyError):
    """The ID is not a live current mask (never issued, or merged away)."""


@dataclass
class MaskRecord:
    current_id: int
    voxels: np.ndarray
    weight: int
    semantic_feature: np.ndarray
    geometric_feature: np.ndarray
    source_frames: frozenset
    constituent_original_ids: frozenset


class MappingTable:
    """Original mask ID -> current mask ID, backed by the kernel ``IdMap``."""

    def __init__(self, kernels):
        self.idmap = kernels.IdMap()
        self._issued: list[int] = []

    def __len__(self):
        return len(self._issued)

    def issue(self, original_id: int) -> None:
        self.idmap.set(original_id, original_id)
        self._issued.append(original_id)

    def resolve(self, original_id: int) -> int:
        try:
            return int(self.idmap.resolve(int(original_id)))
        except KeyError:
            raise KeyError(f"unknown original mask ID {original_id}") from None

    def remap(self, original_ids, current_id: int) -> None:
        self.idmap.remap(np.asarray(sorted(original_ids), dtype=np.int64), int(current_id))

    def entries(self) -> dict[int, int]:
        return {o: self.resolve(o) for o in self._issued}


class MaskBank:
    """All online mask state.  Not thread-safe: one writer, phase-separated readers."""

    def __init__(
        self,
        volume: VoxelVolume,
        semantic_dim: int = 64,
        geometric_dim: int = 64,
        record_events: bool = False,
    ):
        self.volume = volume
        self.semantic_dim = int(semantic_dim)
        self.geometric_dim = int(geometric_dim)
        self.mapping = MappingTable(volume.kernels)
        self.records: dict[int, MaskRecord] = {}
        self.frames: dict[int, Frame] = {}
        self.events: list | None = [] if record_events else None
        self.recomputed_entries = 0
        self._next_id = 1
        self._order: list[int] = []
        self._row: dict[int, int] = {}
        self._overlap = np.zeros((0, 0))
        self._pending: list[int] = []
        self._vis: dict[tuple[int, int], np.ndarray] = {}
        self._surface_points = np.zeros((0, 3))
        self._surface_features = np.zeros((0, self.geometric_dim))

    def __len__(self):
        return len(self.records)

    # -- inputs ------------------------------------------------------------

    def add_frame(self, frame: Frame) -> None:
        self.frames[int(frame.frame_id)] = frame

    def set_surface(self, points, point_features) -> None:
        """Latest reconstructed surface and its per-point geometric features."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        point_features = np.asarray(point_features, dtype=np.float64)
        if point_features.shape[0] != points.shape[0]:
            raise ValueError("surface points and features are not index-aligned")
        self._surface_points = points
        self._surface_features = point_features

    def _geometric(self, voxels) -> np.ndarray:
        if self._surface_points.shape[0] == 0:
            return np.zeros(self.geometric_dim)
        return aggregate_geometric(voxels, self._surface_points, self._surface_features, self.volume.voxel_size)

    def _issue_id(self) -> int:
        ident = self._next_id
        self._next_id += 1
        return ident

    # -- queries -----------------------------------------------------------

    def live_ids(self) -> list[int]:
        return list(self._order)

    def record(self, mask_id: int) -> MaskRecord:
        try:
            return self.records[int(mask_id)]
        except KeyError:
            raise DeadMaskError(f"mask {mask_id} is not live") from None

    def resolve(self, original_id: int) -> int:
        return self.mapping.resolve(original_id)

    def weights(self) -> np.ndarray:
        return np.array([self.records[i].weight for i in self._order], dtype=np.int64)

    def semantic_matrix(self) -> np.ndarray:
        if not self._order:
            return np.zeros((0, self.semantic_dim))
        return np.stack([self.records[i].semantic_feature for i in self._order])

    def geometric_matrix(self) -> np.ndarray:
        if not self._order:
            return np.zeros((0, self.geometric_dim))
        return np.stack([self.records[i].geometric_feature for i in self._order])

    def _visible(self, mask_id: int, frame_id: int) -> np.ndarray:
        key = (mask_id, frame_id)
        vis = self._vis.get(key)
        if vis is None:
            vis = self.volume.visibility_mask(self.records[mask_id].voxels, self.frames[frame_id])
            self._vis[key] = vis
        return vis

    def visible_count(self, mask_id: int, frame_ids) -> int:
        """|Vis(V_mask, frames)|: voxels of the mask visible in any of the frames."""
        seen = None
        for f in sorted(frame_ids):
            vis = self._visible(mask_id, f)
            seen = vis.copy() if seen is None else seen | vis
        return 0 if seen is None else int(seen.sum())

    @staticmethod
    def _ratio(intersection: int, visible: int) -> float:
        if intersection == 0 or visible == 0:
            return 0.0
        return min(1.0, intersection / visible)

    def overlap_ratio(self, a: int, b: int) -> float:
        """Fraction of b's voxels visible from a's frames that a also covers, clamped to [0, 1]."""
        ra, rb = self.record(a), self.record(b)
        if a == b:
            raise ValueError("overlap ratio needs two distinct masks")
        inter = self.volume.query_overlaps(ra.voxels, self.mapping).get(b, 0)
        if inter == 0:
            return 0.0
        return self._ratio(inter, self.visible_count(b, ra.source_frames))

    def naive_overlap_ratio(self, a: int, b: int) -> float:
        """|V_a & V_b| / |V_b|, ignoring visibility (ablation only)."""
        ra, rb = self.record(a), self.record(b)
        inter = self.volume.query_overlaps(ra.voxels, self.mapping).get(b, 0)
        return inter / rb.voxels.shape[0]

    # -- overlap matrix ----------------------------------------------------

    def _append_row(self, mask_id: int) -> None:
        n = len(self._order)
        grown = np.full((n + 1, n + 1), np.nan)
        grown[:n, :n] = self._overlap
        self._overlap = grown
        self._row[mask_id] = n
        self._order.append(mask_id)
        self._pending.append(mask_id)

    def _drop_rows(self, mask_ids) -> None:
        drop = sorted(self._row[i] for i in mask_ids)
        self._overlap = np.delete(np.delete(self._overlap, drop, axis=0), drop, axis=1)
        gone = set(mask_ids)
        self._order = [i for i in self._order if i not in gone]
        self._row = {i: r for r, i in enumerate(self._order)}
        self._pending = [i for i in self._pending if i not in gone]

    def _fill(self, mask_id: int) -> None:
        rec = self.records[mask_id]
        counts = self.volume.query_overlaps(rec.voxels, self.mapping)
        r = self._row[mask_id]
        for other in self._order:
            c = self._row[other]
            if other == mask_id:
                self._overlap[r, r] = 1.0
                self.recomputed_entries += 1
                continue
            inter = counts.get(other, 0)
            if np.isnan(self._overlap[r, c]):
                self._overlap[r, c] = (
                    self._ratio(inter, self.visible_count(other, rec.source_frames)) if inter else 0.0
                )
                self.recomputed_entries += 1
            if np.isnan(self._overlap[c, r]):
                self._overlap[c, r] = (
                    self._ratio(inter, self.visible_count(mask_id, self.records[other].source_frames))
                    if inter
                    else 0.0
                )
                self.recomputed_entries += 1

    def rebuild_overlap_rows(self, new_ids=None) -> None:
        """Compute the rows and columns of newly appended masks against all live masks."""
        targets = list(self._pending) if new_ids is None else [i for i in new_ids if i in self._row]
        for mask_id in targets:
            self._fill(mask_id)
        done = set(targets)
        self._pending = [i for i in self._pending if i not in done]

    def overlap_matrix(self) -> tuple[list[int], np.ndarray]:
        """(live IDs in row order, overlap-ratio matrix), completing any pending rows."""
        if self._pending:
            self.rebuild_overlap_rows()
        return list(self._order), self._overlap.copy()

    # -- updates -----------------------------------------------------------

    def add_mask(self, voxels, frame_id: int, semantic_feature=None) -> int:
        """Register a lifted 2D mask as a new weight-1 mask; returns its ID."""
        voxels = np.unique(np.asarray(voxels, dtype=np.int64))
        if voxels.size == 0:
            raise ValueError("empty voxel set; discard the mask upstream")
        if semantic_feature is None:
            sem = np.zeros(self.semantic_dim)
        else:
            sem = np.asarray(semantic_feature, dtype=np.float64)
            if sem.shape != (self.semantic_dim,):
                raise ValueError(f"semantic feature must have dimension {self.semantic_dim}")
            if sem.any() and abs(np.linalg.norm(sem) - 1.0) > 1e-6:
                raise ValueError("semantic feature must be unit-norm or the zero sentinel")
        ident = self._issue_id()
        self.volume.register_mask(voxels, ident)
        self.mapping.issue(ident)
        self.records[ident] = MaskRecord(
            current_id=ident,
            voxels=voxels,
            weight=1,
            semantic_feature=sem,
            geometric_feature=self._geometric(voxels),
            source_frames=frozenset([int(frame_id)]),
            constituent_original_ids=frozenset([ident]),
        )
        self._append_row(ident)
        if self.events is not None:
            self.events.append(("add", ident, voxels))
        return ident

    def merge_group(self, cluster) -> int:
        """Fold a cluster of live masks into one new mask; voxel entries are left untouched."""
        ids = sorted(set(int(i) for i in cluster))
        if len(ids) < 2:
            raise ValueError("a merge group needs at least two masks")
        parts = [self.record(i) for i in ids]
        new_id = self._issue_id()
        weight = sum(p.weight for p in parts)
        sem = normalize_or_zero(sum(p.weight * p.semantic_feature for p in parts))
        voxels = np.unique(np.concatenate([p.voxels for p in parts]))
        originals = frozenset().union(*(p.constituent_original_ids for p in parts))
        self.mapping.remap(originals, new_id)
        for i in ids:
            del self.records[i]
        self._vis = {k: v for k, v in self._vis.items() if k[0] not in ids}
        self._drop_rows(ids)
        self.records[new_id] = MaskRecord(
            current_id=new_id,
            voxels=voxels,
            weight=weight,
            semantic_feature=sem,
            geometric_feature=self._geometric(voxels),
            source_frames=frozenset().union(*(p.source_frames for p in parts)),
            constituent_original_ids=originals,
        )
        self._append_row(new_id)
        if self.events is not None:
            self.events.append(("merge", tuple(ids), new_id))
        return new_id
