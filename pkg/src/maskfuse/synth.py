"""Deterministic synthetic RGB-D scenes: a box-shaped room with axis-aligned boxes.

Surfaces carry object IDs: floor 1, ceiling 2, walls 3-6 (x-, x+, y-, y+), boxes 7+.
Depth is measured along the optical axis; camera axes follow the x-right,
y-down, z-forward convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import StubHashProvider
from .volume import CameraIntrinsics, Frame, points_to_keys, unproject

FLOOR, CEILING = 1, 2
ROOM_SURFACES = (1, 2, 3, 4, 5, 6)
FIRST_BOX_ID = 7


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    object_id: int

    @property
    def lo(self):
        return np.asarray(self.center, dtype=np.float64) - 0.5 * np.asarray(self.size, dtype=np.float64)

    @property
    def hi(self):
        return np.asarray(self.center, dtype=np.float64) + 0.5 * np.asarray(self.size, dtype=np.float64)


@dataclass
class SceneSpec:
    room: tuple  # (xmin, xmax, ymin, ymax, zmin, zmax)
    boxes: list
    poses: list
    intrinsics: CameraIntrinsics
    seed: int = 0
    depth_jitter: float = 0.0
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = np.array(self.room[0::2], dtype=np.float64)
        hi = np.array(self.room[1::2], dtype=np.float64)
        for box in self.boxes:
            if (box.lo < lo - 1e-9).any() or (box.hi > hi + 1e-9).any():
                raise ValueError(f"box {box.object_id} extends outside the room")
        for pose in self.poses:
            rot = np.asarray(pose)[:3, :3]
            if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
                raise ValueError("trajectory pose is not a rigid transform")

    @property
    def object_ids(self) -> list[int]:
        return list(ROOM_SURFACES) + [b.object_id for b in self.boxes]

    def region_of(self, points, tol: float = 0.05) -> np.ndarray:
        """Object ID of the surface nearest each point, or -1 when none lies within ``tol``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dists = [np.abs(points[:, axis] - self.room[2 * axis + side]) for axis in (2, 0, 1) for side in (0, 1)]
        ids = [FLOOR, CEILING, 3, 4, 5, 6]
        for box in self.boxes:
            lo, hi = box.lo, box.hi
            outside = np.linalg.norm(np.maximum(np.maximum(lo - points, points - hi), 0.0), axis=1)
            inside = np.min(np.minimum(points - lo, hi - points), axis=1)
            dists.append(np.where(outside > 0, outside, np.abs(inside)))
            ids.append(box.object_id)
        d = np.stack(dists, axis=1)
        best = np.argmin(d, axis=1)
        out = np.asarray(ids)[best]
        return np.where(d[np.arange(points.shape[0]), best] <= tol, out, -1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, eye
    return pose


def orbit_poses(n, radius, height, target=(0.0, 0.0, 0.0), center=(0.0, 0.0), phase=0.0) -> list:
    poses = []
    for i in range(n):
        theta = phase + 2.0 * np.pi * i / n
        eye = (center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta), height)
        poses.append(look_at(eye, target))
    return poses


def sweep_poses(n, start, end, look_offset) -> list:
    """Camera translating from ``start`` to ``end``, looking at position + ``look_offset``."""
    start, end, off = (np.asarray(v, dtype=np.float64) for v in (start, end, look_offset))
    return [look_at(start + (end - start) * i / max(n - 1, 1), start + (end - start) * i / max(n - 1, 1) + off)
            for i in range(n)]


def default_intrinsics(width=160, height=120, focal=120.0) -> CameraIntrinsics:
    return CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def default_boxes() -> list:
    # faces fall on multiples of 0.05 m so they coincide with voxel-centre planes
    layout = [
        ((0.90, 0.00), (0.3, 0.3, 0.3)),
        ((0.65, 0.65), (0.4, 0.3, 0.2)),
        ((0.00, 0.90), (0.3, 0.4, 0.4)),
        ((-0.65, 0.65), (0.2, 0.2, 0.5)),
        ((-0.90, 0.00), (0.4, 0.4, 0.3)),
        ((-0.65, -0.65), (0.3, 0.2, 0.3)),
        ((0.00, -0.90), (0.2, 0.4, 0.2)),
        ((0.65, -0.65), (0.3, 0.3, 0.4)),
    ]
    return [
        Box((x, y, sz[2] / 2.0), sz, FIRST_BOX_ID + i) for i, ((x, y), sz) in enumerate(layout)
    ]


def default_scene(frames: int = 60, seed: int = 0) -> SceneSpec:
    """Room 20 x 20 x 3 m, eight boxes around the centre, orbit looking down at them."""
    return SceneSpec(
        room=(-10.0, 10.0, -10.0, 10.0, 0.0, 3.0),
        boxes=default_boxes(),
        poses=orbit_poses(frames, radius=2.2, height=2.0, target=(0.0, 0.0, 0.1)),
        intrinsics=default_intrinsics(),
        seed=seed,
        source={"trajectory": {"type": "orbit", "frames": frames, "radius": 2.2, "height": 2.0,
                               "target": [0.0, 0.0, 0.1]}},
    )


def sweep_scene(frames: int = 80, seed: int = 0) -> SceneSpec:
    """Boxes in a row along x; the camera slides past them so objects enter view one by one."""
    xs = [-3.2, -2.4, -1.6, -0.8, 0.0, 0.8, 1.6, 2.4, 3.2]
    sizes = [(0.3, 0.3, 0.3), (0.2, 0.4, 0.3), (0.4, 0.3, 0.2), (0.3, 0.2, 0.4), (0.3, 0.3, 0.2),
             (0.2, 0.2, 0.3), (0.4, 0.4, 0.3), (0.3, 0.2, 0.2), (0.2, 0.3, 0.4)]
    boxes = [Box((x, 0.0, sz[2] / 2.0), sz, FIRST_BOX_ID + i) for i, (x, sz) in enumerate(zip(xs, sizes))]
    traj = {"type": "sweep", "frames": frames, "start": [-4.5, -1.5, 1.2], "end": [4.5, -1.5, 1.2],
            "look_offset": [0.0, 1.5, -1.1]}
    return SceneSpec(
        room=(-10.0, 10.0, -10.0, 10.0, 0.0, 3.0),
        boxes=boxes,
        poses=sweep_poses(frames, traj["start"], traj["end"], traj["look_offset"]),
        intrinsics=default_intrinsics(),
        seed=seed,
        source={"trajectory": traj,
                "boxes": [{"center": list(b.center), "size": list(b.size)} for b in boxes]},
    )


def _pixel_rays(pose, K: CameraIntrinsics):
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u, dtype=np.float64)], axis=-1)
    pose = np.asarray(pose, dtype=np.float64)
    dirs = cam.reshape(-1, 3) @ pose[:3, :3].T
    return pose[:3, 3], dirs


def render_frame(spec: SceneSpec, pose) -> tuple[np.ndarray, np.ndarray]:
    """(depth along the optical axis in metres, object-ID label image) by ray casting."""
    K = spec.intrinsics
    origin, dirs = _pixel_rays(pose, K)
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    label = np.zeros(n, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        # room shell: the nearest forward plane hit seen from inside
        for ident, axis, value in (
            (FLOOR, 2, spec.room[4]), (CEILING, 2, spec.room[5]),
            (3, 0, spec.room[0]), (4, 0, spec.room[1]),
            (5, 1, spec.room[2]), (6, 1, spec.room[3]),
        ):
            s = (value - origin[axis]) / dirs[:, axis]
            hit = np.isfinite(s) & (s > 0) & (s < best)
            best[hit] = s[hit]
            label[hit] = ident
        for box in spec.boxes:
            t1 = (box.lo[None, :] - origin[None, :]) / dirs
            t2 = (box.hi[None, :] - origin[None, :]) / dirs
            tnear = np.nanmax(np.minimum(t1, t2), axis=1)
            tfar = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tnear <= tfar) & (tnear > 0) & (tnear < best)
            best[hit] = tnear[hit]
            label[hit] = box.object_id
    depth = np.where(np.isfinite(best), best, 0.0)
    label = np.where(depth > 0, label, 0)
    return depth.reshape(K.height, K.width), label.reshape(K.height, K.width)


def perturb_oversegment(labels, parts: int, seed: int) -> tuple[np.ndarray, dict]:
    """Split each labelled region into ``parts`` bands along a seeded random direction.

    Returns the new label image and ``{new_label: old_label}``.  New labels are
    ``(old - 1) * parts + band + 1``; regions smaller than ``parts`` pixels keep
    a single band.  Bands are connected for convex regions.
    """
    if parts < 1:
        raise ValueError("parts must be >= 1")
    labels = np.asarray(labels)
    out = np.zeros_like(labels, dtype=np.int64)
    origin = {}
    for old in np.unique(labels):
        if old <= 0:
            continue
        rows, cols = np.nonzero(labels == old)
        base = (int(old) - 1) * parts + 1
        if parts == 1 or rows.size < parts:
            out[rows, cols] = base
            origin[base] = int(old)
            continue
        rng = np.random.default_rng([int(seed), int(old)])
        angle = rng.uniform(0.0, np.pi)
        proj = cols * np.cos(angle) + rows * np.sin(angle)
        order = np.argsort(proj, kind="stable")
        band = np.empty(rows.size, dtype=np.int64)
        band[order] = np.arange(rows.size) * parts // rows.size
        out[rows, cols] = base + band
        for b in range(parts):
            origin[base + b] = int(old)
    return out, origin


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    frames: list
    semantic_tags: dict  # (frame_id, label) -> object id
    gt_points: np.ndarray
    gt_labels: np.ndarray
    object_pixels: np.ndarray  # frames x objects pixel counts, column order = object_ids

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.spec.intrinsics

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)


def make_dataset(spec: SceneSpec, overseg: int = 1, gt_spacing: float = 0.025) -> SyntheticDataset:
    """Render every pose; depth is quantised to millimetres like the on-disk format."""
    frames, tags, pts, lbls, counts = [], {}, [], [], []
    ids = spec.object_ids
    jitter_rng = np.random.default_rng([spec.seed, 7])
    for t, pose in enumerate(spec.poses):
        depth, objects = render_frame(spec, pose)
        if spec.depth_jitter > 0:
            noise = jitter_rng.uniform(-spec.depth_jitter, spec.depth_jitter, depth.shape)
            depth = np.where(depth > 0, np.maximum(depth + noise, 1e-3), 0.0)
        depth = np.round(depth * 1000.0) / 1000.0
        objects = np.where(depth > 0, objects, 0)
        if overseg > 1:
            masks, origin = perturb_oversegment(objects, overseg, seed=spec.seed * 100003 + t)
        else:
            masks, origin = objects.copy(), {int(o): int(o) for o in np.unique(objects) if o > 0}
        for new, old in origin.items():
            tags[(t, new)] = old
        frames.append(Frame(t, depth, np.asarray(pose, dtype=np.float64), spec.intrinsics, masks))
        rows, cols = np.nonzero(objects > 0)
        pts.append(unproject(frames[-1], rows, cols, depth[rows, cols]))
        lbls.append(objects[rows, cols])
        counts.append([int((objects == o).sum()) for o in ids])
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    lbls = np.concatenate(lbls) if lbls else np.zeros(0, dtype=np.int64)
    # one GT point per fine grid cell, first sample wins
    _, first = np.unique(points_to_keys(pts, gt_spacing), return_index=True)
    first = np.sort(first)
    return SyntheticDataset(spec, frames, tags, pts[first], lbls[first], np.array(counts))


def stub_provider_for(dataset: SyntheticDataset, seed: int = 0, voxel_size: float = 0.05) -> StubHashProvider:
    """Stub features keyed by ground-truth object, for perfect-feature experiments."""
    spec = dataset.spec
    return StubHashProvider(
        seed=seed,
        semantic_tags=dataset.semantic_tags,
        region_fn=lambda p: spec.region_of(p, tol=voxel_size),
        quantum=voxel_size,
    )


# -- scene files -----------------------------------------------------------

def scene_from_dict(cfg: dict) -> SceneSpec:
    room = tuple(float(v) for v in cfg.get("room", (-10.0, 10.0, -10.0, 10.0, 0.0, 3.0)))
    boxes = cfg.get("boxes")
    if boxes is None:
        box_list = default_boxes()
    else:
        box_list = [
            Box(tuple(map(float, b["center"])), tuple(map(float, b["size"])), FIRST_BOX_ID + i)
            for i, b in enumerate(boxes)
        ]
    img = cfg.get("image", {})
    intr = default_intrinsics(int(img.get("width", 160)), int(img.get("height", 120)), float(img.get("focal", 120.0)))
    traj = dict(cfg.get("trajectory", {}))
    kind = traj.get("type", "orbit")
    frames = int(traj.get("frames", 60))
    if kind == "orbit":
        poses = orbit_poses(frames, float(traj.get("radius", 2.2)), float(traj.get("height", 2.0)),
                            tuple(traj.get("target", (0.0, 0.0, 0.1))), phase=float(traj.get("phase", 0.0)))
    elif kind == "sweep":
        poses = sweep_poses(frames, traj["start"], traj["end"], traj["look_offset"])
    elif kind == "waypoints":
        poses = [look_at(w["eye"], w["target"]) for w in traj["waypoints"]]
    else:
        raise ValueError(f"unknown trajectory type {kind!r}")
    return SceneSpec(room, box_list, poses, intr, int(cfg.get("seed", 0)),
                     float(cfg.get("depth_jitter", 0.0)), source=dict(cfg))


def load_scene(path) -> SceneSpec:
    return scene_from_dict(json.loads(Path(path).read_text()))
