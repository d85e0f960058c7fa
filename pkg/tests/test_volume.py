import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskfuse.eval import _visible_scalar
from maskfuse.mask_bank import MappingTable
from maskfuse.synth import Box, SceneSpec, look_at, render_frame
from maskfuse.volume import (
    CameraIntrinsics,
    Frame,
    FrameError,
    MappingIntegrityError,
    VoxelVolume,
    key_centers,
    pack_keys,
    points_to_keys,
    unpack_keys,
)

from .conftest import BACKENDS, intrinsics, wall_frame

VS = 0.05


def line_keys(start, count):
    return pack_keys(np.stack([np.arange(start, start + count), np.zeros(count), np.zeros(count)], axis=1))


# -- keys ----------------------------------------------------------------------

@given(st.lists(st.tuples(*(st.integers(-(1 << 20), (1 << 20) - 1),) * 3), min_size=1, max_size=50))
def test_pack_unpack_roundtrip(coords):
    ijk = np.array(coords, dtype=np.int64)
    assert (unpack_keys(pack_keys(ijk)) == ijk).all()


def test_distinct_cells_never_share_a_key():
    ijk = np.stack(np.meshgrid(*(np.arange(-3, 3),) * 3, indexing="ij"), -1).reshape(-1, 3)
    assert np.unique(pack_keys(ijk)).size == ijk.shape[0]


def test_pack_rejects_out_of_range():
    with pytest.raises(ValueError):
        pack_keys([[1 << 20, 0, 0]])


def test_intrinsics_validated():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


# -- integration ---------------------------------------------------------------

def test_flat_wall_matches_plane_distance(kernels):
    vol = VoxelVolume(VS, 0.10, kernels=kernels)
    vol.integrate_frame(wall_frame(2.0))
    keys = vol.keys()
    z = key_centers(keys, VS)[:, 2]
    assert z.min() >= 1.9 - 1e-9 and z.max() <= 2.1 + 1e-9
    tsdf, weight = vol.tsdf_of(keys)
    # closed form for a fronto-parallel plane seen head-on: signed distance 2 - z
    assert np.allclose(tsdf, np.clip((2.0 - z) / 0.10, -1, 1), atol=1e-9)
    assert (weight == 1).all()
    on_surface = np.isclose(z, 2.0)
    assert on_surface.any() and (np.abs(tsdf[on_surface]) < 0.5).all()


def test_empty_depth_leaves_volume_unchanged(kernels):
    vol = VoxelVolume(kernels=kernels)
    frame = wall_frame(0.0)
    assert vol.integrate_frame(frame) == 0
    assert len(vol) == 0


def test_integrating_twice_doubles_weight_only(kernels):
    vol = VoxelVolume(kernels=kernels)
    vol.integrate_frame(wall_frame(2.0))
    keys = vol.keys()
    t1, w1 = vol.tsdf_of(keys)
    vol.integrate_frame(wall_frame(2.0, frame_id=1))
    t2, w2 = vol.tsdf_of(keys)
    assert np.allclose(t1, t2, atol=1e-12) and (w2 == 2 * w1).all()
    assert len(vol) == keys.size


def test_integration_errors():
    vol = VoxelVolume()
    bad_pose = np.eye(4)
    bad_pose[0, 0] = 2.0
    with pytest.raises(FrameError):
        vol.integrate_frame(wall_frame(pose=bad_pose))
    frame = wall_frame()
    frame.depth = frame.depth[:-1]
    with pytest.raises(FrameError):
        vol.integrate_frame(frame)
    with pytest.raises(ValueError):
        vol.integrate_frame(wall_frame(), truncation=0.05)


@given(st.lists(st.tuples(st.floats(0.3, 4.0), st.floats(-0.4, 0.4)), min_size=1, max_size=4), st.integers(0, 99))
def test_tsdf_stays_clamped(views, seed):
    rng = np.random.default_rng(seed)
    vol = VoxelVolume()
    K = intrinsics(16, 12, 12.0)
    for t, (z, yaw) in enumerate(views):
        pose = look_at((math.sin(yaw), 0.0, 0.0), (0.0, 0.0, 2.0), up=(0, -1, 0))
        depth = np.clip(z + rng.normal(0, 0.3, (K.height, K.width)), 0, None)
        vol.integrate_frame(Frame(t, depth, pose, K))
    tsdf, _ = vol.tsdf_of(vol.keys())
    assert ((tsdf >= -1) & (tsdf <= 1)).all()


# -- mask lifting ---------------------------------------------------------------

def test_principal_point_lifts_onto_optical_axis(kernels):
    K = intrinsics(65, 49)
    labels = np.zeros((49, 65), dtype=np.int64)
    labels[24, 32] = 1
    frame = Frame(0, np.ones((49, 65)), np.eye(4), K, labels)
    got = VoxelVolume(kernels=kernels).back_project_mask(frame, 1)
    assert got.tolist() == pack_keys([[0, 0, 20]]).tolist()


def test_patch_matches_per_pixel_unprojection():
    K = CameraIntrinsics(500.0, 500.0, 31.5, 23.5, 64, 48)
    labels = np.zeros((48, 64), dtype=np.int64)
    labels[10:20, 30:40] = 4
    frame = Frame(0, np.ones((48, 64)), np.eye(4), K, labels)
    got = VoxelVolume(VS).back_project_mask(frame, 4)
    oracle = set()
    for r in range(10, 20):
        for c in range(30, 40):
            p = ((c - K.cx) / K.fx * 1.0, (r - K.cy) / K.fy * 1.0, 1.0)
            oracle.add(tuple(math.floor(v / VS + 0.5) for v in p))
    assert got.size == len(oracle)
    assert set(map(tuple, unpack_keys(got).tolist())) == oracle


def test_mask_without_valid_depth_lifts_to_nothing():
    frame = wall_frame(0.0, labels=np.ones((48, 64), dtype=np.int64))
    assert VoxelVolume().back_project_mask(frame, 1).size == 0


def test_depth_beyond_limit_is_ignored():
    frame = wall_frame(9.0, labels=np.ones((48, 64), dtype=np.int64))
    assert VoxelVolume(max_depth=8.0).back_project_mask(frame, 1).size == 0


def test_absent_label_is_an_error():
    frame = wall_frame(labels=np.ones((48, 64), dtype=np.int64))
    with pytest.raises(KeyError):
        VoxelVolume().back_project_mask(frame, 2)


# -- registration and overlap queries ----------------------------------------------

def test_register_appends_in_order(kernels):
    vol = VoxelVolume(kernels=kernels)
    a = line_keys(0, 3)
    vol.register_mask(a, 7)
    assert all(vol.entry(k).mask_ids == (7,) for k in a.tolist())
    vol.register_mask(a[1:2], 8)
    assert vol.entry(int(a[1])).mask_ids == (7, 8)
    assert vol.entry(int(a[1])).tsdf == 1.0 and vol.entry(int(a[1])).fusion_weight == 0.0
    with pytest.raises(ValueError):
        vol.register_mask(a, 7)


def test_reported_intersection_358(kernels):
    vol = VoxelVolume(kernels=kernels)
    mapping = MappingTable(kernels)
    v_b = line_keys(0, 644)
    v_a = np.concatenate([line_keys(0, 358), line_keys(1000, 3520 - 358)])
    vol.register_mask(v_a, 1)
    mapping.issue(1)
    vol.register_mask(v_b, 2)
    mapping.issue(2)
    assert vol.query_overlaps(v_a, mapping) == {1: 3520, 2: 358}


def test_query_without_masks_is_empty(kernels):
    vol = VoxelVolume(kernels=kernels)
    vol.integrate_frame(wall_frame())
    assert vol.query_overlaps(vol.keys(), MappingTable(kernels)) == {}


def test_constituents_on_one_voxel_count_once(kernels):
    vol = VoxelVolume(kernels=kernels)
    mapping = MappingTable(kernels)
    for i in range(1, 10):
        mapping.issue(i)
    vol.register_mask(line_keys(0, 2), 3)
    vol.register_mask(line_keys(0, 1), 9)
    mapping.remap([3, 9], 12)
    assert vol.query_overlaps(line_keys(0, 2), mapping) == {12: 2}


def test_unknown_original_id_is_integrity_error(kernels):
    vol = VoxelVolume(kernels=kernels)
    vol.register_mask(line_keys(0, 2), 5)
    with pytest.raises(MappingIntegrityError):
        vol.query_overlaps(line_keys(0, 2), MappingTable(kernels))


@given(st.lists(st.sets(st.integers(0, 60), min_size=1, max_size=25), min_size=1, max_size=8),
       st.sets(st.integers(0, 70), max_size=30))
def test_query_equals_set_intersection(masks, query):
    for mod in BACKENDS.values():
        vol = VoxelVolume(kernels=mod)
        mapping = MappingTable(mod)
        for ident, m in enumerate(masks, 1):
            vol.register_mask(pack_keys([[i, 0, 0] for i in sorted(m)]), ident)
            mapping.issue(ident)
        q = pack_keys([[i, 0, 0] for i in sorted(query)]) if query else np.zeros(0, dtype=np.int64)
        got = vol.query_overlaps(q, mapping)
        want = {i: len(m & query) for i, m in enumerate(masks, 1) if m & query}
        assert got == want


def test_lookup_deterministic_across_capacities():
    rng = np.random.default_rng(5)
    masks = [np.unique(pack_keys(rng.integers(0, 12, size=(40, 3)))) for _ in range(30)]
    results = []
    for cap in (1, 64, 1 << 16):
        vol = VoxelVolume(capacity=cap)
        mapping = MappingTable(vol.kernels)
        for i, m in enumerate(masks, 1):
            vol.register_mask(m, i)
            mapping.issue(i)
        results.append([vol.query_overlaps(m, mapping) for m in masks])
    assert results[0] == results[1] == results[2]


def test_mask_lists_are_append_only(kernels):
    vol = VoxelVolume(kernels=kernels)
    rng = np.random.default_rng(2)
    before = {}
    for ident in range(1, 30):
        vol.register_mask(np.unique(pack_keys(rng.integers(0, 5, size=(20, 3)))), ident)
        for k in vol.keys().tolist():
            ids = vol.mask_ids_of(k)
            prev = before.get(k, [])
            assert ids[: len(prev)] == prev and len(set(ids)) == len(ids)
            before[k] = ids


# -- visibility ----------------------------------------------------------------

def test_surface_voxel_visible_occluded_voxel_not():
    vol = VoxelVolume(VS, occlusion_tolerance=0.1)
    frame = wall_frame(1.0, K=intrinsics(65, 49))
    front = pack_keys([[0, 0, 20]])
    behind = pack_keys([[0, 0, 40]])
    assert vol.project_visible(front, [frame]).tolist() == front.tolist()
    assert vol.project_visible(behind, [frame]).size == 0
    with pytest.raises(ValueError):
        vol.project_visible(front, [])


def test_visibility_matches_scalar_projection_oracle():
    spec = SceneSpec((-5, 5, -5, 5, 0, 3), [Box((0.0, 0.0, 0.25), (0.5, 0.5, 0.5), 7)], [], intrinsics(80, 60, 60.0))
    frames = []
    for t, eye in enumerate([(2.0, 0.3, 1.2), (-1.5, 1.5, 1.0)]):
        pose = look_at(eye, (0.0, 0.0, 0.2))
        depth, _ = render_frame(spec, pose)
        frames.append(Frame(t, depth, pose, spec.intrinsics))
    vol = VoxelVolume(VS)
    rng = np.random.default_rng(11)
    cloud = np.unique(points_to_keys(rng.uniform([-1, -1, 0], [1, 1, 1], size=(3000, 3)), VS))
    got = set(vol.project_visible(cloud, frames).tolist())
    want = {k for k in cloud.tolist() if any(_visible_scalar(vol, k, f) for f in frames)}
    assert got == want
    assert 0 < len(got) < cloud.size


# -- surface extraction -----------------------------------------------------------

def test_wall_surface_points_on_plane(kernels):
    vol = VoxelVolume(kernels=kernels)
    vol.integrate_frame(wall_frame(2.0))
    points, keys = vol.extract_surface_points()
    assert points.shape[0] > 0 and (np.abs(points[:, 2] - 2.0) <= VS + 1e-9).all()
    assert (np.diff(keys) > 0).all()


def test_no_zero_crossing_no_points():
    vol = VoxelVolume()
    assert vol.extract_surface_points()[0].shape == (0, 3)
    vol.integrate_frame(wall_frame(2.0))
    vol._tsdf[:] = 1.0
    assert vol.extract_surface_points()[0].shape == (0, 3)


def test_unit_cube_surface_count():
    cube = Box((0.0, 0.0, 1.5), (1.0, 1.0, 1.0), 7)
    spec = SceneSpec((-20, 20, -20, 20, -20, 20), [cube], [], intrinsics(160, 120, 90.0))
    vol = VoxelVolume(VS)
    centre = np.array(cube.center)
    dirs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0.01, 0, 1), (0.01, 0, -1),
            (1, 1, 1), (-1, -1, -1), (1, -1, 0.5), (-1, 1, -0.5)]
    for t, d in enumerate(dirs):
        eye = centre + 2.5 * np.asarray(d, dtype=np.float64) / np.linalg.norm(d)
        pose = look_at(eye, centre, up=(0, 0, 1) if abs(d[2]) < 0.9 else (0, 1, 0))
        depth, _ = render_frame(spec, pose)
        vol.integrate_frame(Frame(t, np.where(depth < 10, depth, 0.0), pose, spec.intrinsics))
    points, _ = vol.extract_surface_points()
    near = spec.region_of(points, tol=2 * VS) == 7
    expected = 6 * 1.0 / VS**2
    assert abs(near.sum() - expected) <= 0.3 * expected
