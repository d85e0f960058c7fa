import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskfuse.eval import brute_force_overlap, naive_rewrite_baseline, resolved_labeling
from maskfuse.mask_bank import DeadMaskError, MaskBank
from maskfuse.volume import CameraIntrinsics, Frame, VoxelVolume, key_centers

from .builders import patch_keys, random_bank, random_merges


def reported_fixture(restrict_visibility: bool, kernels=None):
    """|V_a| = 3520, |V_b| = 644, 358 shared voxels.

    V_b is a 28 x 23 patch at z = 2 m.  With ``restrict_visibility`` the frame
    of mask a has valid depth only on the pixels of the shared voxels.
    """
    K = CameraIntrinsics(100.0, 100.0, 20.0, 20.0, 160, 120)
    cells = np.stack(np.meshgrid(np.arange(28), np.arange(23), indexing="ij"), -1).reshape(-1, 2)
    v_b = patch_keys(cells)
    shared = v_b[:358]
    extra = patch_keys(np.stack(np.meshgrid(np.arange(60), np.arange(53), indexing="ij"), -1).reshape(-1, 2)[:3162], k=100)
    v_a = np.concatenate([shared, extra])
    depth_a = np.full((K.height, K.width), 2.0)
    if restrict_visibility:
        depth_a[:] = 0.0
        c = key_centers(shared, 0.05)
        cols = np.floor(K.fx * c[:, 0] / c[:, 2] + K.cx + 0.5).astype(int)
        rows = np.floor(K.fy * c[:, 1] / c[:, 2] + K.cy + 0.5).astype(int)
        depth_a[rows, cols] = 2.0
    bank = MaskBank(VoxelVolume(0.05, kernels=kernels), 4, 4)
    bank.add_frame(Frame(0, depth_a, np.eye(4), K))
    bank.add_frame(Frame(1, np.full((K.height, K.width), 2.0), np.eye(4), K))
    a = bank.add_mask(v_a, 0)
    b = bank.add_mask(v_b, 1)
    return bank, a, b


def test_reported_example_clamps_to_one(kernels):
    bank, a, b = reported_fixture(True, kernels)
    assert bank.record(a).voxels.size == 3520 and bank.record(b).voxels.size == 644
    assert bank.overlap_ratio(a, b) == 1.0
    assert bank.naive_overlap_ratio(a, b) == pytest.approx(358 / 644, abs=1e-9)
    assert round(bank.naive_overlap_ratio(a, b), 3) == 0.556


def test_reported_example_full_visibility(kernels):
    bank, a, b = reported_fixture(False, kernels)
    assert bank.overlap_ratio(a, b) == pytest.approx(358 / 644, abs=1e-12)


def test_first_mask_identity_mapping(kernels):
    bank, _ = random_bank(0, n_masks=1, kernels=kernels)
    (ident,) = bank.live_ids()
    rec = bank.record(ident)
    assert rec.weight == 1 and bank.resolve(ident) == ident
    assert bank.mapping.entries() == {ident: ident}
    assert rec.constituent_original_ids == {ident}


def test_disjoint_masks_zero_off_diagonal():
    bank = MaskBank(VoxelVolume(), 4, 4)
    bank.add_frame(Frame(0, np.full((48, 64), 2.0), np.eye(4), CameraIntrinsics(50, 50, 31.5, 23.5, 64, 48)))
    bank.add_mask(patch_keys([[0, 0], [0, 1]]), 0)
    bank.add_mask(patch_keys([[5, 5], [5, 6]]), 0)
    _, m = bank.overlap_matrix()
    assert m.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_missing_semantic_feature_is_zero_sentinel():
    bank, _ = random_bank(1, n_masks=2)
    frame_id = next(iter(bank.frames))
    ident = bank.add_mask(patch_keys([[1, 1], [1, 2]]), frame_id)
    sem = bank.record(ident).semantic_feature
    assert not sem.any()
    assert (bank.semantic_matrix() @ sem == 0).all()


def test_add_mask_rejects_bad_inputs():
    bank, _ = random_bank(1, n_masks=1)
    with pytest.raises(ValueError):
        bank.add_mask(np.zeros(0, dtype=np.int64), 0)
    with pytest.raises(ValueError):
        bank.add_mask(patch_keys([[0, 0]]), 0, np.full(8, 0.5))


def test_resolve_through_chained_merges(kernels):
    bank, _ = random_bank(2, n_masks=5, kernels=kernels)
    a, b, c = bank.live_ids()[:3]
    m1 = bank.merge_group([a, b])
    assert bank.resolve(a) == bank.resolve(b) == m1
    m2 = bank.merge_group([m1, c])
    assert bank.resolve(a) == bank.resolve(b) == bank.resolve(c) == m2
    with pytest.raises(KeyError):
        bank.resolve(999)
    with pytest.raises(DeadMaskError):
        bank.record(m1)


def test_merge_group_combines_fields(kernels):
    bank, _ = random_bank(3, n_masks=3, kernels=kernels)
    a, b, _ = bank.live_ids()
    ra, rb = bank.record(a), bank.record(b)
    new = bank.merge_group([a, b])
    rec = bank.record(new)
    assert rec.weight == 2
    assert rec.voxels.tolist() == np.union1d(ra.voxels, rb.voxels).tolist()
    assert rec.source_frames == ra.source_frames | rb.source_frames
    want = ra.semantic_feature + rb.semantic_feature
    assert np.allclose(rec.semantic_feature, want / np.linalg.norm(want))
    assert abs(np.linalg.norm(rec.semantic_feature) - 1) < 1e-6


def test_merging_equal_features_keeps_feature():
    bank, _ = random_bank(4, n_masks=0)
    f = np.ones(8) / np.sqrt(8)
    a = bank.add_mask(patch_keys([[0, 0]]), 0, f)
    b = bank.add_mask(patch_keys([[0, 1]]), 1, f)
    assert np.allclose(bank.record(bank.merge_group([a, b])).semantic_feature, f)


def test_merge_leaves_voxel_lists_untouched(kernels):
    bank, _ = random_bank(5, n_masks=4, kernels=kernels)
    before = {k: bank.volume.mask_ids_of(k) for k in bank.volume.keys().tolist()}
    bank.merge_group(bank.live_ids()[:3])
    after = {k: bank.volume.mask_ids_of(k) for k in bank.volume.keys().tolist()}
    assert before == after


def test_merge_group_errors():
    bank, _ = random_bank(6, n_masks=3)
    a, b, _ = bank.live_ids()
    with pytest.raises(ValueError):
        bank.merge_group([a])
    bank.merge_group([a, b])
    with pytest.raises(DeadMaskError):
        bank.merge_group([a, bank.live_ids()[0]])
    with pytest.raises(DeadMaskError):
        bank.overlap_ratio(a, bank.live_ids()[0])


def test_one_new_mask_recomputes_one_row_and_column(kernels):
    bank, _ = random_bank(7, n_masks=9, kernels=kernels)
    bank.overlap_matrix()
    bank.recomputed_entries = 0
    new = bank.merge_group(bank.live_ids()[:2])
    bank.rebuild_overlap_rows([new])
    n = len(bank)
    assert bank.recomputed_entries == 2 * n - 1


def test_retained_rows_unchanged_after_merge():
    bank, _ = random_bank(8, n_masks=7)
    ids, before = bank.overlap_matrix()
    merged = ids[:2]
    new = bank.merge_group(merged)
    bank.rebuild_overlap_rows([new])
    ids2, after = bank.overlap_matrix()
    kept = [i for i in ids if i not in merged]
    old = [ids.index(i) for i in kept]
    cur = [ids2.index(i) for i in kept]
    assert np.array_equal(before[np.ix_(old, old)], after[np.ix_(cur, cur)])
    assert ids2[-1] == new


def test_no_merge_no_matrix_change():
    bank, _ = random_bank(9, n_masks=5)
    _, m1 = bank.overlap_matrix()
    bank.rebuild_overlap_rows([])
    _, m2 = bank.overlap_matrix()
    assert np.array_equal(m1, m2)


@given(st.integers(0, 10_000))
def test_matrix_equals_from_scratch_after_merges(seed):
    bank, rng = random_bank(seed, n_masks=7)
    bank.overlap_matrix()
    random_merges(bank, rng, steps=3)
    ids, m = bank.overlap_matrix()
    for r, a in enumerate(ids):
        for c, b in enumerate(ids):
            want = 1.0 if a == b else bank.overlap_ratio(a, b)
            assert m[r, c] == want
            assert 0.0 <= m[r, c] <= 1.0


@given(st.integers(0, 10_000))
def test_overlap_matches_brute_force(seed):
    bank, rng = random_bank(seed, n_masks=6)
    random_merges(bank, rng, steps=2)
    for a in bank.live_ids():
        for b in bank.live_ids():
            if a != b:
                assert bank.overlap_ratio(a, b) == brute_force_overlap(bank, a, b)


@given(st.integers(0, 10_000), st.integers(0, 4))
def test_conservation_and_mapping_invariants(seed, steps):
    bank, rng = random_bank(seed, n_masks=8, record_events=True)
    frames_of = {i: bank.record(i).source_frames for i in bank.live_ids()}
    random_merges(bank, rng, steps=steps)
    issued = set(bank.mapping.entries())
    recs = [bank.record(i) for i in bank.live_ids()]
    all_orig = [o for r in recs for o in r.constituent_original_ids]
    assert sorted(all_orig) == sorted(issued)
    assert sum(r.weight for r in recs) == len(issued)
    assert all(r.weight == len(r.constituent_original_ids) for r in recs)
    live = set(bank.live_ids())
    assert set(bank.mapping.entries().values()) <= live
    # resolve is the identity on its image
    assert all(bank.resolve(c) == c for c in set(bank.mapping.entries().values()) if c in issued)
    for r in recs:
        assert r.source_frames == frozenset().union(*(frames_of[o] for o in r.constituent_original_ids))
    labels, _ = naive_rewrite_baseline(bank.events)
    assert resolved_labeling(bank.volume, bank.mapping) == labels
