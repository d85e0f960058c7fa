import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from maskfuse.bench import (
    association_masks,
    compare_backends,
    compare_merge_strategies,
    mapping_replay,
    merge_events,
)
from maskfuse.eval import naive_rewrite_baseline


@given(st.integers(1, 120), st.integers(0, 15), st.integers(0, 100))
def test_event_stream_is_well_formed(n_masks, n_merges, seed):
    events = merge_events(n_masks, n_merges, seed, voxels_per_mask=20, object_side=4)
    live, seen = set(), set()
    for ev in events:
        if ev[0] == "add":
            assert ev[1] not in seen
            seen.add(ev[1])
            live.add(ev[1])
            assert np.all(np.diff(ev[2]) > 0)
        else:
            _, ids, new = ev
            assert len(ids) >= 2 and set(ids) <= live and new not in seen
            live -= set(ids)
            live.add(new)
            seen.add(new)
    assert sum(e[0] == "add" for e in events) == n_masks
    assert sum(e[0] == "merge" for e in events) <= n_merges


def test_requested_merges_are_issued():
    events = merge_events(500, 50, 0)
    assert sum(e[0] == "merge" for e in events) == 50


@given(st.integers(2, 60), st.integers(0, 8), st.integers(0, 100))
def test_replay_matches_rewrite_baseline(n_masks, n_merges, seed):
    events = merge_events(n_masks, n_merges, seed, voxels_per_mask=15, object_side=4, masks_per_object=4)
    table, _ = mapping_replay(events)
    naive, _ = naive_rewrite_baseline(events)
    assert table == naive


def test_zero_merges_speedup_is_one():
    res = compare_merge_strategies(40, 0, repeats=1)
    assert res["merges"] == 0 and res["speedup"] == 1.0 and res["labelings_equal"]


def test_association_masks_fixed_size_and_density():
    small, big = association_masks(100, seed=1), association_masks(800, seed=1)
    assert all(m.size == 64 for m in small + big)
    assert association_masks(100, seed=1)[5].tolist() == small[5].tolist()


def test_compare_backends_lists_each_backend():
    rows = compare_backends(n_masks=30, n_merges=3, assoc_masks=50)
    assert {r["backend"] for r in rows} >= {"python"}
    assert all(r["association_ms"] > 0 and r["speedup"] > 0 for r in rows)
