"""Timing fixtures: mapping table vs voxel rewrite, association scaling, kernel backends."""

from __future__ import annotations

import gc
import time

import numpy as np

from . import _kernels
from .eval import naive_rewrite_baseline
from .mask_bank import MappingTable
from .volume import VoxelVolume, pack_keys


def merge_events(n_masks: int, n_merges: int, seed: int = 0, voxels_per_mask: int = 200,
                 object_side: int = 12, masks_per_object: int = 10) -> list:
    """Add/merge event stream resembling an online run.

    Masks are random subsets of per-object cubic regions and arrive object by
    object interleaved; merges are spread evenly over the stream and fold every
    live mask of one object, so merged masks keep growing while each new mask
    stays small.
    """
    rng = np.random.default_rng(seed)
    n_objects = max(1, -(-n_masks // masks_per_object))
    side = object_side
    cell = np.stack(np.meshgrid(*(np.arange(side),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    per = min(voxels_per_mask, cell.shape[0])
    grid = int(np.ceil(n_objects ** (1 / 3)))

    def region(obj):
        gx, gy, gz = obj % grid, (obj // grid) % grid, obj // (grid * grid)
        return cell + np.array([gx, gy, gz]) * (side + 2)

    events = []
    live: dict[int, list[int]] = {}
    next_id = 1
    merge_at = set(np.linspace(0, n_masks, n_merges + 2)[1:-1].round().astype(int).tolist()) if n_merges else set()
    merges_done = 0
    turn = 0
    for m in range(n_masks):
        obj = m % n_objects
        pick = rng.choice(cell.shape[0], size=per, replace=False)
        voxels = np.unique(pack_keys(region(obj)[pick]))
        events.append(("add", next_id, voxels))
        live.setdefault(obj, []).append(next_id)
        next_id += 1
        if m + 1 in merge_at:
            for k in range(n_objects):
                cand = (turn + k) % n_objects
                if len(live.get(cand, [])) >= 2:
                    ids = tuple(sorted(live[cand]))
                    events.append(("merge", ids, next_id))
                    live[cand] = [next_id]
                    next_id += 1
                    merges_done += 1
                    turn = cand + 1
                    break
    # top up when the schedule ran out of mergeable objects
    while merges_done < n_merges:
        mergeable = [o for o in sorted(live) if len(live[o]) >= 2]
        if not mergeable:
            break
        ids = tuple(sorted(live[mergeable[0]]))
        events.append(("merge", ids, next_id))
        live[mergeable[0]] = [next_id]
        next_id += 1
        merges_done += 1
    return events


def mapping_replay(events, kernels=None) -> tuple[dict, float]:
    """Replay events with append-only voxel lists and an ID mapping table.

    Returns ``(labeling, seconds)``; seconds covers only per-merge label
    maintenance (folding constituent ID sets and remapping them).
    """
    kernels = kernels or _kernels
    index = kernels.KeyIndex(1024)
    chains = kernels.IdChains()
    idmap = kernels.IdMap()
    originals: dict[int, frozenset] = {}
    voxels_of: dict[int, np.ndarray] = {}
    elapsed = 0.0
    for ev in events:
        if ev[0] == "add":
            _, ident, voxels = ev
            chains.append(index.get_or_insert(voxels), ident)
            idmap.set(ident, ident)
            originals[ident] = frozenset([ident])
            voxels_of[ident] = voxels
        else:
            _, ids, new_id = ev
            voxels_of[new_id] = np.unique(np.concatenate([voxels_of.pop(i) for i in ids]))
            t0 = time.perf_counter()
            folded = frozenset().union(*(originals.pop(i) for i in ids))
            idmap.remap(np.fromiter(folded, dtype=np.int64, count=len(folded)), new_id)
            originals[new_id] = folded
            elapsed += time.perf_counter() - t0
    out = {}
    for slot, key in enumerate(index.keys().tolist()):
        ids = chains.ids(slot)
        if ids:
            out[key] = tuple(sorted({idmap.resolve(o) for o in ids}))
    return out, elapsed


def compare_merge_strategies(n_masks: int = 500, n_merges: int = 50, seed: int = 0, kernels=None,
                             repeats: int = 3) -> dict:
    """Best-of-``repeats`` merge maintenance time for both strategies, plus an equivalence check."""
    events = merge_events(n_masks, n_merges, seed)
    best_map = best_naive = float("inf")
    same = True
    for _ in range(repeats):
        gc.collect()
        gc.disable()
        try:
            lab_map, t_map = mapping_replay(events, kernels)
            lab_naive, t_naive = naive_rewrite_baseline(events, kernels)
        finally:
            gc.enable()
        same = same and lab_map == lab_naive
        best_map, best_naive = min(best_map, t_map), min(best_naive, t_naive)
    merges = sum(1 for e in events if e[0] == "merge")
    speedup = best_naive / best_map if merges and best_map > 0 else 1.0
    return {
        "masks": n_masks,
        "merges": merges,
        "mapping_table_ms": best_map * 1e3,
        "naive_rewrite_ms": best_naive * 1e3,
        "speedup": speedup,
        "labelings_equal": same,
    }


def association_masks(n_masks: int, voxels_per_mask: int = 64, seed: int = 0, density: float = 2.0) -> list:
    """Cubic blobs of fixed size scattered at constant density (region grows with ``n_masks``)."""
    rng = np.random.default_rng(seed)
    edge = max(1, round(voxels_per_mask ** (1 / 3)))
    blob = np.stack(np.meshgrid(*(np.arange(edge),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    extent = max(edge, int(round((n_masks * blob.shape[0] / density) ** (1 / 3))))
    corners = rng.integers(0, extent, size=(n_masks, 3))
    return [np.unique(pack_keys(blob + c)) for c in corners]


def time_association(masks, kernels=None) -> float:
    """Seconds to register every mask and then query each one's overlaps."""
    kernels = kernels or _kernels
    volume = VoxelVolume(kernels=kernels)
    mapping = MappingTable(kernels)
    t0 = time.perf_counter()
    for ident, voxels in enumerate(masks, 1):
        volume.register_mask(voxels, ident)
        mapping.issue(ident)
    for voxels in masks:
        volume.query_overlaps(voxels, mapping)
    return time.perf_counter() - t0


def _timed(fn) -> float:
    # collector pauses scale with live objects, not with the work measured
    gc.collect()
    gc.disable()
    try:
        return fn()
    finally:
        gc.enable()


def _best_of(fn, repeats: int) -> float:
    return min(_timed(fn) for _ in range(repeats))


def association_scaling(sizes=(1000, 2000, 4000, 8000), voxels_per_mask: int = 64, seed: int = 0,
                        kernels=None, rounds: int = 7) -> dict[int, float]:
    """Best register+query seconds per mask count.

    Sizes are timed round-robin, one run of each per round, so a slow stretch
    on a shared machine hits every size instead of skewing one of them.
    """
    fixtures = {n: association_masks(n, voxels_per_mask, seed) for n in sizes}
    time_association(fixtures[min(sizes)], kernels)  # warm-up
    best = {n: float("inf") for n in sizes}
    for _ in range(rounds):
        for n in sizes:
            best[n] = min(best[n], _timed(lambda: time_association(fixtures[n], kernels)))
    return best


def compare_backends(n_masks: int = 500, n_merges: int = 50, assoc_masks: int = 2000, seed: int = 0) -> list[dict]:
    """Same fixtures on every importable kernel backend."""
    rows = []
    masks = association_masks(assoc_masks, seed=seed)
    for name, mod in _kernels.backends().items():
        merge = compare_merge_strategies(n_masks, n_merges, seed, kernels=mod)
        rows.append({
            "backend": name,
            "association_ms": _best_of(lambda: time_association(masks, mod), 3) * 1e3,
            "mapping_table_ms": merge["mapping_table_ms"],
            "naive_rewrite_ms": merge["naive_rewrite_ms"],
            "speedup": merge["speedup"],
        })
    return rows
