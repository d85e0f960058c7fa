"""Brute-force oracles, the voxel-rewrite baseline and class-agnostic average precision."""

from __future__ import annotations

import math
import time

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .volume import unpack_keys

AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


# -- supporters ----------------------------------------------------------------

def brute_force_supporters(overlap, weights, tau_inclusion: float = 0.8, tau_included: float = 0.1) -> np.ndarray:
    """Triple loop over (a, b, c): add w_c when c includes both a and b and both see c."""
    I = np.asarray(overlap, dtype=np.float64)
    n = I.shape[0]
    w = [int(x) if float(x).is_integer() else float(x) for x in np.asarray(weights).tolist()]
    A = [[0] * n for _ in range(n)]
    for a in range(n):
        for b in range(n):
            total = 0
            for c in range(n):
                if c == a or c == b:
                    continue
                if (
                    I[c, a] > tau_inclusion
                    and I[c, b] > tau_inclusion
                    and I[a, c] > tau_included
                    and I[b, c] > tau_included
                ):
                    total += w[c]
            A[a][b] = total
    return np.array(A, dtype=np.int64 if all(isinstance(x, int) for x in w) else np.float64).reshape(n, n)


# -- overlap ratio -------------------------------------------------------------

def _visible_scalar(volume, key: int, frame) -> bool:
    """Per-voxel visibility test, evaluated with plain floats in the library's operation order."""
    vs = volume.voxel_size
    i, j, k = (int(v) for v in unpack_keys(np.array([key]))[0])
    px, py, pz = i * vs, j * vs, k * vs
    pose = np.asarray(frame.pose, dtype=np.float64).tolist()
    dx, dy, dz = px - pose[0][3], py - pose[1][3], pz - pose[2][3]
    xc = pose[0][0] * dx + pose[1][0] * dy + pose[2][0] * dz
    yc = pose[0][1] * dx + pose[1][1] * dy + pose[2][1] * dz
    zc = pose[0][2] * dx + pose[1][2] * dy + pose[2][2] * dz
    if not zc > 0:
        return False
    K = frame.intrinsics
    col = math.floor(K.fx * xc / zc + K.cx + 0.5)
    row = math.floor(K.fy * yc / zc + K.cy + 0.5)
    if not (0 <= col < K.width and 0 <= row < K.height):
        return False
    d = float(frame.depth[row, col])
    return d > 0 and zc <= d + volume.occlusion_tolerance


def brute_force_overlap(bank, a: int, b: int) -> float:
    """Overlap ratio of a to b from stored voxel sets and per-voxel projection loops."""
    ra, rb = bank.record(a), bank.record(b)
    inter = len(set(ra.voxels.tolist()) & set(rb.voxels.tolist()))
    if inter == 0:
        return 0.0
    frames = [bank.frames[f] for f in sorted(ra.source_frames)]
    visible = sum(
        1 for key in rb.voxels.tolist() if any(_visible_scalar(bank.volume, key, fr) for fr in frames)
    )
    if visible == 0:
        return 0.0
    return min(1.0, inter / visible)


# -- labelings -----------------------------------------------------------------

def resolved_labeling(volume, mapping) -> dict[int, tuple]:
    """Per allocated voxel key with masks: sorted distinct current IDs."""
    out = {}
    for key in volume.keys().tolist():
        ids = volume.mask_ids_of(key)
        if ids:
            out[key] = tuple(sorted({mapping.resolve(o) for o in ids}))
    return out


def naive_rewrite_baseline(events, kernels=None) -> tuple[dict, float]:
    """Replay add/merge events, rewriting every affected voxel's ID list on merge.

    Returns ``(labeling, seconds)`` where seconds covers only the per-merge
    label maintenance (voxel lookup and rewrite); unions of voxel sets are
    common to every strategy and excluded.
    """
    kernels = kernels or _kernels
    index = kernels.KeyIndex(1024)
    labels = kernels.RewriteLabels()
    voxels_of: dict[int, np.ndarray] = {}
    elapsed = 0.0
    for ev in events:
        if ev[0] == "add":
            _, ident, voxels = ev
            voxels_of[ident] = voxels
            labels.append(index.get_or_insert(voxels), ident)
        elif ev[0] == "merge":
            _, ids, new_id = ev
            union = np.unique(np.concatenate([voxels_of.pop(i) for i in ids]))
            voxels_of[new_id] = union
            old = np.asarray(ids, dtype=np.int64)
            t0 = time.perf_counter()
            labels.rewrite(index.lookup(union), old, new_id)
            elapsed += time.perf_counter() - t0
        else:
            raise ValueError(f"unknown event {ev[0]!r}")
    keys = index.keys()
    out = {}
    for slot, key in enumerate(keys.tolist()):
        ids = labels.ids(slot)
        if ids:
            out[key] = tuple(sorted(set(ids)))
    return out, elapsed


# -- average precision ---------------------------------------------------------

def map_to_gt(pred_points, pred_labels, gt_points, max_dist: float) -> np.ndarray:
    """Label of the nearest predicted point within ``max_dist`` of each GT point, else 0."""
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    pred_points = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    if pred_points.shape[0] == 0:
        return np.zeros(gt_points.shape[0], dtype=np.int64)
    dist, idx = cKDTree(pred_points).query(gt_points, k=1, distance_upper_bound=max_dist)
    out = np.zeros(gt_points.shape[0], dtype=np.int64)
    hit = np.isfinite(dist)
    out[hit] = np.asarray(pred_labels, dtype=np.int64)[idx[hit]]
    return out


def _ap_from_flags(tp_flags, n_gt: int) -> float:
    if not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum([not t for t in tp_flags])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # all-point interpolation: precision envelope integrated over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(predictions, gt_labels, thresholds=(0.25, 0.5)) -> dict:
    """Class-agnostic AP.

    ``predictions`` is a list of ``(point_indices, score)`` over the GT point
    cloud; ``gt_labels`` holds one instance label per point (0 = background).
    Returns ``{threshold: AP}``.
    """
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    gt_ids = [int(g) for g in np.unique(gt_labels) if g > 0]
    if not gt_ids:
        raise ValueError("ground truth contains no instances")
    gt_masks = [gt_labels == g for g in gt_ids]
    gt_sizes = np.array([m.sum() for m in gt_masks])
    order = sorted(range(len(predictions)), key=lambda i: -float(predictions[i][1]))
    ious = []
    for i in order:
        idx = np.unique(np.asarray(predictions[i][0], dtype=np.int64))
        if idx.size == 0:
            ious.append(np.zeros(len(gt_ids)))
            continue
        inter = np.array([m[idx].sum() for m in gt_masks])
        ious.append(inter / (gt_sizes + idx.size - inter))
    out = {}
    for thr in thresholds:
        matched = np.zeros(len(gt_ids), dtype=bool)
        flags = []
        for row in ious:
            cand = np.where(matched, -1.0, row)
            best = int(np.argmax(cand))
            if cand[best] > thr:
                matched[best] = True
                flags.append(True)
            else:
                flags.append(False)
        out[float(thr)] = _ap_from_flags(flags, len(gt_ids))
    return out


def evaluate(pred_points, pred_labels, instances, gt_points, gt_labels, voxel_size: float = 0.05) -> dict:
    """Metrics for an exported result: mean AP over 0.50:0.05:0.95, AP_50 and AP_25."""
    mapped = map_to_gt(pred_points, pred_labels, gt_points, 2.0 * voxel_size)
    preds = [(np.nonzero(mapped == inst["id"])[0], float(inst["weight"])) for inst in instances]
    ap = average_precision(preds, gt_labels, (0.25,) + AP_THRESHOLDS)
    return {
        "AP": float(np.mean([ap[float(t)] for t in AP_THRESHOLDS])),
        "AP_50": ap[0.5],
        "AP_25": ap[0.25],
    }
