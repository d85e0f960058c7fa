"""Similarity, view-consensus supporter counts, merge decisions and clustering."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .mask_bank import MaskBank


@dataclass(frozen=True)
class MergeConfig:
    tau_inclusion: float = 0.8
    tau_included: float = 0.1
    tau_sim: float = 2.3
    tau_supporter: float = 5.0
    tau_weight: float = 5.0
    keyframe_interval: int = 10
    merge_interval: int = 5

    def __post_init__(self):
        if not 0 < self.tau_included < self.tau_inclusion <= 1:
            raise ValueError("need 0 < tau_included < tau_inclusion <= 1")
        if self.tau_sim <= 0:
            raise ValueError("tau_sim must be positive")
        if self.tau_supporter < 1 or self.tau_weight < 1:
            raise ValueError("tau_supporter and tau_weight must be >= 1")
        if self.keyframe_interval < 1 or self.merge_interval < 1:
            raise ValueError("intervals must be >= 1")


@dataclass
class MergeStats:
    step: int
    masks_before: int
    masks_after: int
    pairs: int
    clusters: int
    cluster_sizes: list = field(default_factory=list)
    frame_id: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _square(name, m, n=None):
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or (n is not None and m.shape[0] != n):
        raise ValueError(f"{name} must be a square matrix over the live masks")
    return m


def compute_similarity(overlap, semantic, geometric) -> np.ndarray:
    """Mutual overlap plus semantic and geometric cosine similarity."""
    overlap = _square("overlap matrix", np.asarray(overlap, dtype=np.float64))
    n = overlap.shape[0]
    semantic = np.asarray(semantic, dtype=np.float64)
    geometric = np.asarray(geometric, dtype=np.float64)
    if semantic.ndim != 2 or semantic.shape[0] != n or geometric.ndim != 2 or geometric.shape[0] != n:
        raise ValueError("feature matrices must have one row per live mask")
    return 0.5 * (overlap + overlap.T) + semantic @ semantic.T + geometric @ geometric.T


def supporter_indicator(overlap, tau_inclusion: float, tau_included: float) -> np.ndarray:
    """B[a, c]: c sees a as part of itself and a sees c; diagonal zeroed."""
    overlap = _square("overlap matrix", np.asarray(overlap, dtype=np.float64))
    b = (overlap.T > tau_inclusion) & (overlap > tau_included)
    np.fill_diagonal(b, False)
    return b


def compute_supporters(overlap, weights, tau_inclusion: float = 0.8, tau_included: float = 0.1) -> np.ndarray:
    """Weighted supporter counts: A = B' W B'^T."""
    overlap = _square("overlap matrix", overlap)
    weights = np.asarray(weights)
    if weights.shape != (overlap.shape[0],):
        raise ValueError("one weight per live mask required")
    b = supporter_indicator(overlap, tau_inclusion, tau_included)
    dtype = np.int64 if np.issubdtype(weights.dtype, np.integer) else np.float64
    bw = b.astype(dtype)
    return (bw * weights.astype(dtype)[None, :]) @ bw.T


def decide_merges(similarity, supporters, config: MergeConfig, ids=None) -> set[tuple[int, int]]:
    """Unordered pairs (as (low, high)) passing either the similarity or supporter test."""
    similarity = _square("similarity matrix", similarity)
    supporters = _square("supporter matrix", supporters, similarity.shape[0])
    hit = (similarity > config.tau_sim) | (supporters > config.tau_supporter)
    hit = np.triu(hit | hit.T, k=1)
    rows, cols = np.nonzero(hit)
    if ids is None:
        return {(int(a), int(b)) for a, b in zip(rows, cols)}
    ids = list(ids)
    return {tuple(sorted((int(ids[a]), int(ids[b])))) for a, b in zip(rows, cols)}


def cluster_pairs(pairs) -> list[list[int]]:
    """Connected components of the pair graph, each sorted, ordered by smallest member."""
    parent: dict[int, int] = {}

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for a, b in pairs:
        parent.setdefault(a, a)
        parent.setdefault(b, b)
        ra, rb = find(a), find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            parent[rb] = ra
    groups: dict[int, list[int]] = {}
    for x in parent:
        groups.setdefault(find(x), []).append(x)
    return sorted((sorted(g) for g in groups.values() if len(g) >= 2), key=lambda g: g[0])


def merge_step(bank: MaskBank, config: MergeConfig, step: int = 0, frame_id=None) -> MergeStats:
    """One scheduled merge: decide all pairs on the current state, merge each cluster once."""
    ids, overlap = bank.overlap_matrix()
    before = len(ids)
    if before < 2:
        return MergeStats(step, before, before, 0, 0, [], frame_id)
    sim = compute_similarity(overlap, bank.semantic_matrix(), bank.geometric_matrix())
    sup = compute_supporters(overlap, bank.weights(), config.tau_inclusion, config.tau_included)
    pairs = decide_merges(sim, sup, config, ids)
    clusters = cluster_pairs(pairs)
    new_ids = [bank.merge_group(c) for c in clusters]
    bank.rebuild_overlap_rows(new_ids)
    return MergeStats(step, before, len(bank), len(pairs), len(clusters), [len(c) for c in clusters], frame_id)
