"""Balanced pairwise clustering of a latent grid into a stagewise hierarchy.

The finest stage gives every location its own cluster; each coarser stage
merges cluster pairs greedily by squared l2 distance between cluster means
until one cluster covers the grid. Labels are then rewritten into canonical
parent-child form (label j splits into 2j and 2j+1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError
from .grid import LatentGrid, StructureMap

__all__ = [
    "MergeRecord",
    "Hierarchy",
    "greedy_pair_step",
    "build_hierarchy",
    "reindex_hierarchy",
]


@dataclass(frozen=True, eq=False)
class MergeRecord:
    """One coarsening step, kept so tests can replay and audit the greedy scan.

    representatives holds the pre-merge cluster means (working label order),
    pairs the merged index pairs in merge order, distances their squared l2
    distances at merge time.
    """

    representatives: np.ndarray
    pairs: tuple
    distances: tuple


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """Canonical stage-0..K structure maps plus the merge trace that built them."""

    maps: tuple
    merge_trace: tuple = ()

    def __post_init__(self):
        maps = tuple(self.maps)
        if not maps:
            raise InvariantError("hierarchy needs at least the single-cluster stage")
        shape = maps[0].labels.shape
        for i, smap in enumerate(maps):
            if not isinstance(smap, StructureMap):
                raise InvariantError("hierarchy maps must be StructureMap instances")
            if smap.stage != i:
                raise InvariantError(f"map {i} is tagged stage {smap.stage}")
            if smap.labels.shape != shape:
                raise InvariantError("hierarchy maps must share one grid shape")
        hw = shape[0] * shape[1]
        if hw != 1 << (len(maps) - 1):
            raise InvariantError(f"{hw} locations need {hw.bit_length()} maps, got {len(maps)}")
        for i in range(len(maps) - 1):
            if not np.array_equal(maps[i + 1].labels >> 1, maps[i].labels):
                raise InvariantError(f"maps {i} and {i + 1} violate the 2j/2j+1 relation")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "merge_trace", tuple(self.merge_trace))

    @property
    def last_stage(self) -> int:
        return len(self.maps) - 1

    @property
    def h(self) -> int:
        return self.maps[0].h

    @property
    def w(self) -> int:
        return self.maps[0].w


def _pairwise_sq_dists(vectors: np.ndarray) -> np.ndarray:
    diff = vectors[:, None, :] - vectors[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _greedy_pairs(vectors: np.ndarray):
    m = len(vectors)
    if m < 2 or m % 2:
        raise InvariantError(f"greedy pairing needs an even count >= 2, got {m}")
    d = _pairwise_sq_dists(vectors)
    # Only i < j entries compete; row-major argmin over the rest implements the
    # lexicographic (i, j) tie-break.
    d[np.tril_indices(m)] = np.inf
    pairs = []
    dists = []
    for _ in range(m // 2):
        flat = int(np.argmin(d))
        i, j = divmod(flat, m)
        pairs.append((i, j))
        dists.append(float(d[i, j]))
        d[i, :] = np.inf
        d[:, i] = np.inf
        d[j, :] = np.inf
        d[:, j] = np.inf
    return pairs, dists


def greedy_pair_step(vectors) -> list:
    """Disjoint index pairs chosen by repeatedly taking the globally nearest
    unpaired pair (squared l2); ties break on the smallest (i, j)."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise InvariantError(f"expected (m, e) vectors, got shape {v.shape}")
    pairs, _ = _greedy_pairs(v)
    return pairs


def build_hierarchy(grid: LatentGrid) -> Hierarchy:
    """Cluster the grid bottom-up, halving the cluster count per stage.

    The merged pair's representative is the mean of all member grid vectors.
    Output labels are canonical (see reindex_hierarchy); the merge trace keeps
    the working-order representatives and pair choices of every step.
    """
    h, w = grid.h, grid.w
    hw = h * w
    last = grid.last_stage
    flat = grid.data.reshape(hw, grid.e).astype(np.float64)

    raw_maps = {last: np.arange(hw, dtype=np.int32)}
    members = [np.array([i]) for i in range(hw)]
    reps = flat.copy()
    trace = []
    for stage in range(last - 1, -1, -1):
        pairs, dists = _greedy_pairs(reps)
        trace.append(MergeRecord(reps.copy(), tuple(pairs), tuple(dists)))
        labels = np.empty(hw, dtype=np.int32)
        new_members = []
        for p, (i, j) in enumerate(pairs):
            merged = np.concatenate([members[i], members[j]])
            labels[merged] = p
            new_members.append(merged)
        members = new_members
        reps = np.stack([flat[mem].mean(axis=0) for mem in members])
        raw_maps[stage] = labels
    maps = [StructureMap(i, raw_maps[i].reshape(h, w)) for i in range(last + 1)]
    return reindex_hierarchy(maps, merge_trace=tuple(trace))


def reindex_hierarchy(h, merge_trace=None) -> Hierarchy:
    """Rewrite labels top-down into canonical 2j/2j+1 form.

    Accepts a Hierarchy or a plain sequence of per-stage StructureMaps whose
    cluster memberships are parent-consistent under any labeling. Of the two
    children of label j, the one containing the smallest row-major location
    gets label 2j. Idempotent on already-canonical hierarchies.
    """
    if isinstance(h, Hierarchy):
        maps = h.maps
        if merge_trace is None:
            merge_trace = h.merge_trace
    else:
        maps = tuple(h)
        if merge_trace is None:
            merge_trace = ()
    if not maps:
        raise InvariantError("nothing to reindex")
    grid_h, grid_w = maps[0].labels.shape
    hw = grid_h * grid_w
    for i, smap in enumerate(maps):
        if smap.stage != i or smap.labels.shape != (grid_h, grid_w):
            raise InvariantError(f"map {i} is tagged stage {smap.stage} or has a foreign shape")

    new_flat = [np.zeros(hw, dtype=np.int32)]
    for i in range(len(maps) - 1):
        parent = new_flat[i]
        child_old = maps[i + 1].labels.ravel()
        child_new = np.empty(hw, dtype=np.int32)
        half_ok = True
        for j in range(1 << i):
            locs = np.flatnonzero(parent == j)
            old = child_old[locs]
            first_label = old[0]
            in_first = old == first_label
            n_first = int(in_first.sum())
            if n_first == locs.size or n_first * 2 != locs.size:
                half_ok = False
                break
            if np.unique(old).size != 2:
                half_ok = False
                break
            child_new[locs[in_first]] = 2 * j
            child_new[locs[~in_first]] = 2 * j + 1
        if not half_ok:
            raise InvariantError(
                f"stage {i + 1} memberships are not parent-consistent with stage {i}"
            )
        new_flat.append(child_new)
    new_maps = tuple(
        StructureMap(i, flat.reshape(grid_h, grid_w)) for i, flat in enumerate(new_flat)
    )
    return Hierarchy(new_maps, merge_trace=merge_trace)
