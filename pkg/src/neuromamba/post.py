"""Affinity graph -> instance segmentation.

Affinities are ``(3, D, H, W)`` with channel order ``(z, y, x)``; entry
``aff[c, v]`` weighs the edge between voxel ``v`` and ``v - e_c``.  Entries on
the first slice along ``c`` have no partner and are ignored.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from . import _accel
from ._accel import njit
from .errors import ParameterError, ShapeError

MERGE_STATS = ("mean", "quantile75")


def _check_aff(aff) -> np.ndarray:
    aff = np.asarray(aff, dtype=np.float64)
    if aff.ndim != 4 or aff.shape[0] != 3:
        raise ShapeError(f"affinities must be (3, D, H, W), got {aff.shape}")
    return aff


def affinity_from_labels(seg: np.ndarray) -> np.ndarray:
    """Ground-truth affinities: 1 where both voxels share a nonzero label."""
    seg = np.asarray(seg)
    if seg.ndim != 3:
        raise ShapeError(f"segmentation must be (D, H, W), got {seg.shape}")
    aff = np.zeros((3,) + seg.shape)
    aff[0, 1:] = (seg[1:] == seg[:-1]) & (seg[1:] != 0)
    aff[1, :, 1:] = (seg[:, 1:] == seg[:, :-1]) & (seg[:, 1:] != 0)
    aff[2, :, :, 1:] = (seg[:, :, 1:] == seg[:, :, :-1]) & (seg[:, :, 1:] != 0)
    return aff


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    """Map nonzero labels to ``1..K`` in order of first appearance; 0 stays 0."""
    labels = np.asarray(labels)
    flat = labels.ravel()
    uniq, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    new = np.zeros(uniq.shape[0], dtype=np.int64)
    fg = uniq != 0
    rank = np.argsort(np.argsort(first[fg], kind="stable"), kind="stable")
    new[fg] = rank + 1
    return new[inverse].reshape(labels.shape).astype(np.uint64)


def _edge_arrays(aff: np.ndarray):
    """Flat ``(u, v, weight)`` arrays of every defined edge, ``v = u - stride``."""
    D, H, W = aff.shape[1:]
    idx = np.arange(D * H * W, dtype=np.int64).reshape(D, H, W)
    us, vs, ws = [], [], []
    for c, sl, sl_prev in (
        (0, np.s_[1:, :, :], np.s_[:-1, :, :]),
        (1, np.s_[:, 1:, :], np.s_[:, :-1, :]),
        (2, np.s_[:, :, 1:], np.s_[:, :, :-1]),
    ):
        us.append(idx[sl].ravel())
        vs.append(idx[sl_prev].ravel())
        ws.append(aff[c][sl].ravel())
    return np.concatenate(us), np.concatenate(vs), np.concatenate(ws)


# ---------------------------------------------------------------------------
# seeded watershed kernels


@njit
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit
def _seeds_nb(aff, D, H, W, t_hi):
    n = D * H * W
    parent = np.arange(n)
    seeded = np.zeros(n, dtype=np.bool_)
    strides = (H * W, W, 1)
    for c in range(3):
        s = strides[c]
        for i in range(n):
            coord = (i // (H * W), (i // W) % H, i % W)[c]
            if coord >= 1 and aff[c, i] >= t_hi:
                j = i - s
                seeded[i] = True
                seeded[j] = True
                ri = _find(parent, i)
                rj = _find(parent, j)
                if ri != rj:
                    if ri < rj:
                        parent[rj] = ri
                    else:
                        parent[ri] = rj
    labels = np.zeros(n, dtype=np.int64)
    root_label = np.zeros(n, dtype=np.int64)
    nxt = 0
    for i in range(n):
        if seeded[i]:
            r = _find(parent, i)
            if root_label[r] == 0:
                nxt += 1
                root_label[r] = nxt
            labels[i] = root_label[r]
    return labels


def _seeds_np(aff, D, H, W, t_hi):
    n = D * H * W
    u, v, w = _edge_arrays(aff.reshape(3, D, H, W))
    hi = w >= t_hi
    u, v = u[hi], v[hi]
    graph = sparse.coo_matrix((np.ones(u.shape[0]), (u, v)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    seeded = np.zeros(n, dtype=bool)
    seeded[u] = True
    seeded[v] = True
    labels = np.zeros(n, dtype=np.int64)
    labels[seeded] = comp[seeded] + 1
    return relabel_sequential(labels).astype(np.int64)


@njit
def _flood_nb(aff, D, H, W, t_lo, labels):
    n = D * H * W
    heap = [(0.0, np.int64(0), np.int64(0))]
    heap.pop()
    for i in range(n):
        if labels[i] != 0:
            _push_neighbors_nb(aff, D, H, W, t_lo, labels, i, heap)
    while len(heap) > 0:
        _, target, source = heapq.heappop(heap)
        if labels[target] != 0:
            continue
        labels[target] = labels[source]
        _push_neighbors_nb(aff, D, H, W, t_lo, labels, target, heap)
    return labels


@njit
def _push_neighbors_nb(aff, D, H, W, t_lo, labels, i, heap):
    d = i // (H * W)
    h = (i // W) % H
    w = i % W
    strides = (H * W, W, 1)
    coords = (d, h, w)
    extents = (D, H, W)
    for c in range(3):
        s = strides[c]
        if coords[c] >= 1:
            a = aff[c, i]
            j = i - s
            if a >= t_lo and labels[j] == 0:
                heapq.heappush(heap, (-a, np.int64(j), np.int64(i)))
        if coords[c] + 1 < extents[c]:
            j = i + s
            a = aff[c, j]
            if a >= t_lo and labels[j] == 0:
                heapq.heappush(heap, (-a, np.int64(j), np.int64(i)))


def _neighbors(i, D, H, W):
    d, h, w = i // (H * W), (i // W) % H, i % W
    coords, extents, strides = (d, h, w), (D, H, W), (H * W, W, 1)
    for c in range(3):
        if coords[c] >= 1:
            yield c, i, i - strides[c]
        if coords[c] + 1 < extents[c]:
            yield c, i + strides[c], i + strides[c]


def _flood_py(aff, D, H, W, t_lo, labels):
    heap: List[Tuple[float, int, int]] = []

    def push(i):
        for c, edge_at, j in _neighbors(i, D, H, W):
            a = aff[c, edge_at]
            if a >= t_lo and labels[j] == 0:
                heapq.heappush(heap, (-a, j, i))

    for i in np.flatnonzero(labels):
        push(int(i))
    while heap:
        _, target, source = heapq.heappop(heap)
        if labels[target]:
            continue
        labels[target] = labels[source]
        push(target)
    return labels


def watershed_fragments(aff: np.ndarray, t_hi: float = 0.95, t_lo: float = 0.05) -> np.ndarray:
    """Seeded priority-flood watershed on the affinity graph.

    Seeds are connected components of edges with affinity ``>= t_hi``.  The
    remaining voxels are claimed in descending edge affinity (ties: lower flat
    index of the claimed voxel, then of the claiming voxel) along edges
    ``>= t_lo``.  Voxels never claimed stay background 0.
    """
    if not 0.0 <= t_lo <= t_hi <= 1.0:
        raise ParameterError(f"need 0 <= t_lo <= t_hi <= 1, got t_lo={t_lo}, t_hi={t_hi}")
    aff = _check_aff(aff)
    D, H, W = aff.shape[1:]
    flat = np.ascontiguousarray(aff.reshape(3, -1))
    if _accel.use_jit():
        labels = _seeds_nb(flat, D, H, W, t_hi)
        labels = _flood_nb(flat, D, H, W, t_lo, labels)
    else:
        labels = _seeds_np(flat, D, H, W, t_hi)
        labels = _flood_py(flat, D, H, W, t_lo, labels)
    return labels.reshape(D, H, W).astype(np.uint64)


# ---------------------------------------------------------------------------
# region adjacency graph


class DisjointSet:
    """Union-find over hashable ids; the smaller id becomes the representative."""

    def __init__(self, items=()):
        self.parent: Dict[int, int] = {}
        for x in items:
            self.parent[x] = x

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        keep, drop = (ra, rb) if ra < rb else (rb, ra)
        self.parent[drop] = keep
        return keep

    def __contains__(self, x):
        return x in self.parent


@dataclass
class EdgeStats:
    total: float
    count: int
    values: Optional[np.ndarray] = None

    @property
    def mean(self) -> float:
        return self.total / self.count

    def score(self, stat: str) -> float:
        if stat == "mean":
            return self.mean
        return float(np.quantile(self.values, 0.75))

    def merged(self, other: "EdgeStats") -> "EdgeStats":
        values = None
        if self.values is not None:
            values = np.concatenate([self.values, other.values])
        return EdgeStats(self.total + other.total, self.count + other.count, values)


def _key(a, b):
    return (a, b) if a < b else (b, a)


@dataclass
class RegionGraph:
    """Fragment adjacency with per-edge boundary-affinity statistics."""

    nodes: List[int]
    edges: Dict[Tuple[int, int], EdgeStats]
    adjacency: Dict[int, set] = field(default_factory=dict)
    sets: DisjointSet = field(default_factory=DisjointSet)

    def __post_init__(self):
        for n in self.nodes:
            self.adjacency.setdefault(n, set())
            self.sets.add(n)
        for a, b in self.edges:
            self.adjacency[a].add(b)
            self.adjacency[b].add(a)

    @classmethod
    def from_fragments(cls, frags: np.ndarray, aff: np.ndarray, keep_values: bool = False
                       ) -> "RegionGraph":
        frags = np.asarray(frags).astype(np.int64)
        aff = _check_aff(aff)
        if frags.shape != aff.shape[1:]:
            raise ShapeError(f"fragments {frags.shape} vs affinities {aff.shape[1:]}")
        u, v, w = _edge_arrays(aff)
        flat = frags.ravel()
        lu, lv = flat[u], flat[v]
        cross = (lu != lv) & (lu != 0) & (lv != 0)
        a = np.minimum(lu[cross], lv[cross])
        b = np.maximum(lu[cross], lv[cross])
        w = w[cross]
        pairs, inverse = np.unique(np.stack([a, b], axis=1), axis=0, return_inverse=True)
        inverse = inverse.ravel()
        totals = np.bincount(inverse, weights=w, minlength=pairs.shape[0])
        counts = np.bincount(inverse, minlength=pairs.shape[0])
        values: List[Optional[np.ndarray]] = [None] * pairs.shape[0]
        if keep_values and pairs.shape[0]:
            order = np.argsort(inverse, kind="stable")
            splits = np.cumsum(counts)[:-1]
            values = np.split(w[order], splits)
        edges = {
            (int(p[0]), int(p[1])): EdgeStats(float(t), int(c), val)
            for p, t, c, val in zip(pairs, totals, counts, values)
        }
        nodes = [int(x) for x in np.unique(flat) if x != 0]
        return cls(nodes, edges)

    def merge(self, a: int, b: int, combine=EdgeStats.merged) -> Tuple[int, List[Tuple[int, int]]]:
        """Contract edge ``(a, b)``; returns the surviving node and the touched edge keys."""
        keep = self.sets.union(a, b)
        drop = b if keep == a else a
        self.edges.pop(_key(a, b), None)
        self.adjacency[keep].discard(drop)
        self.adjacency[drop].discard(keep)
        touched = []
        for n in sorted(self.adjacency.pop(drop)):
            stats = self.edges.pop(_key(drop, n))
            self.adjacency[n].discard(drop)
            k = _key(keep, n)
            if k in self.edges:
                self.edges[k] = combine(self.edges[k], stats)
            else:
                self.edges[k] = stats
                self.adjacency[keep].add(n)
                self.adjacency[n].add(keep)
            touched.append(k)
        return keep, touched

    def labels_for(self, frags: np.ndarray) -> np.ndarray:
        frags = np.asarray(frags).astype(np.int64)
        uniq, inverse = np.unique(frags, return_inverse=True)
        mapped = np.array([self.sets.find(int(x)) if x != 0 else 0 for x in uniq], dtype=np.int64)
        return relabel_sequential(mapped[inverse.ravel()].reshape(frags.shape))


def agglomerate_waterz(frags: np.ndarray, aff: np.ndarray, theta: float = 0.5,
                       merge_stat: str = "mean") -> np.ndarray:
    """Greedy hierarchical agglomeration: merge the best-scoring edge while its score >= theta."""
    if not 0.0 <= theta <= 1.0:
        raise ParameterError(f"theta must lie in [0, 1], got {theta}")
    if merge_stat not in MERGE_STATS:
        raise ParameterError(f"merge_stat must be one of {MERGE_STATS}, got {merge_stat!r}")
    rag = RegionGraph.from_fragments(frags, aff, keep_values=merge_stat != "mean")
    version: Dict[Tuple[int, int], int] = {}
    heap = []
    for k, stats in rag.edges.items():
        version[k] = 0
        heap.append((-stats.score(merge_stat), k[0], k[1], 0))
    heapq.heapify(heap)
    while heap:
        neg, a, b, ver = heapq.heappop(heap)
        k = (a, b)
        if k not in rag.edges or version.get(k) != ver:
            continue
        if -neg < theta:
            break
        _, touched = rag.merge(a, b)
        for t in touched:
            version[t] = version.get(t, -1) + 1
            heapq.heappush(heap, (-rag.edges[t].score(merge_stat), t[0], t[1], version[t]))
    return rag.labels_for(frags)


# ---------------------------------------------------------------------------
# multicut by greedy additive edge contraction


def gaec(n_nodes: int, edges: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Greedy additive edge contraction on nodes ``0..n_nodes-1``.

    Contracts the heaviest edge (ties: lexicographically smallest endpoint
    pair) while its weight is positive; parallel edges are summed.  Returns a
    cluster label per node, numbered by first appearance.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if edges.shape[0] != weights.shape[0]:
        raise ShapeError("one weight per edge required")
    if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
        raise ShapeError("edge endpoint out of range")
    if not np.all(np.isfinite(weights)):
        raise ParameterError("multicut weights must be finite")
    adj: Dict[int, Dict[int, float]] = {i: {} for i in range(n_nodes)}
    for (a, b), w in zip(edges.tolist(), weights.tolist()):
        if a == b:
            continue
        adj[a][b] = adj[a].get(b, 0.0) + w
        adj[b][a] = adj[a][b]
    sets = DisjointSet(range(n_nodes))
    version: Dict[Tuple[int, int], int] = {}
    heap = []
    for a in range(n_nodes):
        for b, w in adj[a].items():
            if a < b:
                version[(a, b)] = 0
                heap.append((-w, a, b, 0))
    heapq.heapify(heap)
    while heap:
        neg, a, b, ver = heapq.heappop(heap)
        if version.get((a, b)) != ver or b not in adj.get(a, {}):
            continue
        if -neg <= 0:
            break
        keep = sets.union(a, b)
        drop = b if keep == a else a
        del adj[keep][drop]
        del adj[drop][keep]
        for n, w in sorted(adj.pop(drop).items()):
            del adj[n][drop]
            total = adj[keep].get(n, 0.0) + w
            adj[keep][n] = total
            adj[n][keep] = total
            version.pop(_key(drop, n), None)
        for n, w in adj[keep].items():
            k = _key(keep, n)
            version[k] = version.get(k, -1) + 1
            heapq.heappush(heap, (-w, k[0], k[1], version[k]))
    roots = np.array([sets.find(i) for i in range(n_nodes)], dtype=np.int64)
    return relabel_sequential(roots + 1).astype(np.int64) - 1


def multicut_objective(labels: Sequence[int], edges: np.ndarray, weights: np.ndarray) -> float:
    """Sum of weights of edges whose endpoints share a cluster."""
    labels = np.asarray(labels)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    same = labels[edges[:, 0]] == labels[edges[:, 1]]
    return float(np.asarray(weights, dtype=np.float64)[same].sum())


def logit(p):
    return np.log(p) - np.log1p(-p)


def multicut_weights(mean_aff: np.ndarray, theta: float = 0.5, clip: float = 1e-6) -> np.ndarray:
    """``logit(mean affinity) - logit(theta)`` with both clipped away from 0 and 1."""
    lo, hi = clip, 1.0 - clip
    return logit(np.clip(mean_aff, lo, hi)) - logit(np.clip(theta, lo, hi))


def multicut_gaec(frags: np.ndarray, aff: np.ndarray, theta: float = 0.5) -> np.ndarray:
    if not 0.0 <= theta <= 1.0:
        raise ParameterError(f"theta must lie in [0, 1], got {theta}")
    rag = RegionGraph.from_fragments(frags, aff)
    index = {n: i for i, n in enumerate(rag.nodes)}
    keys = sorted(rag.edges)
    edges = np.array([(index[a], index[b]) for a, b in keys], dtype=np.int64).reshape(-1, 2)
    means = np.array([rag.edges[k].mean for k in keys])
    clusters = gaec(len(rag.nodes), edges, multicut_weights(means, theta))
    lut = {n: int(clusters[i]) + 1 for n, i in index.items()}
    frags = np.asarray(frags).astype(np.int64)
    uniq, inverse = np.unique(frags, return_inverse=True)
    mapped = np.array([lut.get(int(x), 0) for x in uniq], dtype=np.int64)
    return relabel_sequential(mapped[inverse.ravel()].reshape(frags.shape))
