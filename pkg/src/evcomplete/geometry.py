"""Neighbour queries over event clouds.

The single-cloud functions (``cuboid_query``, ``ball_query``, ``knn``,
``farthest_point_sample``) follow the index-list contracts used by the tests.
The ``group_*`` / ``batch_*`` variants operate on (B, N, 3) arrays and return
fixed-width padded index tensors plus a validity mask, which is what the
network layers consume.  Both paths must agree exactly.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .events import EventCloud


@dataclass(frozen=True)
class CuboidSpec:
    r: float
    t_scale: float = 1.0
    max_k: int = 16

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"r must be positive, got {self.r}")
        if not self.t_scale > 0:
            raise ValueError(f"t_scale must be positive, got {self.t_scale}")
        if self.max_k < 1:
            raise ValueError(f"max_k must be >= 1, got {self.max_k}")

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([self.r, self.r, self.r * self.t_scale])


def _xyz(cloud) -> np.ndarray:
    if isinstance(cloud, EventCloud):
        return cloud.coords
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an N x 3 point array, got {pts.shape}")
    return pts


def cuboid_query(cloud, center, spec: CuboidSpec) -> np.ndarray:
    """Indices inside the axis-aligned box of half extents (r, r, r*t_scale).

    Matches come back in ascending index order, truncated to ``spec.max_k``.
    When nothing matches, the single nearest point under the box-scaled
    metric is returned instead.
    """
    pts = _xyz(cloud)
    c = np.asarray(center, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("cannot query an empty cloud")
    ext = spec.half_extents
    rel = np.abs(pts - c)
    hits = np.flatnonzero((rel <= ext).all(axis=1))
    if len(hits):
        return hits[:spec.max_k]
    return np.array([np.argmin((((pts - c) / ext) ** 2).sum(axis=1))])


def ball_query(cloud, center, radius: float, max_k: int) -> np.ndarray:
    """Closed-ball analogue of ``cuboid_query`` (fallback: Euclidean nearest)."""
    pts = _xyz(cloud)
    c = np.asarray(center, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("cannot query an empty cloud")
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    d2 = ((pts - c) ** 2).sum(axis=1)
    hits = np.flatnonzero(d2 <= radius * radius)
    if len(hits):
        return hits[:max_k]
    return np.array([np.argmin(d2)])


def farthest_point_sample(cloud, m: int, start: int = 0) -> np.ndarray:
    pts = _xyz(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"cannot pick {m} of {n} points")
    out = np.empty(m, dtype=np.int64)
    out[0] = start
    mind = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, m):
        # argmax returns the lowest index among ties
        j = int(np.argmax(mind))
        out[i] = j
        np.minimum(mind, ((pts - pts[j]) ** 2).sum(axis=1), out=mind)
    return out


def knn(cloud, query, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` nearest indices and their distances, ties by lowest index."""
    pts = _xyz(cloud)
    if not 1 <= k <= len(pts):
        raise ValueError(f"k={k} outside 1..{len(pts)}")
    d = np.sqrt(((pts - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    idx = np.argsort(d, kind="stable")[:k]
    return idx, d[idx]


def centroid_nearest(cloud) -> int:
    pts = _xyz(cloud)
    return int(np.argmin(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)))


class GridIndex:
    """Uniform hash grid for box queries over large clouds.

    Cell sizes equal the query half extents, so a box query only has to visit
    the 3x3x3 block of cells around the center.
    """

    def __init__(self, cloud, half_extents):
        self.points = _xyz(cloud)
        self.ext = np.asarray(half_extents, dtype=np.float64)
        self.cells = defaultdict(list)
        keys = np.floor(self.points / self.ext).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            self.cells[key].append(i)

    def query_box(self, center) -> np.ndarray:
        c = np.asarray(center, dtype=np.float64)
        lo = np.floor((c - self.ext) / self.ext).astype(np.int64)
        hi = np.floor((c + self.ext) / self.ext).astype(np.int64)
        cand = []
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    cand.extend(self.cells.get((i, j, k), ()))
        if not cand:
            return np.empty(0, dtype=np.int64)
        cand = np.array(sorted(cand))
        inside = (np.abs(self.points[cand] - c) <= self.ext).all(axis=1)
        return cand[inside]


# batched, padded variants -------------------------------------------------


def _pack_hits(inside: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``k`` True positions along the last axis, padded with index 0."""
    pos = np.cumsum(inside, axis=-1) - 1
    keep = inside & (pos < k)
    lead = np.nonzero(keep)
    idx = np.zeros(inside.shape[:-1] + (k,), dtype=np.int64)
    mask = np.zeros(inside.shape[:-1] + (k,), dtype=bool)
    slot = lead[:-1] + (pos[keep],)
    idx[slot] = lead[-1]
    mask[slot] = True
    return idx, mask


def group_cuboid(points: np.ndarray, centers: np.ndarray, spec: CuboidSpec):
    """Batched ``cuboid_query``: (B,N,3) x (B,M,3) -> idx, mask of shape (B,M,K)."""
    ext = spec.half_extents
    inside = None
    for a in range(3):
        near = np.abs(centers[:, :, None, a] - points[:, None, :, a]) <= ext[a]
        inside = near if inside is None else inside & near
    idx, mask = _pack_hits(inside, spec.max_k)
    empty = ~mask[..., 0]
    if empty.any():
        bi, mi = np.nonzero(empty)
        d = (((centers[bi, mi][:, None, :] - points[bi]) / ext) ** 2).sum(axis=-1)
        idx[bi, mi, 0] = d.argmin(axis=-1)
        mask[..., 0] = True
    return idx, mask


def group_ball(points: np.ndarray, centers: np.ndarray, radius: float, max_k: int):
    rel = centers[:, :, None, :] - points[:, None, :, :]
    d2 = (rel ** 2).sum(axis=-1)
    idx, mask = _pack_hits(d2 <= radius * radius, max_k)
    empty = ~mask[..., 0]
    if empty.any():
        idx[..., 0] = np.where(empty, d2.argmin(axis=-1), idx[..., 0])
        mask[..., 0] = True
    return idx, mask


def batch_fps(points: np.ndarray, m: int, start=None) -> np.ndarray:
    b, n, _ = points.shape
    if not 1 <= m <= n:
        raise ValueError(f"cannot pick {m} of {n} points")
    rows = np.arange(b)
    out = np.empty((b, m), dtype=np.int64)
    out[:, 0] = 0 if start is None else start
    mind = ((points - points[rows, out[:, 0]][:, None]) ** 2).sum(axis=-1)
    for i in range(1, m):
        j = mind.argmax(axis=1)
        out[:, i] = j
        np.minimum(mind, ((points - points[rows, j][:, None]) ** 2).sum(axis=-1), out=mind)
    return out


def batch_centroid_nearest(points: np.ndarray) -> np.ndarray:
    return (((points - points.mean(axis=1, keepdims=True)) ** 2).sum(axis=-1)).argmin(axis=1)


def batch_knn(points: np.ndarray, queries: np.ndarray, k: int):
    """(B,N,3) points, (B,Q,3) queries -> idx (B,Q,k), dist (B,Q,k)."""
    if not 1 <= k <= points.shape[1]:
        raise ValueError(f"k={k} outside 1..{points.shape[1]}")
    d2 = None
    for a in range(3):
        diff = queries[:, :, None, a] - points[:, None, :, a]
        d2 = diff * diff if d2 is None else d2 + diff * diff
    if k > 8:
        idx = np.argsort(d2, axis=-1, kind="stable")[..., :k]
        return idx, np.sqrt(np.take_along_axis(d2, idx, axis=-1))
    # repeated argmin: first occurrence wins ties, as with a stable sort
    idx = np.empty(d2.shape[:-1] + (k,), dtype=np.int64)
    dist = np.empty(d2.shape[:-1] + (k,), dtype=d2.dtype)
    for j in range(k):
        i = d2.argmin(axis=-1)
        idx[..., j] = i
        dist[..., j] = np.take_along_axis(d2, i[..., None], axis=-1)[..., 0]
        np.put_along_axis(d2, i[..., None], np.inf, axis=-1)
    return idx, np.sqrt(dist)


def gather_points(points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """points (B,N,D), idx (B,...) -> (B,...,D)."""
    b = points.shape[0]
    flat = idx.reshape(b, -1)
    out = np.take_along_axis(points, flat[..., None], axis=1)
    return out.reshape(idx.shape + points.shape[-1:])
