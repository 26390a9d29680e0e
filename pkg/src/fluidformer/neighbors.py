"""Fixed-radius neighbor search on a uniform spatial hash grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NeighborList:
    """Compressed adjacency: neighbors of query ``q`` are ``ids[offsets[q]:offsets[q+1]]``.

    ``displacements[k]`` is ``points[ids[k]] - queries[q]``.
    """

    offsets: np.ndarray
    neighbor_ids: np.ndarray
    displacements: np.ndarray
    distances: np.ndarray

    @property
    def n_queries(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_pairs(self) -> int:
        return len(self.neighbor_ids)

    def query_ids(self) -> np.ndarray:
        """Owner query index of every stored pair."""
        return np.repeat(np.arange(self.n_queries), np.diff(self.offsets))

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors_of(self, q: int) -> np.ndarray:
        return self.neighbor_ids[self.offsets[q]:self.offsets[q + 1]]

    def take(self, mask: np.ndarray) -> "NeighborList":
        owners = self.query_ids()[mask]
        offsets = np.zeros(self.n_queries + 1, dtype=np.int64)
        np.cumsum(np.bincount(owners, minlength=self.n_queries), out=offsets[1:])
        return NeighborList(offsets, self.neighbor_ids[mask], self.displacements[mask],
                            self.distances[mask])


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("non-finite point coordinate")
    return pts


class SpatialHash:
    """Points bucketed into cubic cells of edge ``cell_size``.

    Cells are linearized over the bounding box of the points and the points are stored
    sorted by cell key, so every cell is a contiguous slice found by binary search.
    """

    def __init__(self, points, cell_size: float):
        if not cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {cell_size}")
        self.points = _check_points(points)
        self.cell_size = float(cell_size)
        n = len(self.points)
        if n == 0:
            self.origin = np.zeros(3, dtype=np.int64)
            self.dims = np.ones(3, dtype=np.int64)
            self.order = np.zeros(0, dtype=np.int64)
            self.sorted_keys = np.zeros(0, dtype=np.int64)
            return
        cells = np.floor(self.points / self.cell_size).astype(np.int64)
        self.origin = cells.min(axis=0)
        self.dims = cells.max(axis=0) - self.origin + 1
        keys = self._key(cells - self.origin)
        # stable sort keeps ascending point ids inside each cell
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]

    def __len__(self) -> int:
        return len(self.points)

    def _key(self, rel: np.ndarray) -> np.ndarray:
        return (rel[..., 0] * self.dims[1] + rel[..., 1]) * self.dims[2] + rel[..., 2]

    def candidates(self, queries: np.ndarray, reach: int) -> tuple[np.ndarray, np.ndarray]:
        """All (query, point) pairs whose cells lie within ``reach`` cells per axis."""
        if len(self.points) == 0 or len(queries) == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        qcell = np.floor(queries / self.cell_size).astype(np.int64) - self.origin
        r = np.arange(-reach, reach + 1)
        stencil = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        cells = qcell[:, None, :] + stencil[None, :, :]          # (Q, S, 3)
        inside = ((cells >= 0) & (cells < self.dims)).all(axis=-1)
        keys = np.where(inside, self._key(np.clip(cells, 0, self.dims - 1)), -1)
        start = np.searchsorted(self.sorted_keys, keys, side="left")
        stop = np.searchsorted(self.sorted_keys, keys, side="right")
        count = np.where(inside, stop - start, 0).ravel()
        total = int(count.sum())
        qidx = np.repeat(np.repeat(np.arange(len(queries)), len(stencil)), count)
        # position of each candidate inside its cell run
        run_start = np.repeat(start.ravel(), count)
        within = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
        pidx = self.order[run_start + within]
        return qidx, pidx


def build_index(points, cell_size: float) -> SpatialHash:
    return SpatialHash(points, cell_size)


def query_radius(index: SpatialHash, queries, radius: float,
                 exclude_self: bool = False) -> NeighborList:
    """Closed-ball neighbors (``dist <= radius``) of every query, ascending by point id.

    With ``exclude_self`` the queries are the indexed points themselves and pair
    ``(i, i)`` is dropped; coincident but distinct particles are still neighbors.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    queries = _check_points(queries)
    reach = int(np.ceil(radius / index.cell_size))
    qidx, pidx = index.candidates(queries, reach)
    disp = index.points[pidx] - queries[qidx]
    dist = np.sqrt(np.einsum("ij,ij->i", disp, disp))
    keep = dist <= radius
    if exclude_self:
        keep &= qidx != pidx
    qidx, pidx, disp, dist = qidx[keep], pidx[keep], disp[keep], dist[keep]
    order = np.lexsort((pidx, qidx))
    qidx, pidx, disp, dist = qidx[order], pidx[order], disp[order], dist[order]
    offsets = np.zeros(len(queries) + 1, dtype=np.int64)
    np.cumsum(np.bincount(qidx, minlength=len(queries)), out=offsets[1:])
    return NeighborList(offsets, pidx.astype(np.int64), disp, dist)


def radius_neighbors(points, queries, radius: float, exclude_self: bool = False) -> NeighborList:
    """Build an index with ``cell_size = radius`` and query it."""
    return query_radius(build_index(points, radius), queries, radius, exclude_self)


def brute_force_neighbors(points, queries, radius: float,
                          exclude_self: bool = False) -> NeighborList:
    """O(N*M) reference search with the same conventions as :func:`query_radius`."""
    points = _check_points(points)
    queries = _check_points(queries)
    offsets = [0]
    ids, disps, dists = [], [], []
    for q in range(len(queries)):
        d = points - queries[q]
        r = np.sqrt((d * d).sum(axis=1))
        sel = np.nonzero(r <= radius)[0]
        if exclude_self:
            sel = sel[sel != q]
        ids.append(sel)
        disps.append(d[sel])
        dists.append(r[sel])
        offsets.append(offsets[-1] + len(sel))
    cat = (lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape))
    return NeighborList(np.array(offsets, dtype=np.int64),
                        cat(ids, (0,)).astype(np.int64),
                        cat(disps, (0, 3)).reshape(-1, 3), cat(dists, (0,)))


def count_fluid_neighbors(system, radius: float | None = None) -> np.ndarray:
    """Fluid-fluid neighbor counts (self excluded) at ``radius``.

    ``system`` is a ParticleSystem or an (N, 3) position array; the radius is
    required for plain arrays.
    """
    positions = getattr(system, "fluid_positions", system)
    if radius is None:
        raise ValueError("radius is required")
    nl = radius_neighbors(positions, positions, radius, exclude_self=True)
    return nl.counts()
