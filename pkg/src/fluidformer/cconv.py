"""Continuous convolution and antisymmetric continuous convolution over neighbor lists.

A layer evaluates, for every query particle,

    out(x) = sum_i a(x_i - x) * f_i^T G(Lambda(x_i - x))

where ``a`` is a compact radial window, ``Lambda`` maps the radius-R ball onto the
cube [-1, 1]^3 and ``G`` trilinearly interpolates a K^3 grid of (C_in, C_out)
matrices.  Positions are constants within a step, so the geometric part (window
times interpolation weights) is assembled once into a sparse operator of shape
(n_queries * K^3, n_points); a layer is then ``reshape(op @ F) @ kernel``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .diffcore import Module, Tensor
from .neighbors import NeighborList

KERNEL_SIZE = 4


def lambda_map(displacement, radius: float) -> np.ndarray:
    """Radial ball-to-cube stretch: ``u = (v/R) * ||v/R||_2 / ||v/R||_inf``, ``u(0) = 0``.

    Maps the sphere of radius R onto the cube surface; odd in ``v``.
    """
    v = np.asarray(displacement, dtype=np.float64) / radius
    l2 = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    if np.any(l2 > 1.0 + 1e-12):
        raise ValueError("displacement outside the neighborhood radius")
    linf = np.abs(v).max(axis=-1, keepdims=True)
    scale = np.divide(l2, linf, out=np.zeros_like(l2), where=linf > 0)
    return v * scale


def window(displacement, radius: float) -> np.ndarray:
    """``(1 - |d|^2/R^2)^3`` inside the ball, 0 outside."""
    d = np.asarray(displacement, dtype=np.float64)
    r2 = (d * d).sum(axis=-1) / (radius * radius)
    return np.where(r2 <= 1.0, (1.0 - np.minimum(r2, 1.0)) ** 3, 0.0)


def corner_weights(u: np.ndarray, kernel_size: int = KERNEL_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Flat grid cells and trilinear weights of the 8 corners around each cube point.

    Grid nodes sit at ``-1 + 2j/(K-1)`` (corner aligned), so point reflection
    ``u -> -u`` maps node ``j`` to ``K-1-j`` on every axis.
    """
    k = kernel_size
    t = (np.asarray(u, dtype=np.float64) + 1.0) * (0.5 * (k - 1))
    i0 = np.clip(np.floor(t), 0, k - 2).astype(np.int64)
    fr = t - i0
    cells = np.empty(u.shape[:-1] + (8,), dtype=np.int64)
    weights = np.empty(u.shape[:-1] + (8,))
    c = 0
    for dx in (0, 1):
        wx = fr[..., 0] if dx else 1.0 - fr[..., 0]
        for dy in (0, 1):
            wy = fr[..., 1] if dy else 1.0 - fr[..., 1]
            for dz in (0, 1):
                wz = fr[..., 2] if dz else 1.0 - fr[..., 2]
                cells[..., c] = ((i0[..., 0] + dx) * k + (i0[..., 1] + dy)) * k + i0[..., 2] + dz
                weights[..., c] = wx * wy * wz
                c += 1
    return cells, weights


def build_operator(nl: NeighborList, radius: float, n_points: int,
                   kernel_size: int = KERNEL_SIZE, use_window: bool = True,
                   include_query: bool = False) -> sp.csr_matrix:
    """Sparse geometric operator of shape (n_queries * K^3, n_points).

    Entry ``(q*K^3 + cell, j)`` accumulates ``a * w_cell`` over the pairs ``(q, j)``.
    With ``include_query`` the same weights are also added at column ``q`` (the
    query's own features), which requires queries and points to be the same set;
    this realizes the ``(f + f_i)`` term of the antisymmetric convolution.
    """
    k3 = kernel_size ** 3
    nq = nl.n_queries
    if include_query and nq != n_points:
        raise ValueError("include_query needs queries and points to be the same set")
    if nl.n_pairs == 0:
        return sp.csr_matrix((nq * k3, n_points))
    u = lambda_map(nl.displacements, radius)
    a = window(nl.displacements, radius) if use_window else np.ones(nl.n_pairs)
    cells, w = corner_weights(u, kernel_size)
    owner = nl.query_ids()
    rows = (owner[:, None] * k3 + cells).ravel()
    vals = (a[:, None] * w).ravel()
    cols = np.repeat(nl.neighbor_ids, 8)
    if include_query:
        rows = np.concatenate([rows, rows])
        cols = np.concatenate([cols, np.repeat(owner, 8)])
        vals = np.concatenate([vals, vals])
    # coo -> csr sums duplicates in a fixed order, so results are reproducible
    return sp.coo_matrix((vals, (rows, cols)), shape=(nq * k3, n_points)).tocsr()


class CConvLayer(Module):
    """Continuous convolution with an optional dense self path."""

    def __init__(self, c_in: int, c_out: int, radius: float, kernel_size: int = KERNEL_SIZE,
                 self_path: bool = True):
        super().__init__()
        if kernel_size % 2:
            raise ValueError("kernel_size must be even")
        self.c_in, self.c_out = c_in, c_out
        self.radius = radius
        self.kernel_size = kernel_size
        self.self_path = self_path
        k = kernel_size
        self.add_param("kernel", (k, k, k, c_in, c_out), fan_in=k ** 3 * c_in)
        if self_path:
            self.add_param("self_weight", (c_in, c_out), fan_in=c_in)

    def kernel_matrix(self) -> Tensor:
        return dc.reshape(self.kernel, (self.kernel_size ** 3 * self.c_in, self.c_out))

    def __call__(self, neighbor_features, operator, query_features=None) -> Tensor:
        nq = operator.shape[0] // self.kernel_size ** 3
        agg = dc.spmm(operator, neighbor_features)
        out = dc.reshape(agg, (nq, -1)) @ self.kernel_matrix()
        if self.self_path and query_features is not None:
            out = out + dc.as_tensor(query_features) @ self.self_weight
        return out


class ASCCLayer(Module):
    """Antisymmetric continuous convolution.

    Only half of the kernel grid (first axis < K/2) is learnable; the other half
    is its point reflection with inverted sign, so ``g(-u) = -g(u)`` holds after
    interpolation and pairwise contributions cancel over a symmetric neighborhood.
    """

    def __init__(self, c_in: int, c_out: int, radius: float, kernel_size: int = KERNEL_SIZE):
        super().__init__()
        if kernel_size % 2:
            raise ValueError("kernel_size must be even")
        self.c_in, self.c_out = c_in, c_out
        self.radius = radius
        self.kernel_size = kernel_size
        k = kernel_size
        self.add_param("half_kernel", (k // 2, k, k, c_in, c_out), fan_in=k ** 3 * c_in)

    def kernel_matrix(self) -> Tensor:
        k, ci, co = self.kernel_size, self.c_in, self.c_out
        half = dc.reshape(self.half_kernel, (k ** 3 // 2, ci * co))
        # flat index of (K-1-a, K-1-b, K-1-c) is K^3-1-flat(a, b, c): reversed rows
        mirrored = -dc.gather_rows(half, np.arange(k ** 3 // 2)[::-1])
        full = dc.concat([half, mirrored], axis=0)
        return dc.reshape(full, (k ** 3 * ci, co))

    def full_kernel(self) -> np.ndarray:
        k = self.kernel_size
        return self.kernel_matrix().data.reshape(k, k, k, self.c_in, self.c_out)

    def __call__(self, features, operator) -> Tensor:
        """``operator`` must come from ``build_operator(..., include_query=True)``."""
        nq = operator.shape[0] // self.kernel_size ** 3
        agg = dc.spmm(operator, features)
        return dc.reshape(agg, (nq, -1)) @ self.kernel_matrix()


def cconv_forward(layer: CConvLayer, query_positions, neighbor_list: NeighborList,
                  neighbor_features, query_features=None, use_window: bool = True) -> Tensor:
    """Evaluate a CConv layer for the queries of ``neighbor_list``.

    ``query_positions`` only fixes the query count; geometry enters through the
    stored displacements.
    """
    nf = dc.as_tensor(neighbor_features)
    if neighbor_list.n_queries != len(np.asarray(query_positions).reshape(-1, 3)):
        raise ValueError("neighbor list does not match the query positions")
    op = build_operator(neighbor_list, layer.radius, nf.shape[0], layer.kernel_size, use_window)
    return layer(nf, op, query_features)


def ascc_forward(layer: ASCCLayer, query_positions, query_features, neighbor_list: NeighborList,
                 neighbor_features) -> Tensor:
    """Evaluate ``sum_i a (f + f_i)^T g_s(Lambda(x_i - x))`` for every query."""
    qf = dc.as_tensor(query_features)
    nf = dc.as_tensor(neighbor_features)
    if neighbor_list.n_queries != len(np.asarray(query_positions).reshape(-1, 3)):
        raise ValueError("neighbor list does not match the query positions")
    op_n = build_operator(neighbor_list, layer.radius, nf.shape[0], layer.kernel_size)
    op_q = _query_operator(neighbor_list, layer.radius, layer.kernel_size)
    nq = neighbor_list.n_queries
    agg = dc.spmm(op_n, nf) + dc.spmm(op_q, qf)
    return dc.reshape(agg, (nq, -1)) @ layer.kernel_matrix()


def _query_operator(nl: NeighborList, radius: float, kernel_size: int) -> sp.csr_matrix:
    k3 = kernel_size ** 3
    nq = nl.n_queries
    if nl.n_pairs == 0:
        return sp.csr_matrix((nq * k3, nq))
    cells, w = corner_weights(lambda_map(nl.displacements, radius), kernel_size)
    owner = nl.query_ids()
    vals = (window(nl.displacements, radius)[:, None] * w).ravel()
    rows = (owner[:, None] * k3 + cells).ravel()
    return sp.coo_matrix((vals, (rows, np.repeat(owner, 8))), shape=(nq * k3, nq)).tocsr()
