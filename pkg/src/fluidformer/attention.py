"""3D rotary position encoding and global multi-head self-attention over particles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Tensor
from .diffcore.tensor import _emit


class RopeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RopeConfig:
    """``head_dim`` channels split into x/y/z thirds, each an independent 1-D RoPE."""

    head_dim: int
    base: float = 10000.0
    position_scale: float = 1.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 6:
            raise RopeConfigError(f"head_dim must be a positive multiple of 6, got {self.head_dim}")

    @property
    def axis_dim(self) -> int:
        return self.head_dim // 3


def rope_angles(k, d_axis: int, base: float = 10000.0):
    """Frequency ``base ** (-2k / d_axis)`` of rotation pair ``k``."""
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k >= d_axis // 2):
        raise ValueError(f"pair index out of range for d_axis={d_axis}")
    return base ** (-2.0 * k / d_axis)


def rope_phases(positions, cfg: RopeConfig) -> np.ndarray:
    """Rotation angle of every channel, shape (N, head_dim); both channels of a pair share it."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3) * cfg.position_scale
    da = cfg.axis_dim
    theta = rope_angles(np.arange(da // 2), da, cfg.base)
    per_axis = np.repeat(theta, 2)                                 # (da,)
    return np.concatenate([pos[:, a:a + 1] * per_axis for a in range(3)], axis=1)


def _pair_swap(d: int) -> np.ndarray:
    """Matrix P with ``(x @ P)[2k] = -x[2k+1]`` and ``(x @ P)[2k+1] = x[2k]``."""
    p = np.zeros((d, d))
    for k in range(d // 2):
        p[2 * k + 1, 2 * k] = -1.0
        p[2 * k, 2 * k + 1] = 1.0
    return p


def rope_matrix(position, cfg: RopeConfig) -> np.ndarray:
    """Block-diagonal rotation R_x with ``apply_rope(v, x) == R_x @ v``."""
    phase = rope_phases(np.asarray(position).reshape(1, 3), cfg)[0]
    d = cfg.head_dim
    r = np.zeros((d, d))
    for k in range(d // 2):
        c, s = np.cos(phase[2 * k]), np.sin(phase[2 * k])
        r[2 * k:2 * k + 2, 2 * k:2 * k + 2] = [[c, -s], [s, c]]
    return r


def apply_rope(vectors, positions, cfg: RopeConfig):
    """Rotate consecutive channel pairs by (scaled coordinate) * theta_k.

    Accepts a Tensor (differentiable, positions constant) or a plain array.
    """
    d = cfg.head_dim
    shape = vectors.shape
    if shape[-1] != d:
        raise RopeConfigError(f"vectors have {shape[-1]} channels, config expects {d}")
    phase = rope_phases(positions, cfg)
    cos, sin = np.cos(phase), np.sin(phase)
    swap = _pair_swap(d)
    if isinstance(vectors, Tensor):
        return vectors * cos + (vectors @ swap) * sin
    v = np.asarray(vectors, dtype=np.float64)
    return v * cos + (v @ swap) * sin


# --------------------------------------------------------------------------- attention kernels

def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def streaming_attention_forward(q, k, v, tile: int, scale: float):
    """Softmax(q k^T * scale) v over key tiles with a running max and normalizer.

    Never forms more than an (N, tile) score block.  Returns the output and the
    per-row log-sum-exp needed by the backward pass.
    """
    if tile < 1:
        raise ValueError("tile must be >= 1")
    n = q.shape[0]
    if n == 0 or k.shape[0] == 0:
        return np.zeros((n, v.shape[1])), np.zeros(n)
    m = np.full(n, -np.inf)
    l = np.zeros(n)
    acc = np.zeros((n, v.shape[1]))
    for start in range(0, k.shape[0], tile):
        kj, vj = k[start:start + tile], v[start:start + tile]
        s = (q @ kj.T) * scale
        m_new = np.maximum(m, s.max(axis=1))
        p = np.exp(s - m_new[:, None])
        alpha = np.exp(m - m_new)
        l = l * alpha + p.sum(axis=1)
        acc = acc * alpha[:, None] + p @ vj
        m = m_new
    out = acc / l[:, None]
    return out, m + np.log(l)


def streaming_attention_backward(q, k, v, out, lse, g, tile: int, scale: float):
    """Gradients of the streaming attention, recomputing score tiles from ``lse``."""
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    delta = (g * out).sum(axis=1)
    for start in range(0, k.shape[0], tile):
        sl = slice(start, start + tile)
        kj, vj = k[sl], v[sl]
        p = np.exp((q @ kj.T) * scale - lse[:, None])
        dv[sl] = p.T @ g
        ds = p * (g @ vj.T - delta[:, None])
        dq += (ds @ kj) * scale
        dk[sl] = (ds.T @ q) * scale
    return dq, dk, dv


def streaming_attention(q, k, v, tile: int = 64) -> Tensor:
    """Differentiable exact attention (scale 1/sqrt(d)) evaluated in key tiles."""
    q, k, v = dc.as_tensor(q), dc.as_tensor(k), dc.as_tensor(v)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise dc.ShapeError(f"attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[1])
    out, lse = streaming_attention_forward(q.data, k.data, v.data, tile, scale)
    return _emit("streaming_attention", out, (q, k, v),
                 lambda g: streaming_attention_backward(q.data, k.data, v.data, out, lse, g,
                                                        tile, scale))


def dense_attention(q, k, v) -> Tensor:
    """Attention from tape primitives with the full (N, N) score matrix."""
    q, k, v = dc.as_tensor(q), dc.as_tensor(k), dc.as_tensor(v)
    scores = (q @ k.T) * (1.0 / np.sqrt(q.shape[1]))
    return dc.softmax_lastdim(scores) @ v


def attention_naive(q, k, v, positions, cfg: RopeConfig):
    """RoPE-rotate q and k, then full softmax attention over all particles."""
    qr = apply_rope(q, positions, cfg)
    kr = apply_rope(k, positions, cfg)
    if isinstance(qr, Tensor) or isinstance(v, Tensor):
        return dense_attention(qr, kr, v)
    s = (qr @ kr.T) / np.sqrt(qr.shape[1])
    return _softmax_rows(s) @ np.asarray(v, dtype=np.float64)


def attention_tiled(q, k, v, positions, cfg: RopeConfig, tile: int = 64):
    """Same result as :func:`attention_naive` without materializing the score matrix."""
    qr = apply_rope(q, positions, cfg)
    kr = apply_rope(k, positions, cfg)
    if isinstance(qr, Tensor) or isinstance(v, Tensor):
        return streaming_attention(qr, kr, v, tile)
    out, _ = streaming_attention_forward(qr, kr, np.asarray(v, dtype=np.float64), tile,
                                         1.0 / np.sqrt(qr.shape[1]))
    return out


# --------------------------------------------------------------------------- multi-head layer

class AttentionLayer(Module):
    """Multi-head self-attention with per-head RoPE on queries and keys.

    The per-head projections are stored side by side: head ``m`` uses columns
    ``m*d:(m+1)*d`` of ``w_q``, ``w_k`` and ``w_v``.
    """

    def __init__(self, model_dim: int, heads: int = 4, base: float = 10000.0,
                 position_scale: float = 1.0, tile: int | None = 128):
        super().__init__()
        if model_dim % heads:
            raise ValueError(f"model_dim {model_dim} not divisible by {heads} heads")
        self.model_dim = model_dim
        self.heads = heads
        self.rope = RopeConfig(model_dim // heads, base, position_scale)
        self.tile = tile
        for name in ("w_q", "w_k", "w_v", "w_o"):
            self.add_param(name, (model_dim, model_dim), fan_in=model_dim)


def mha_forward(layer: AttentionLayer, features, positions, tile: int | None = -1) -> Tensor:
    """Concat(head_1..head_h) @ W_O; ``tile=None`` selects the dense path."""
    x = dc.as_tensor(features)
    if x.ndim != 2 or x.shape[1] != layer.model_dim:
        raise dc.ShapeError(f"mha: expected (N, {layer.model_dim}) features, got {x.shape}")
    if len(np.asarray(positions).reshape(-1, 3)) != x.shape[0]:
        raise dc.ShapeError("mha: positions and features disagree on particle count")
    tile = layer.tile if tile == -1 else tile
    q, k, v = x @ layer.w_q, x @ layer.w_k, x @ layer.w_v
    d = layer.rope.head_dim
    heads = []
    for m in range(layer.heads):
        cols = slice(m * d, (m + 1) * d)
        qm = apply_rope(q[:, cols], positions, layer.rope)
        km = apply_rope(k[:, cols], positions, layer.rope)
        vm = v[:, cols]
        if tile is None:
            heads.append(dense_attention(qm, km, vm))
        else:
            heads.append(streaming_attention(qm, km, vm, tile))
    return dc.concat(heads, axis=1) @ layer.w_o
