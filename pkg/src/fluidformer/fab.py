"""Fluid Attention Block: local (CConv) and global (RoPE attention) extractors fused by a gate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .attention import AttentionLayer, mha_forward
from .cconv import KERNEL_SIZE, ASCCLayer, CConvLayer, build_operator
from .diffcore import BatchStatNorm, Linear, Module, Tensor
from .neighbors import NeighborList, radius_neighbors


@dataclass
class ParticleGraph:
    """Per-step geometry shared by every layer: neighbor lists and sparse conv operators.

    Everything here is a constant of the step; gradients never flow into it.
    """

    positions: np.ndarray
    fluid_fluid: NeighborList
    fluid_boundary: NeighborList
    n_boundary: int
    op_fluid: sp.csr_matrix
    op_ascc: sp.csr_matrix
    op_boundary: sp.csr_matrix

    @property
    def n(self) -> int:
        return len(self.positions)


def build_graph(fluid_positions, boundary_positions, radius: float,
                kernel_size: int = KERNEL_SIZE) -> ParticleGraph:
    fluid_positions = np.asarray(fluid_positions, dtype=np.float64).reshape(-1, 3)
    boundary_positions = np.asarray(boundary_positions, dtype=np.float64).reshape(-1, 3)
    n, m = len(fluid_positions), len(boundary_positions)
    ff = radius_neighbors(fluid_positions, fluid_positions, radius, exclude_self=True)
    fb = radius_neighbors(boundary_positions, fluid_positions, radius)
    return ParticleGraph(
        positions=fluid_positions,
        fluid_fluid=ff,
        fluid_boundary=fb,
        n_boundary=m,
        op_fluid=build_operator(ff, radius, n, kernel_size),
        op_ascc=build_operator(ff, radius, n, kernel_size, include_query=True),
        op_boundary=build_operator(fb, radius, m, kernel_size),
    )


@dataclass
class BlockConfig:
    radius: float
    kernel_size: int = KERNEL_SIZE
    heads: int = 4
    rope_base: float = 10000.0
    position_scale: float = 1.0
    gamma: float = 2.0
    tile: int | None = 128
    bn_momentum: float = 0.9


class LocalExtractor(Module):
    """BN(conv(ReLU(BN(conv(x))))) with CConv or ASCC layers."""

    def __init__(self, c_in: int, c_out: int, cfg: BlockConfig, kind: str = "cconv"):
        super().__init__()
        if kind not in ("cconv", "ascc"):
            raise ValueError(f"unknown local extractor kind {kind!r}")
        self.kind = kind
        self.c_out = c_out
        if kind == "cconv":
            self.conv1 = CConvLayer(c_in, c_out, cfg.radius, cfg.kernel_size)
            self.conv2 = CConvLayer(c_out, c_out, cfg.radius, cfg.kernel_size)
        else:
            self.conv1 = ASCCLayer(c_in, c_out, cfg.radius, cfg.kernel_size)
            self.conv2 = ASCCLayer(c_out, c_out, cfg.radius, cfg.kernel_size)
        self.bn1 = BatchStatNorm(c_out, cfg.bn_momentum)
        self.bn2 = BatchStatNorm(c_out, cfg.bn_momentum)

    def conv(self, layer, x, graph: ParticleGraph) -> Tensor:
        if self.kind == "cconv":
            return layer(x, graph.op_fluid, x)
        return layer(x, graph.op_ascc)

    def __call__(self, x, graph: ParticleGraph) -> Tensor:
        h = self.bn1(self.conv(self.conv1, x, graph))
        h = dc.relu(h)
        return self.bn2(self.conv(self.conv2, h, graph))


class GlobalExtractor(Module):
    """x + P_out(MHA(P_in x)) with RoPE multi-head attention over all fluid particles."""

    def __init__(self, channels: int, cfg: BlockConfig, model_dim: int | None = None):
        super().__init__()
        model_dim = model_dim or channels
        if model_dim % (6 * cfg.heads):
            raise ValueError(f"model_dim {model_dim} must be divisible by {6 * cfg.heads}")
        self.proj_in = Linear(channels, model_dim)
        self.attn = AttentionLayer(model_dim, cfg.heads, cfg.rope_base, cfg.position_scale,
                                   cfg.tile)
        self.proj_out = Linear(model_dim, channels)

    def __call__(self, x, graph: ParticleGraph) -> Tensor:
        h = mha_forward(self.attn, self.proj_in(x), graph.positions)
        return dc.as_tensor(x) + self.proj_out(h)


class FabBlock(Module):
    """gamma * (F_X * g + F_Y * (1 - g)), g = sigmoid(Global_x(Local_x F_X) + Global_y(Local_y F_Y) + b)."""

    def __init__(self, channels: int, cfg: BlockConfig):
        super().__init__()
        self.channels = channels
        self.gamma = cfg.gamma
        self.local_x = LocalExtractor(channels, channels, cfg)
        self.global_x = GlobalExtractor(channels, cfg)
        self.local_y = LocalExtractor(channels, channels, cfg)
        self.global_y = GlobalExtractor(channels, cfg)
        self.add_param("gate_bias", (channels,), init="zeros")

    def gate(self, fx, fy, graph: ParticleGraph) -> Tensor:
        fused = (self.global_x(self.local_x(fx, graph), graph)
                 + self.global_y(self.local_y(fy, graph), graph))
        return dc.sigmoid(fused + self.gate_bias)

    def __call__(self, fx, fy, graph: ParticleGraph) -> Tensor:
        fx, fy = dc.as_tensor(fx), dc.as_tensor(fy)
        if fx.shape != fy.shape:
            raise dc.ShapeError(f"FAB inputs differ in shape: {fx.shape} vs {fy.shape}")
        g = self.gate(fx, fy, graph)
        return (fx * g + fy * (1.0 - g)) * self.gamma


class IterativeFab(Module):
    """Two FAB stages with unshared weights; the boundary features feed both stages."""

    def __init__(self, channels: int, cfg: BlockConfig):
        super().__init__()
        self.stage1 = FabBlock(channels, cfg)
        self.stage2 = FabBlock(channels, cfg)

    def __call__(self, f_fluid, f_bound, graph: ParticleGraph) -> Tensor:
        return self.stage2(self.stage1(f_fluid, f_bound, graph), f_bound, graph)


class TypeAwareEmbedding(Module):
    """CConv over fluid features and over boundary [1, n] features, fused by an i-FAB."""

    FLUID_FEATURES = 5
    BOUNDARY_FEATURES = 4

    def __init__(self, channels: int, cfg: BlockConfig):
        super().__init__()
        self.channels = channels
        self.fluid_conv = CConvLayer(self.FLUID_FEATURES, channels, cfg.radius, cfg.kernel_size)
        self.boundary_conv = CConvLayer(self.BOUNDARY_FEATURES, channels, cfg.radius,
                                        cfg.kernel_size, self_path=False)
        self.ifab = IterativeFab(channels, cfg)

    def embed(self, fluid_features, boundary_features, graph: ParticleGraph):
        """The two CConv embeddings ``(F_fluid, F_bound)`` before fusion."""
        ff = dc.as_tensor(fluid_features)
        f_fluid = self.fluid_conv(ff, graph.op_fluid, ff)
        if graph.n_boundary == 0:
            f_bound = Tensor(np.zeros((graph.n, self.channels)))
        else:
            f_bound = self.boundary_conv(boundary_features, graph.op_boundary)
        return f_fluid, f_bound

    def __call__(self, fluid_features, boundary_features, graph: ParticleGraph) -> Tensor:
        f_fluid, f_bound = self.embed(fluid_features, boundary_features, graph)
        return self.ifab(f_fluid, f_bound, graph)
