"""The dual-pipeline network: type-aware embedding, four refinement levels, scaled output."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Linear, Module, Tensor
from .diffcore.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, assign_state
from .fab import BlockConfig, FabBlock, LocalExtractor, ParticleGraph, TypeAwareEmbedding, build_graph
from .geometry import ParticleSystem, assemble_features, boundary_features


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared inside the network; ``stage`` names where."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite values after {stage}")
        self.stage = stage


@dataclass
class NetworkConfig:
    widths: tuple = (24, 48, 48, 24, 24)
    radius: float = 0.1125
    particle_spacing: float = 0.05
    kappa: float = 128.0
    gamma: float = 2.0
    rope_base: float = 10000.0
    heads: int = 4
    kernel_size: int = 4
    tile: int | None = 128
    bn_momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 5:
            raise ValueError("widths needs the embedding width plus four level widths")
        for w in self.widths:
            if w % (6 * self.heads):
                raise ValueError(f"width {w} is not divisible by {6 * self.heads}")

    def block(self) -> BlockConfig:
        return BlockConfig(radius=self.radius, kernel_size=self.kernel_size, heads=self.heads,
                           rope_base=self.rope_base, position_scale=1.0 / self.particle_spacing,
                           gamma=self.gamma, tile=self.tile, bn_momentum=self.bn_momentum)

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class RefinementLevel(Module):
    """CConv path and ASCC path fused by a FAB, plus an optional lagged residual projection."""

    def __init__(self, c_in: int, c_out: int, cfg: BlockConfig, residual_from: int | None):
        super().__init__()
        self.psi_cconv = LocalExtractor(c_in, c_out, cfg, kind="cconv")
        self.psi_ascc = LocalExtractor(c_in, c_out, cfg, kind="ascc")
        self.fab = FabBlock(c_out, cfg)
        self.residual_from = residual_from
        if residual_from is not None and residual_from != c_out:
            self.res_proj = Linear(residual_from, c_out)
        else:
            self.res_proj = None

    def __call__(self, f, residual, graph: ParticleGraph) -> Tensor:
        out = self.fab(self.psi_cconv(f, graph), self.psi_ascc(f, graph), graph)
        if residual is not None:
            out = out + (self.res_proj(residual) if self.res_proj is not None else residual)
        return out


class FluidFormer(Module):
    """Maps the intermediate particle state to per-particle position corrections."""

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config = config or NetworkConfig()
        blk = config.block()
        w = config.widths
        self.embedding = TypeAwareEmbedding(w[0], blk)
        self.levels = []
        for l in range(1, 5):
            lagged = w[l - 2] if l >= 3 else None
            level = RefinementLevel(w[l - 1], w[l], blk, lagged)
            self.add_module(f"level{l}", level)
            self.levels.append(level)
        self.add_param("w_out", (3, w[4]), fan_in=w[4])
        self.initialize(config.seed)

    def graph(self, fluid_positions, boundary_positions) -> ParticleGraph:
        return build_graph(fluid_positions, boundary_positions, self.config.radius,
                           self.config.kernel_size)

    def __call__(self, fluid_features, boundary_feats, graph: ParticleGraph) -> Tensor:
        """Position corrections (N, 3) from fluid features [1, v, nu] and boundary [1, n]."""
        f = self.embedding(fluid_features, boundary_feats, graph)
        _check(f, "embedding")
        history = [f]
        for l, level in enumerate(self.levels, start=1):
            residual = history[l - 2] if l >= 3 else None
            f = level(f, residual, graph)
            _check(f, f"level {l}")
            history.append(f)
        dx = (f @ dc.transpose(self.w_out)) * (1.0 / self.config.kappa)
        _check(dx, "output")
        return dx


def _check(t: Tensor, stage: str) -> None:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(stage)


def network_forward(net: FluidFormer, system: ParticleSystem,
                    graph: ParticleGraph | None = None) -> Tensor:
    """Corrections for a system already advanced to the intermediate state."""
    if graph is None:
        graph = net.graph(system.fluid_positions, system.boundary_positions)
    return net(assemble_features(system), boundary_features(system), graph)


def save_params(net: FluidFormer, path) -> None:
    save_checkpoint(path, net.state(), {"config": net.config.to_json()})


def load_params(net: FluidFormer, path) -> None:
    """Load into an existing network; shape or key mismatches raise before any assignment."""
    tensors, _ = load_checkpoint(path)
    assign_state(net, tensors)


def load_network(path) -> FluidFormer:
    """Rebuild a network from the config stored in the checkpoint, then load it."""
    tensors, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError("checkpoint carries no network config")
    net = FluidFormer(NetworkConfig.from_json(meta["config"]))
    assign_state(net, tensors)
    return net


def params_digest(net: FluidFormer) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in net.state().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
