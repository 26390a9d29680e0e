"""Finite-difference gradient checks for every network block on tiny random instances."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffcore as dc
from .attention import AttentionLayer, mha_forward
from .cconv import ASCCLayer, CConvLayer
from .diffcore import GradCheckReport, Tensor, grad_check, set_update_stats
from .fab import BlockConfig, FabBlock, IterativeFab, build_graph
from .geometry import ParticleSystem
from .network import FluidFormer, NetworkConfig
from .training import LossConfig, Window, composite_loss

SPACING = 0.05
RADIUS = 0.1125


def _cluster(rng, n: int) -> np.ndarray:
    """``n`` points packed tightly enough that most pairs are neighbors."""
    return rng.uniform(0.0, 1.5 * SPACING, size=(n, 3))


def _probe(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _module_inputs(module, extra: dict) -> dict:
    inputs = dict(module.parameters())
    inputs.update(extra)
    return inputs


def check_cconv(seed: int = 0, n: int = 8, tol: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    graph = build_graph(_cluster(rng, n), np.zeros((0, 3)), RADIUS)
    layer = CConvLayer(3, 4, RADIUS).initialize(seed)
    feats = Tensor(rng.standard_normal((n, 3)), name="features")
    w = _probe(rng, (n, 4))
    f = lambda: dc.sum(layer(feats, graph.op_fluid, feats) * w)
    return grad_check(f, _module_inputs(layer, {"features": feats}), tol, kink_tol=tol)


def check_ascc(seed: int = 0, n: int = 8, tol: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    graph = build_graph(_cluster(rng, n), np.zeros((0, 3)), RADIUS)
    layer = ASCCLayer(3, 4, RADIUS).initialize(seed)
    feats = Tensor(rng.standard_normal((n, 3)), name="features")
    w = _probe(rng, (n, 4))
    f = lambda: dc.sum(layer(feats, graph.op_ascc) * w)
    return grad_check(f, _module_inputs(layer, {"features": feats}), tol, kink_tol=tol)


def check_mha(seed: int = 0, n: int = 8, tol: float = 1e-4) -> GradCheckReport:
    """RoPE multi-head attention, through both the tiled and the dense kernels."""
    rng = np.random.default_rng(seed)
    pos = _cluster(rng, n)
    layer = AttentionLayer(12, heads=2, position_scale=1.0 / SPACING, tile=3).initialize(seed)
    feats = Tensor(rng.standard_normal((n, 12)), name="features")
    w = _probe(rng, (n, 12))
    f = lambda: dc.sum((mha_forward(layer, feats, pos) + mha_forward(layer, feats, pos, tile=None)) * w)
    return grad_check(f, _module_inputs(layer, {"features": feats}), tol, kink_tol=tol)


def _block_cfg() -> BlockConfig:
    return BlockConfig(radius=RADIUS, heads=1, position_scale=1.0 / SPACING, tile=4)


def check_fab(seed: int = 0, n: int = 8, tol: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    graph = build_graph(_cluster(rng, n), np.zeros((0, 3)), RADIUS)
    block = FabBlock(6, _block_cfg()).initialize(seed)
    set_update_stats(block, False)
    fx = Tensor(rng.standard_normal((n, 6)), name="fx")
    fy = Tensor(rng.standard_normal((n, 6)), name="fy")
    w = _probe(rng, (n, 6))
    f = lambda: dc.sum(block(fx, fy, graph) * w)
    return grad_check(f, _module_inputs(block, {"fx": fx, "fy": fy}), tol, max_entries=6,
                      seed=seed, kink_tol=tol)


def check_ifab(seed: int = 0, n: int = 8, tol: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    graph = build_graph(_cluster(rng, n), np.zeros((0, 3)), RADIUS)
    block = IterativeFab(6, _block_cfg()).initialize(seed)
    set_update_stats(block, False)
    ff = Tensor(rng.standard_normal((n, 6)), name="f_fluid")
    fb = Tensor(rng.standard_normal((n, 6)), name="f_bound")
    w = _probe(rng, (n, 6))
    f = lambda: dc.sum(block(ff, fb, graph) * w)
    return grad_check(f, _module_inputs(block, {"f_fluid": ff, "f_bound": fb}), tol,
                      max_entries=4, seed=seed, kink_tol=tol)


def tiny_window(seed: int = 0, n: int = 6) -> Window:
    """A random window with a few boundary particles and nonzero targets."""
    rng = np.random.default_rng(seed)
    x = _cluster(rng, n) + [0.0, SPACING, 0.0]
    v = rng.normal(0.0, 0.3, size=(n, 3))
    bpos = np.array([[0.0, 0.0, 0.0], [SPACING, 0.0, 0.0], [0.0, 0.0, SPACING]])
    bnrm = np.tile([0.0, 1.0, 0.0], (3, 1))
    system = ParticleSystem(x, v, 0.01, bpos, bnrm, SPACING)
    targets = (x + rng.normal(0, 0.003, (n, 3)), x + rng.normal(0, 0.006, (n, 3)))
    return Window(0, 0, system, targets, np.array([0.0, -9.81, 0.0]), 0.02, RADIUS)


def tiny_network(seed: int = 0) -> FluidFormer:
    return FluidFormer(NetworkConfig(widths=(6, 6, 6, 6, 6), heads=1, tile=4, seed=seed))


def check_network(seed: int = 0, n: int = 6, tol: float = 1e-4) -> GradCheckReport:
    """Full network under the two-step composite loss, geometry frozen at the base point."""
    net = tiny_network(seed)
    set_update_stats(net, False)
    win = tiny_window(seed, n)
    cfg = LossConfig()
    _, graphs = composite_loss(net, win, cfg)
    f = lambda: composite_loss(net, win, cfg, graphs)[0]
    return grad_check(f, dict(net.parameters()), tol, max_entries=2, seed=seed, kink_tol=tol)


SUITES: dict[str, Callable[..., GradCheckReport]] = {
    "cconv": check_cconv,
    "ascc": check_ascc,
    "mha": check_mha,
    "fab": check_fab,
    "ifab": check_ifab,
    "network": check_network,
}


def run_gradchecks(selection: str = "all", seed: int = 0) -> dict[str, GradCheckReport]:
    names = list(SUITES) if selection == "all" else [s.strip() for s in selection.split(",")]
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise ValueError(f"unknown gradcheck suite(s): {', '.join(unknown)}")
    return {name: SUITES[name](seed=seed) for name in names}
