"""Training objective, trajectory datasets, the training loop and toy ground-truth generators."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Tape, Tensor, adam_step, lr_schedule
from .diffcore.optim import LR_BASE, LR_MILESTONES
from .fab import ParticleGraph
from .geometry import (Frame, FluidBlock, ParticleSystem, Scene, boundary_features, frame_filename,
                       init_scene, load_scene, read_frame, save_scene, write_frame)
from .network import FluidFormer, NetworkConfig, NonFiniteError, save_params
from .neighbors import count_fluid_neighbors
from .sim import predict

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- losses

@dataclass
class LossConfig:
    mean_count: float = 40.0
    exponent: float = 0.5
    horizon: int = 2

    def __post_init__(self):
        if not self.mean_count > 0:
            raise ValueError("mean_count must be positive")
        if not 0 < self.exponent <= 2:
            raise ValueError("exponent must lie in (0, 2]")
        if self.horizon != 2:
            raise ValueError("only the two-frame horizon is implemented")


def frame_loss(pred_x, true_x, counts, cfg: LossConfig | None = None) -> Tensor:
    """Mean of ``exp(-c_i / c_mean) * |pred_i - true_i| ** exponent`` over particles."""
    cfg = cfg or LossConfig()
    pred = dc.as_tensor(pred_x)
    true = np.asarray(true_x, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise dc.ShapeError(f"frame_loss: shapes {pred.shape} and {true.shape}")
    if counts.shape != (true.shape[0],):
        raise dc.ShapeError("frame_loss: one neighbor count per particle required")
    n = true.shape[0]
    if n == 0:
        return Tensor(np.zeros(()))
    err = pred - true
    dist = dc.pow(dc.sum(err * err, axis=1), 0.5 * cfg.exponent)
    weights = np.exp(-counts / cfg.mean_count)
    return dc.sum(dist * weights) * (1.0 / n)


# --------------------------------------------------------------------------- datasets

@dataclass
class SceneTrajectory:
    """One recorded scene: static parameters plus its frames in time order."""

    scene: Scene
    positions: np.ndarray       # (T, N, 3)
    velocities: np.ndarray      # (T, N, 3)
    boundary_positions: np.ndarray
    boundary_normals: np.ndarray
    path: Path | None = None

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    def system(self, t: int) -> ParticleSystem:
        return ParticleSystem(self.positions[t], self.velocities[t], self.scene.viscosity,
                              self.boundary_positions, self.boundary_normals,
                              self.scene.particle_spacing)


@dataclass
class Window:
    """Frames t, t+1, t+2 of one scene, the unit of the two-step objective."""

    scene_index: int
    t: int
    system: ParticleSystem
    targets: tuple[np.ndarray, np.ndarray]
    gravity: np.ndarray
    dt: float
    radius: float


@dataclass
class TrajectoryDataset:
    scenes: list[SceneTrajectory]
    windows: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.windows:
            self.windows = [(s, t) for s, tr in enumerate(self.scenes)
                            for t in range(tr.n_frames - 2)]

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def max_speed(self) -> float:
        return max(float(np.linalg.norm(s.velocities, axis=2).max(initial=0.0)) for s in self.scenes)

    def window(self, i: int) -> Window:
        s, t = self.windows[i]
        tr = self.scenes[s]
        return Window(s, t, tr.system(t), (tr.positions[t + 1], tr.positions[t + 2]),
                      np.asarray(tr.scene.gravity, dtype=np.float64), tr.scene.dt, tr.scene.radius)

    @classmethod
    def load(cls, root) -> "TrajectoryDataset":
        """Read ``root/<scene>/scene.ini`` plus its ``frame_*.flf`` files."""
        root = Path(root)
        scenes = []
        for d in sorted(p for p in root.iterdir() if (p / "scene.ini").is_file()):
            files = sorted(d.glob("frame_*.flf"))
            if len(files) < 3:
                raise ValueError(f"{d}: need at least three frames, found {len(files)}")
            frames = [read_frame(f) for f in files]
            steps = [f.timestep for f in frames]
            if steps != list(range(steps[0], steps[0] + len(steps))):
                raise ValueError(f"{d}: frame timesteps are not consecutive")
            scenes.append(SceneTrajectory(
                load_scene(d / "scene.ini"),
                np.stack([f.fluid_positions for f in frames]).astype(np.float64),
                np.stack([f.fluid_velocities for f in frames]).astype(np.float64),
                frames[0].boundary_positions.astype(np.float64),
                frames[0].boundary_normals.astype(np.float64),
                d,
            ))
        if not scenes:
            raise ValueError(f"no scenes found under {root}")
        return cls(scenes)


# --------------------------------------------------------------------------- objective

def _fluid_features(velocity, viscosity) -> Tensor:
    v = dc.as_tensor(velocity)
    n = v.shape[0]
    return dc.concat([Tensor(np.ones((n, 1))), v, Tensor(np.asarray(viscosity).reshape(n, 1))],
                     axis=1)


def unroll_step(net: FluidFormer, x, v, system: ParticleSystem, gravity, dt: float,
                graph: ParticleGraph | None = None):
    """Differentiable step from (x, v); geometry is taken from the current values.

    Returns ``(x_new, v_new, graph)``; pass the graph back in to freeze geometry.
    """
    x_tilde, v_tilde = predict(x, v, gravity, dt)
    if graph is None:
        xt = x_tilde.data if isinstance(x_tilde, Tensor) else x_tilde
        graph = net.graph(xt, system.boundary_positions)
    dx = net(_fluid_features(v_tilde, system.viscosity), boundary_features(system), graph)
    x_new = x_tilde + dx
    v_new = (x_new - x) * (1.0 / dt)
    return x_new, v_new, graph


def composite_loss(net: FluidFormer, window: Window, cfg: LossConfig | None = None,
                   graphs: list | None = None):
    """``L(t+1) + L(t+2)`` with teacher forcing at t and one unrolled step.

    Returns ``(loss, graphs)``.  Neighbor structure is a per-step constant; handing
    ``graphs`` back in reuses it, which finite-difference checks need.
    """
    cfg = cfg or LossConfig()
    graphs = list(graphs) if graphs is not None else [None, None]
    sys0 = window.system
    x1, v1, graphs[0] = unroll_step(net, sys0.fluid_positions, sys0.fluid_velocities, sys0,
                                    window.gravity, window.dt, graphs[0])
    x2, _, graphs[1] = unroll_step(net, x1, v1, sys0, window.gravity, window.dt, graphs[1])
    total = Tensor(np.zeros(()))
    for pred, true in zip((x1, x2), window.targets):
        counts = count_fluid_neighbors(true, window.radius)
        total = total + frame_loss(pred, true, counts, cfg)
    return total, graphs


# --------------------------------------------------------------------------- training loop

class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, detail: str = "non-finite loss"):
        super().__init__(f"{detail} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    lr_base: float = LR_BASE
    milestones: tuple = LR_MILESTONES
    checkpoint_every: int = 100
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        if name == "desk":
            return cls(**overrides)
        if name == "full":
            overrides.setdefault("iterations", 60_000)
            overrides.setdefault("checkpoint_every", 1000)
            return cls(**overrides)
        raise ValueError(f"unknown profile {name!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["network"] = self.network.to_json()
        return d


def window_order(n_windows: int, seed: int, iteration: int) -> int:
    """Window used at ``iteration``: a seeded shuffle per pass over the data.

    Stateless in the iteration number, so resuming does not need RNG state.
    """
    epoch, k = divmod(iteration, n_windows)
    perm = np.random.default_rng([seed, epoch]).permutation(n_windows)
    return int(perm[k])


@dataclass
class TrainResult:
    losses: list[float]
    iterations: int
    checkpoint: Path | None


RESUME_FILE = "resume.npz"
CHECKPOINT_FILE = "model.flck"
LOSS_FILE = "loss.csv"


def _save_resume(path: Path, net: FluidFormer, adam: AdamState, iteration: int) -> None:
    arrays = {f"state:{k}": v for k, v in net.state().items()}
    for k in adam.m:
        arrays[f"m:{k}"] = adam.m[k]
        arrays[f"v:{k}"] = adam.v[k]
    arrays["meta:iteration"] = np.array(iteration)
    arrays["meta:adam_step"] = np.array(adam.step)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def _load_resume(path: Path, net: FluidFormer, adam: AdamState) -> int:
    from .diffcore.checkpoint import assign_state

    with np.load(path) as z:
        state = {k[6:]: z[k] for k in z.files if k.startswith("state:")}
        assign_state(net, state)
        for k in z.files:
            if k.startswith("m:"):
                adam.m[k[2:]] = z[k].copy()
            elif k.startswith("v:"):
                adam.v[k[2:]] = z[k].copy()
        adam.step = int(z["meta:adam_step"])
        return int(z["meta:iteration"])


def train(dataset: TrajectoryDataset, config: TrainConfig, out_dir=None,
          resume: bool = False, net: FluidFormer | None = None) -> TrainResult:
    """Adam on the two-step objective; checkpoints and loss CSV go to ``out_dir``.

    With ``resume`` the run continues from ``out_dir/resume.npz`` (exact float64
    parameters and optimizer moments), so split runs match a single run bitwise.
    """
    if len(dataset) == 0:
        raise ValueError("dataset has no training windows")
    net = net or FluidFormer(config.network)
    net.train()
    adam = AdamState()
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / RESUME_FILE).exists():
            start = _load_resume(out / RESUME_FILE, net, adam)
    params = net.parameters()
    losses = []
    log_rows = []
    ckpt = None

    def flush(iteration):
        nonlocal ckpt, log_rows
        if out is None:
            return
        ckpt = out / CHECKPOINT_FILE
        save_params(net, ckpt)
        _save_resume(out / RESUME_FILE, net, adam, iteration)
        with open(out / LOSS_FILE, "a", newline="") as fh:
            csv.writer(fh).writerows(log_rows)
        log_rows = []

    if out is not None and start == 0:
        with open(out / LOSS_FILE, "w", newline="") as fh:
            csv.writer(fh).writerow(["iter", "lr", "loss"])

    for it in range(start, config.iterations):
        win = dataset.window(window_order(len(dataset), config.seed, it))
        lr = lr_schedule(it, config.lr_base, config.milestones)
        try:
            with Tape() as tape:
                loss, _ = composite_loss(net, win, config.loss)
        except NonFiniteError as exc:
            flush(it)
            raise TrainingDiverged(it, str(exc)) from exc
        value = loss.item()
        if not np.isfinite(value):
            flush(it)
            raise TrainingDiverged(it)
        net.zero_grad()
        tape.backward(loss)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adam_step(params, grads, adam, lr)
        losses.append(value)
        log_rows.append([it, repr(lr), repr(value)])
        if it % 50 == 0:
            log.info("iter %d lr %.3g loss %.6g", it, lr, value)
        if (it + 1) % config.checkpoint_every == 0:
            flush(it + 1)
    flush(config.iterations)
    if out is not None:
        (out / "train_config.json").write_text(json.dumps(config.to_json(), indent=2) + "\n")
    return TrainResult(losses, config.iterations, ckpt)


def moving_average(values, width: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < width:
        return np.array([v.mean()]) if len(v) else v
    return np.convolve(v, np.ones(width) / width, mode="valid")


# --------------------------------------------------------------------------- toy ground truth

TOY_KINDS = ("ballistic", "damped-box")


def _toy_scene(kind: str, rng: np.random.Generator, gravity, spacing: float, dt: float) -> Scene:
    box = (0.0, 0.0, 0.0, 0.8, 0.8, 0.8)
    size = np.array([0.4, 0.25, 0.4]) if kind == "damped-box" else np.array([0.35, 0.2, 0.35])
    lo = np.array([rng.uniform(0.0, 0.8 - size[0]), rng.uniform(0.05, 0.35),
                   rng.uniform(0.0, 0.8 - size[2])])
    lo = np.round(lo / spacing) * spacing
    if kind == "damped-box":
        vel = (rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5), rng.uniform(-1.0, 1.0))
    else:
        vel = (0.0, 0.0, 0.0)
    block = FluidBlock(tuple(lo), tuple(lo + size), spacing, tuple(float(c) for c in vel))
    return Scene(dt=dt, gravity=tuple(float(g) for g in gravity), radius=2.25 * spacing,
                 particle_spacing=spacing, blocks=[block], boundary_box=box,
                 boundary_box_spacing=spacing)


def toy_trajectory(kind: str, system: ParticleSystem, box, gravity, dt: float, n_frames: int):
    """Classical ground truth: exact constant-acceleration kinematics per step, then a box clamp.

    Particles are kept half a spacing inside the box.  On contact the normal
    velocity is removed; ``damped-box`` additionally damps the tangential motion
    on contact and applies a mild global drag.  Stored velocities are backward
    differences ``(x^n - x^(n-1)) / dt``; frame 0 uses the same convention with
    the pre-contact closed form.
    """
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy dataset kind {kind!r}")
    g = np.asarray(gravity, dtype=np.float64)
    half = 0.5 * system.particle_spacing
    lo = np.asarray(box[:3], dtype=np.float64) + half
    hi = np.asarray(box[3:], dtype=np.float64) - half
    hi[1] = np.inf                           # open top
    tangential = 0.8 if kind == "damped-box" else 1.0
    drag = 0.995 if kind == "damped-box" else 1.0
    x = system.fluid_positions.copy()
    v = system.fluid_velocities.copy()       # exact velocity
    positions = [x.copy()]
    velocities = [v - 0.5 * dt * g]
    for _ in range(1, n_frames):
        x_prev = x
        x = x + dt * v + 0.5 * dt * dt * g
        v = (v + dt * g) * drag
        low, high = x < lo, x > hi
        hit = low | high
        if hit.any():
            x = np.clip(x, lo, hi)
            v[hit] = 0.0
            contact = hit.any(axis=1)
            for a in range(3):
                free = contact & ~hit[:, a]
                v[free, a] *= tangential
        positions.append(x.copy())
        velocities.append((x - x_prev) / dt)
    return np.stack(positions), np.stack(velocities)


def make_toy_dataset(kind: str, seed: int, out_dir=None, n_scenes: int = 3, n_frames: int = 120,
                     gravity=(0.0, -9.81, 0.0), spacing: float = 0.05,
                     dt: float = 0.02) -> TrajectoryDataset:
    """Synthetic trajectories, optionally written as ``scene_XXX/{scene.ini,frame_*.flf}``."""
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy dataset kind {kind!r}; choose from {TOY_KINDS}")
    scenes = []
    for s in range(n_scenes):
        rng = np.random.default_rng([seed, s])
        scene = _toy_scene(kind, rng, gravity, spacing, dt)
        system = init_scene(scene)
        pos, vel = toy_trajectory(kind, system, scene.boundary_box, scene.gravity, dt, n_frames)
        path = None
        if out_dir is not None:
            path = Path(out_dir) / f"scene_{s:03d}"
            path.mkdir(parents=True, exist_ok=True)
            save_scene(scene, path / "scene.ini")
            for t in range(n_frames):
                write_frame(Frame(t, pos[t], vel[t], system.boundary_positions,
                                  system.boundary_normals), path / frame_filename(t))
            # keep in-memory data identical to what a reload sees
            pos, vel = _f32_round(pos), _f32_round(vel)
            bpos, bnrm = _f32_round(system.boundary_positions), _f32_round(system.boundary_normals)
        else:
            bpos, bnrm = system.boundary_positions, system.boundary_normals
        scenes.append(SceneTrajectory(scene, pos, vel, bpos, bnrm, path))
    return TrajectoryDataset(scenes)


def _f32_round(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)
