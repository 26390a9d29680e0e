"""Particle-system data model, scene files and the binary frame format."""

from __future__ import annotations

import configparser
import io
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

log = logging.getLogger(__name__)

REST_DENSITY = 1.0  # g/cm^3
FRAME_MAGIC = b"FLF1"
FRAME_VERSION = 1
HEADER = struct.Struct("<4sIIIII")  # 24 bytes

PathLike = Union[str, os.PathLike]


class FrameFormatError(ValueError):
    """Malformed frame data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class SceneError(ValueError):
    pass


@dataclass
class FluidParticle:
    position: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    viscosity: float = 0.0


@dataclass
class BoundaryParticle:
    position: tuple[float, float, float]
    normal: tuple[float, float, float]


def _vec3(a, n=None) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"expected {n} rows, got {arr.shape[0]}")
    return arr


@dataclass
class ParticleSystem:
    """Fluid particles (positions, velocities, viscosity) plus static boundary particles.

    Particle identity is positional: row ``i`` is the same particle in every step.
    """

    fluid_positions: np.ndarray
    fluid_velocities: np.ndarray
    viscosity: np.ndarray
    boundary_positions: np.ndarray
    boundary_normals: np.ndarray
    particle_spacing: float
    mass: float = field(default=-1.0)

    def __post_init__(self):
        self.fluid_positions = _vec3(self.fluid_positions)
        n = self.fluid_positions.shape[0]
        self.fluid_velocities = _vec3(self.fluid_velocities, n)
        visc = np.asarray(self.viscosity, dtype=np.float64)
        self.viscosity = np.broadcast_to(visc, (n,)).copy()
        self.boundary_positions = _vec3(self.boundary_positions)
        self.boundary_normals = _vec3(self.boundary_normals, self.boundary_positions.shape[0])
        if self.mass < 0:
            self.mass = particle_mass(self.particle_spacing)

    @property
    def n_fluid(self) -> int:
        return self.fluid_positions.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary_positions.shape[0]

    @classmethod
    def from_particles(cls, fluid, boundary, particle_spacing: float) -> "ParticleSystem":
        fluid = list(fluid)
        boundary = list(boundary)
        return cls(
            fluid_positions=[p.position for p in fluid],
            fluid_velocities=[p.velocity for p in fluid],
            viscosity=[p.viscosity for p in fluid],
            boundary_positions=[b.position for b in boundary],
            boundary_normals=[b.normal for b in boundary],
            particle_spacing=particle_spacing,
        )

    def validate(self) -> None:
        for name in ("fluid_positions", "fluid_velocities", "viscosity",
                     "boundary_positions", "boundary_normals"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains NaN/Inf")
        if self.n_boundary:
            norms = np.linalg.norm(self.boundary_normals, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("boundary normals must have unit length")

    def with_fluid(self, positions, velocities) -> "ParticleSystem":
        return ParticleSystem(positions, velocities, self.viscosity, self.boundary_positions,
                              self.boundary_normals, self.particle_spacing, self.mass)

    def to_frame(self, timestep: int) -> "Frame":
        return Frame(timestep, self.fluid_positions, self.fluid_velocities,
                     self.boundary_positions, self.boundary_normals)


def particle_mass(spacing: float) -> float:
    """Uniform mass in grams giving unit density on a rest lattice (spacing in meters)."""
    return REST_DENSITY * (spacing * 100.0) ** 3


def assemble_features(system: ParticleSystem) -> np.ndarray:
    """Per-particle input features ``[1, vx, vy, vz, viscosity]``."""
    n = system.n_fluid
    out = np.empty((n, 5))
    out[:, 0] = 1.0
    out[:, 1:4] = system.fluid_velocities
    out[:, 4] = system.viscosity
    return out


def boundary_features(system: ParticleSystem) -> np.ndarray:
    """Per boundary particle ``[1, nx, ny, nz]``."""
    out = np.empty((system.n_boundary, 4))
    out[:, 0] = 1.0
    out[:, 1:] = system.boundary_normals
    return out


# --------------------------------------------------------------------------- frames

@dataclass
class Frame:
    timestep: int
    fluid_positions: np.ndarray
    fluid_velocities: np.ndarray
    boundary_positions: np.ndarray
    boundary_normals: np.ndarray

    def __post_init__(self):
        self.fluid_positions = _f32(self.fluid_positions)
        self.fluid_velocities = _f32(self.fluid_velocities)
        self.boundary_positions = _f32(self.boundary_positions)
        self.boundary_normals = _f32(self.boundary_normals)
        if self.fluid_positions.shape != self.fluid_velocities.shape:
            raise ValueError("fluid positions/velocities shape mismatch")
        if self.boundary_positions.shape != self.boundary_normals.shape:
            raise ValueError("boundary positions/normals shape mismatch")

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return self.timestep == other.timestep and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._arrays(), other._arrays())
        )

    def _arrays(self):
        return (self.fluid_positions, self.fluid_velocities,
                self.boundary_positions, self.boundary_normals)

    def to_system(self, particle_spacing: float, viscosity=0.0) -> ParticleSystem:
        return ParticleSystem(self.fluid_positions, self.fluid_velocities, viscosity,
                              self.boundary_positions, self.boundary_normals, particle_spacing)


def _f32(a) -> np.ndarray:
    arr = np.asarray(a, dtype="<f4")
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    return np.ascontiguousarray(arr.reshape(-1, 3))


def encode_frame(frame: Frame) -> bytes:
    n = frame.fluid_positions.shape[0]
    m = frame.boundary_positions.shape[0]
    head = HEADER.pack(FRAME_MAGIC, FRAME_VERSION, frame.timestep, n, m, 0)
    fluid = np.hstack([frame.fluid_positions, frame.fluid_velocities]).astype("<f4")
    bound = np.hstack([frame.boundary_positions, frame.boundary_normals]).astype("<f4")
    return head + fluid.tobytes() + bound.tobytes()


def decode_frame(data: bytes) -> Frame:
    if len(data) < HEADER.size:
        raise FrameFormatError(f"truncated header: {len(data)} of {HEADER.size} bytes", len(data))
    magic, version, timestep, n, m, reserved = HEADER.unpack_from(data, 0)
    if magic != FRAME_MAGIC:
        raise FrameFormatError(f"bad magic {magic!r}", 0)
    if version != FRAME_VERSION:
        raise FrameFormatError(f"unsupported version {version}", 4)
    if reserved != 0:
        raise FrameFormatError(f"reserved field is {reserved}, expected 0", 20)
    expected = HEADER.size + 24 * (n + m)
    if len(data) != expected:
        raise FrameFormatError(
            f"payload length mismatch: expected {expected} bytes for N={n}, M={m}, got {len(data)}",
            min(len(data), expected))
    fluid = np.frombuffer(data, dtype="<f4", count=6 * n, offset=HEADER.size).reshape(n, 6)
    bound = np.frombuffer(data, dtype="<f4", count=6 * m,
                          offset=HEADER.size + 24 * n).reshape(m, 6)
    return Frame(timestep, fluid[:, :3].copy(), fluid[:, 3:].copy(),
                 bound[:, :3].copy(), bound[:, 3:].copy())


def write_frame(frame: Frame, sink: Union[PathLike, BinaryIO]) -> None:
    payload = encode_frame(frame)
    if hasattr(sink, "write"):
        sink.write(payload)
    else:
        Path(sink).write_bytes(payload)


def read_frame(source: Union[PathLike, BinaryIO, bytes]) -> Frame:
    if isinstance(source, (bytes, bytearray)):
        return decode_frame(bytes(source))
    if hasattr(source, "read"):
        return decode_frame(source.read())
    return decode_frame(Path(source).read_bytes())


def frame_filename(timestep: int) -> str:
    return f"frame_{timestep:06d}.flf"


# --------------------------------------------------------------------------- scenes

@dataclass
class FluidBlock:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    spacing: float
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class Scene:
    """Static scene description.

    Scene files are INI documents::

        [scene]
        dt = 0.02
        gravity = 0 -9.81 0
        radius = 0.1125
        particle_spacing = 0.05
        viscosity = 0.0

        [boundary]
        box = 0 0 0 1 1 1        ; floor and four walls, open top, normals inward
        box_spacing = 0.05
        frame = walls.flf        ; boundary particles of a frame file, relative to the scene file
        points = 0 0 0 0 1 0; 1 0 0 0 1 0

        [block main]
        min = 0.1 0.1 0.1
        max = 0.4 0.4 0.4
        spacing = 0.05           ; defaults to particle_spacing
        velocity = 0 -1 0

    Every ``[block ...]`` section adds one axis-aligned fluid box.  All boundary keys
    are optional and their particles are concatenated in the order box, frame, points.
    """

    dt: float = 0.02
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)
    radius: float = 0.1125
    particle_spacing: float = 0.05
    viscosity: float = 0.0
    blocks: list[FluidBlock] = field(default_factory=list)
    boundary_box: tuple | None = None
    boundary_box_spacing: float | None = None
    boundary_frame: str | None = None
    boundary_points: np.ndarray | None = None

    def validate(self) -> None:
        if not self.dt > 0:
            raise SceneError(f"dt must be positive, got {self.dt}")
        if not self.radius > 0:
            raise SceneError(f"radius must be positive, got {self.radius}")
        if self.radius < self.particle_spacing:
            raise SceneError("radius must be at least particle_spacing")
        for b in self.blocks:
            if b.spacing <= 0:
                raise SceneError("block spacing must be positive")


def _floats(text: str, n: int, key: str) -> tuple:
    vals = tuple(float(t) for t in text.replace(",", " ").split())
    if len(vals) != n:
        raise SceneError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def parse_scene(text: str, base_dir: PathLike | None = None) -> Scene:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise SceneError(str(exc)) from exc
    if "scene" not in cp:
        raise SceneError("missing [scene] section")
    s = cp["scene"]
    scene = Scene(
        dt=s.getfloat("dt", 0.02),
        gravity=_floats(s.get("gravity", "0 -9.81 0"), 3, "gravity"),
        radius=s.getfloat("radius", 0.1125),
        particle_spacing=s.getfloat("particle_spacing", 0.05),
        viscosity=s.getfloat("viscosity", 0.0),
    )
    if "boundary" in cp:
        b = cp["boundary"]
        if "box" in b:
            scene.boundary_box = _floats(b["box"], 6, "box")
            scene.boundary_box_spacing = b.getfloat("box_spacing", scene.particle_spacing)
        if "frame" in b:
            path = Path(b["frame"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            scene.boundary_frame = str(path)
        if "points" in b:
            rows = [_floats(r, 6, "points") for r in b["points"].split(";") if r.strip()]
            scene.boundary_points = np.array(rows, dtype=np.float64).reshape(-1, 6)
    for name in cp.sections():
        if not name.startswith("block"):
            continue
        sec = cp[name]
        scene.blocks.append(FluidBlock(
            lo=_floats(sec["min"], 3, "min"),
            hi=_floats(sec["max"], 3, "max"),
            spacing=sec.getfloat("spacing", scene.particle_spacing),
            velocity=_floats(sec.get("velocity", "0 0 0"), 3, "velocity"),
        ))
    scene.validate()
    return scene


def load_scene(path: PathLike) -> Scene:
    path = Path(path)
    return parse_scene(path.read_text(), base_dir=path.parent)


def _fmt(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def dump_scene(scene: Scene) -> str:
    out = io.StringIO()
    out.write("[scene]\n")
    out.write(f"dt = {scene.dt!r}\ngravity = {_fmt(scene.gravity)}\n")
    out.write(f"radius = {scene.radius!r}\nparticle_spacing = {scene.particle_spacing!r}\n")
    out.write(f"viscosity = {scene.viscosity!r}\n")
    lines = []
    if scene.boundary_box is not None:
        lines.append(f"box = {_fmt(scene.boundary_box)}")
        lines.append(f"box_spacing = {scene.boundary_box_spacing or scene.particle_spacing!r}")
    if scene.boundary_frame is not None:
        lines.append(f"frame = {scene.boundary_frame}")
    if scene.boundary_points is not None and len(scene.boundary_points):
        lines.append("points = " + "; ".join(_fmt(r) for r in scene.boundary_points))
    if lines:
        out.write("\n[boundary]\n" + "\n".join(lines) + "\n")
    for i, b in enumerate(scene.blocks):
        out.write(f"\n[block {i}]\nmin = {_fmt(b.lo)}\nmax = {_fmt(b.hi)}\n")
        out.write(f"spacing = {b.spacing!r}\nvelocity = {_fmt(b.velocity)}\n")
    return out.getvalue()


def save_scene(scene: Scene, path: PathLike) -> None:
    Path(path).write_text(dump_scene(scene))


def lattice_block(lo, hi, spacing: float) -> np.ndarray:
    """Cubic lattice filling the box ``[lo, hi]`` with cell centers offset by spacing/2."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    counts = np.floor((hi - lo) / spacing + 1e-9).astype(int)
    if (counts <= 0).any():
        return np.zeros((0, 3))
    axes = [lo[a] + spacing * (0.5 + np.arange(counts[a])) for a in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def box_boundary(lo, hi, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Single-layer floor and four side walls of a box, normals pointing inward."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ticks = [lo[a] + spacing * np.arange(int(round((hi[a] - lo[a]) / spacing)) + 1)
             for a in range(3)]
    pts, nrm = [], []

    def add(xs, ys, zs, normal):
        g = np.meshgrid(xs, ys, zs, indexing="ij")
        p = np.stack([a.ravel() for a in g], axis=1)
        pts.append(p)
        nrm.append(np.tile(normal, (len(p), 1)))

    x, y, z = ticks
    add(x, y[:1], z, (0.0, 1.0, 0.0))
    add(x[:1], y[1:], z, (1.0, 0.0, 0.0))
    add(x[-1:], y[1:], z, (-1.0, 0.0, 0.0))
    add(x[1:-1], y[1:], z[:1], (0.0, 0.0, 1.0))
    add(x[1:-1], y[1:], z[-1:], (0.0, 0.0, -1.0))
    return np.vstack(pts), np.vstack(nrm).astype(np.float64)


def init_scene(scene: Scene) -> ParticleSystem:
    """Sample fluid blocks on a lattice and load the boundary particles."""
    scene.validate()
    pos, vel = [np.zeros((0, 3))], [np.zeros((0, 3))]
    for b in scene.blocks:
        p = lattice_block(b.lo, b.hi, b.spacing)
        pos.append(p)
        vel.append(np.tile(np.asarray(b.velocity, dtype=np.float64), (len(p), 1)))
    bpos, bnrm = [np.zeros((0, 3))], [np.zeros((0, 3))]
    if scene.boundary_box is not None:
        p, nrm = box_boundary(scene.boundary_box[:3], scene.boundary_box[3:],
                              scene.boundary_box_spacing or scene.particle_spacing)
        bpos.append(p)
        bnrm.append(nrm)
    if scene.boundary_frame is not None:
        f = read_frame(scene.boundary_frame)
        bpos.append(f.boundary_positions.astype(np.float64))
        bnrm.append(f.boundary_normals.astype(np.float64))
    if scene.boundary_points is not None:
        bpos.append(scene.boundary_points[:, :3])
        bnrm.append(scene.boundary_points[:, 3:])
    system = ParticleSystem(np.vstack(pos), np.vstack(vel), scene.viscosity,
                            np.vstack(bpos), np.vstack(bnrm), scene.particle_spacing)
    _warn_overlap(system)
    return system


def _warn_overlap(system: ParticleSystem) -> None:
    if not (system.n_fluid and system.n_boundary):
        return
    from scipy.spatial import cKDTree

    d, _ = cKDTree(system.boundary_positions).query(system.fluid_positions)
    close = int(np.count_nonzero(d < 0.5 * system.particle_spacing))
    if close:
        log.warning("%d fluid particles lie within half a spacing of the boundary", close)
