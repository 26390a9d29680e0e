import hashlib
import io
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fluidformer.geometry import (
    HEADER, BoundaryParticle, FluidBlock, FluidParticle, Frame, FrameFormatError, ParticleSystem,
    Scene, SceneError, assemble_features, boundary_features, decode_frame, dump_scene, encode_frame,
    frame_filename, init_scene, lattice_block, parse_scene, particle_mass, read_frame, write_frame,
)


def _system(n=3, m=2, seed=0):
    r = np.random.default_rng(seed)
    nrm = r.normal(size=(m, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return ParticleSystem(r.random((n, 3)), r.normal(size=(n, 3)), r.random(n),
                          r.random((m, 3)), nrm, 0.05)


def test_features_zero_state():
    s = ParticleSystem([[0, 0, 0]], [[0, 0, 0]], 0.0, np.zeros((0, 3)), np.zeros((0, 3)), 0.05)
    assert assemble_features(s).tolist() == [[1, 0, 0, 0, 0]]


def test_features_concatenation():
    s = ParticleSystem.from_particles([FluidParticle((0, 0, 0), (1, 2, 3), 0.5)], [], 0.05)
    assert assemble_features(s).tolist() == [[1, 1, 2, 3, 0.5]]


def test_features_empty():
    s = ParticleSystem(np.zeros((0, 3)), np.zeros((0, 3)), 0.0, np.zeros((0, 3)), np.zeros((0, 3)), 0.05)
    assert assemble_features(s).shape == (0, 5)


def test_features_linear_in_velocity(rng):
    s = _system(5)
    v1, v2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    f_sum = assemble_features(s.with_fluid(s.fluid_positions, v1 + v2))
    f_2 = assemble_features(s.with_fluid(s.fluid_positions, v2))
    diff = f_sum - f_2
    np.testing.assert_allclose(diff[:, 1:4], v1, atol=1e-12)
    assert np.all(diff[:, [0, 4]] == 0)


def test_boundary_features():
    s = ParticleSystem.from_particles([], [BoundaryParticle((0, 0, 0), (0, 1, 0))], 0.05)
    assert boundary_features(s).tolist() == [[1, 0, 1, 0]]


def test_validate_rejects_nan_and_bad_normals():
    s = _system()
    s.fluid_velocities[0, 0] = np.nan
    with pytest.raises(ValueError):
        s.validate()
    s = _system()
    s.boundary_normals[0] *= 2
    with pytest.raises(ValueError):
        s.validate()


def test_mass_gives_unit_density():
    assert particle_mass(0.05) == pytest.approx(125.0)   # 5 cm cube of water


# --------------------------------------------------------------------------- frames

def test_empty_frame_is_header_only():
    f = Frame(0, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    data = encode_frame(f)
    assert len(data) == 24 == HEADER.size
    assert decode_frame(data) == f


def test_single_particle_roundtrip():
    f = Frame(7, [[0, 0, 0]], [[0, 0, 0]], np.zeros((0, 3)), np.zeros((0, 3)))
    assert read_frame(encode_frame(f)) == f


def test_header_layout():
    f = Frame(5, [[1, 2, 3]], [[4, 5, 6]], [[7, 8, 9]], [[0, 0, 1]])
    data = encode_frame(f)
    assert data[:4] == b"FLF1"
    assert HEADER.unpack_from(data) == (b"FLF1", 1, 5, 1, 1, 0)
    assert np.frombuffer(data[24:48], "<f4").tolist() == [1, 2, 3, 4, 5, 6]


def test_large_random_frame_reserializes_identically(tmp_path):
    r = np.random.default_rng(42)
    f = Frame(3, r.normal(size=(1000, 3)), r.normal(size=(1000, 3)),
              r.normal(size=(500, 3)), r.normal(size=(500, 3)))
    p = tmp_path / frame_filename(3)
    write_frame(f, p)
    g = read_frame(p)
    assert g == f
    assert hashlib.sha256(encode_frame(g)).digest() == hashlib.sha256(p.read_bytes()).digest()
    buf = io.BytesIO()
    write_frame(g, buf)
    buf.seek(0)
    assert read_frame(buf) == f


def test_frame_filename():
    assert frame_filename(12) == "frame_000012.flf"


def test_frame_errors_carry_offsets():
    data = bytearray(encode_frame(Frame(0, [[0, 0, 0]], [[0, 0, 0]], np.zeros((0, 3)), np.zeros((0, 3)))))
    with pytest.raises(FrameFormatError) as e:
        decode_frame(bytes(data[:10]))
    assert e.value.offset == 10
    bad = bytearray(data)
    bad[0:4] = b"XXXX"
    with pytest.raises(FrameFormatError) as e:
        decode_frame(bytes(bad))
    assert e.value.offset == 0
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(FrameFormatError) as e:
        decode_frame(bytes(bad))
    assert e.value.offset == 4
    with pytest.raises(FrameFormatError):
        decode_frame(bytes(data[:-4]))
    with pytest.raises(FrameFormatError):
        decode_frame(bytes(data) + b"\0")


finite = st.floats(-1e6, 1e6, width=32)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 20), st.just(6)), elements=finite),
       arrays(np.float32, st.tuples(st.integers(0, 20), st.just(6)), elements=finite),
       st.integers(0, 2**32 - 1))
def test_frame_roundtrip_property(fluid, bound, step):
    f = Frame(step, fluid[:, :3], fluid[:, 3:], bound[:, :3], bound[:, 3:])
    g = decode_frame(encode_frame(f))
    assert g == f
    assert encode_frame(g) == encode_frame(f)


def test_frame_roundtrip_keeps_special_bits():
    vals = np.array([[np.nan, -0.0, np.inf]], dtype=np.float32)
    f = Frame(0, vals, vals, np.zeros((0, 3)), np.zeros((0, 3)))
    assert decode_frame(encode_frame(f)).fluid_positions.tobytes() == vals.tobytes()


# --------------------------------------------------------------------------- scenes

SCENE = """
[scene]
dt = 0.01
gravity = 0 0 -9.81
radius = 0.5
particle_spacing = 0.5

[boundary]
points = 0 0 -1 0 0 1; 1 0 -1 0 0 1

[block a]
min = 0 0 0
max = 1 1 1
velocity = 0 -1 0
"""


def test_unit_box_lattice():
    pts = lattice_block((0, 0, 0), (1, 1, 1), 0.5)
    assert len(pts) == 8
    assert sorted(map(tuple, pts)) == sorted((x, y, z) for x in (0.25, 0.75)
                                             for y in (0.25, 0.75) for z in (0.25, 0.75))


def test_init_scene_from_text():
    scene = parse_scene(SCENE)
    s = init_scene(scene)
    assert s.n_fluid == 8 and s.n_boundary == 2
    assert np.all(s.fluid_velocities == [0, -1, 0])
    assert scene.dt == 0.01 and scene.gravity == (0, 0, -9.81)


def test_empty_block_list():
    s = init_scene(Scene(blocks=[]))
    assert s.n_fluid == 0


def test_scene_dump_roundtrip():
    scene = parse_scene(SCENE)
    again = parse_scene(dump_scene(scene))
    assert dump_scene(again) == dump_scene(scene)
    np.testing.assert_array_equal(again.boundary_points, scene.boundary_points)


def test_scene_validation():
    with pytest.raises(SceneError):
        parse_scene("[scene]\ndt = 0\n")
    with pytest.raises(SceneError):
        parse_scene("[scene]\nradius = 0.01\nparticle_spacing = 0.05\n")
    with pytest.raises(SceneError):
        parse_scene("[other]\n")
    with pytest.raises(SceneError):
        parse_scene("[scene]\ngravity = 1 2\n")


def test_boundary_from_frame_file(tmp_path):
    write_frame(Frame(0, np.zeros((0, 3)), np.zeros((0, 3)), [[0, 0, 0]], [[0, 1, 0]]),
                tmp_path / "walls.flf")
    (tmp_path / "s.ini").write_text("[scene]\n[boundary]\nframe = walls.flf\n")
    from fluidformer.geometry import load_scene
    s = init_scene(load_scene(tmp_path / "s.ini"))
    assert s.n_boundary == 1 and s.boundary_normals.tolist() == [[0, 1, 0]]


def test_box_boundary_normals_point_inward():
    s = init_scene(Scene(boundary_box=(0, 0, 0, 1, 1, 1), boundary_box_spacing=0.25))
    assert np.allclose(np.linalg.norm(s.boundary_normals, axis=1), 1)
    center = np.array([0.5, 0.5, 0.5])
    inward = ((center - s.boundary_positions) * s.boundary_normals).sum(axis=1)
    assert np.all(inward > 0)
    assert len(np.unique(s.boundary_positions, axis=0)) == s.n_boundary


def test_overlap_warns(caplog):
    scene = Scene(blocks=[FluidBlock((0, 0, 0), (0.1, 0.1, 0.1), 0.05)],
                  boundary_points=np.array([[0.025, 0.025, 0.025, 0, 1, 0]]))
    with caplog.at_level(logging.WARNING):
        s = init_scene(scene)
    assert s.n_fluid == 8
    assert any("overlap" in r.message.lower() or "within" in r.message.lower() for r in caplog.records)
