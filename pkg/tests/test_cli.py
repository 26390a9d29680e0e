import csv
import subprocess
import sys

import numpy as np
import pytest

from fluidformer.cli import EXIT_NAN, EXIT_OK, EXIT_USAGE, main
from fluidformer.geometry import read_frame
from fluidformer.network import FluidFormer, NetworkConfig, save_params

STILL_SCENE = """\
[scene]
dt = 0.02
gravity = 0 0 0
radius = 0.1125
particle_spacing = 0.05

[boundary]
box = 0 0 0 0.5 0.5 0.5

[block cube]
min = 0.1 0.1 0.1
max = 0.25 0.25 0.25
"""


@pytest.fixture
def scene(tmp_path):
    p = tmp_path / "still.ini"
    p.write_text(STILL_SCENE)
    return p


def _tree(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*"))


@pytest.mark.parametrize("cmd", ["simulate", "train", "eval", "gradcheck", "make-dataset"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "fluidformer", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout


def test_usage_errors(capsys, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["simulate", "--bogus"])
    assert e.value.code == EXIT_USAGE
    assert "error kind=usage" in capsys.readouterr().err
    assert main(["simulate", "--scene", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["gradcheck", "nonsense"]) == EXIT_USAGE
    assert main(["eval", "--pred", str(tmp_path), "--true", str(tmp_path), "--out", str(tmp_path),
                 "--metrics", "psnr"]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert err.count("error kind=usage") == 3 and all(l.startswith("error ") for l in err.splitlines())


def test_zero_output_without_gravity_is_static(scene, tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", "--scene", str(scene), "--out", str(out), "--frames", "3",
                 "--zero-output"]) == EXIT_OK
    frames = [read_frame(p) for p in sorted((out / "frames").glob("*.flf"))]
    assert [f.timestep for f in frames] == [0, 1, 2, 3]
    assert all(np.array_equal(f.fluid_positions, frames[0].fluid_positions) for f in frames)
    assert _tree(out) == ["frames"] + [f"frames/frame_{i:06d}.flf" for i in range(4)] + \
        ["manifest.json", "timings.csv"]
    rows = list(csv.reader(open(out / "timings.csv")))
    assert rows[0][:2] == ["timestep", "wall_time_s"] and len(rows) == 4


def test_simulate_and_eval_identical(scene, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["simulate", "--scene", str(scene), "--out", str(out), "--frames", "2"]) == EXIT_OK
    ev = tmp_path / "ev"
    assert main(["eval", "--pred", str(out), "--true", str(out / "frames"), "--out", str(ev)]) == EXIT_OK
    rows = list(csv.DictReader(open(ev / "metrics.csv")))
    assert {r["metric"] for r in rows} == {"cd", "emd", "nse", "mde"}
    assert all(float(r["value"]) == 0.0 for r in rows if r["metric"] != "mde")
    assert _tree(ev) == ["metrics.csv"]


def test_nan_checkpoint_exits_3(scene, tmp_path, capsys):
    net = FluidFormer(NetworkConfig())
    net.w_out.data[...] = np.nan
    ckpt = tmp_path / "bad.flck"
    save_params(net, ckpt)
    out = tmp_path / "run"
    code = main(["simulate", "--scene", str(scene), "--ckpt", str(ckpt), "--out", str(out),
                 "--frames", "5"])
    assert code == EXIT_NAN
    err = capsys.readouterr().err.strip()
    assert err.startswith("error kind=nan last=0 ") and "\n" not in err
    assert _tree(out / "frames") == ["frame_000000.flf"]


def test_make_dataset_train_resume(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["make-dataset", "--kind", "ballistic", "--out", str(data), "--scenes", "1",
                 "--frames", "6"]) == EXIT_OK
    assert _tree(data)[:2] == ["scene_000", "scene_000/frame_000000.flf"]
    run = tmp_path / "run"
    assert main(["train", "--dataset", str(data), "--out", str(run), "--iters", "2"]) == EXIT_OK
    assert main(["train", "--dataset", str(data), "--out", str(run), "--iters", "3",
                 "--resume"]) == EXIT_OK
    assert {"model.flck", "resume.npz", "loss.csv", "train_config.json"} <= set(_tree(run))
    rows = list(csv.reader(open(run / "loss.csv")))
    assert [r[0] for r in rows] == ["iter", "0", "1", "2"]
    assert main(["simulate", "--scene", str(data / "scene_000" / "scene.ini"), "--ckpt",
                 str(run / "model.flck"), "--out", str(tmp_path / "sim"), "--frames", "1"]) == EXIT_OK


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "cconv,ascc"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2 and all("PASS" in l for l in out)
