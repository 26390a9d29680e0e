"""Command-line entry point: simulate, train, eval, gradcheck, make-dataset.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 non-finite state.
Errors are printed to stderr as a single ``error kind=... detail="..."`` line.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_NAN = 0, 1, 2, 3

log = logging.getLogger("fluidformer")


class UsageError(Exception):
    pass


class NonFiniteRun(Exception):
    def __init__(self, message: str, last_index: int):
        super().__init__(message)
        self.last_index = last_index


def _fail(kind: str, detail: str, **extra) -> None:
    fields = " ".join(f"{k}={v}" for k, v in extra.items())
    detail = detail.replace('"', "'").replace("\n", " ")
    print(f'error kind={kind} {fields + " " if fields else ""}detail="{detail}"', file=sys.stderr)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# --------------------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    from .geometry import init_scene, load_scene
    from .network import FluidFormer, NetworkConfig, load_network
    from .sim import RolloutAborted, rollout, write_run_manifest

    scene_path = _require(args.scene, "scene")
    scene = load_scene(scene_path)
    if args.ckpt:
        net = load_network(_require(args.ckpt, "checkpoint"))
    else:
        net = FluidFormer(NetworkConfig(radius=scene.radius,
                                        particle_spacing=scene.particle_spacing, seed=args.seed))
    if args.zero_output:
        net.w_out.data[...] = 0.0
    system = init_scene(scene)
    out = Path(args.out)
    try:
        reports = rollout(net, system, args.frames, scene.gravity, scene.dt, out / "frames")
    except RolloutAborted as exc:
        write_run_manifest(out, scene_path.read_text(), net, args.seed, exc.reports)
        raise NonFiniteRun(str(exc), exc.last_good) from exc
    write_run_manifest(out, scene_path.read_text(), net, args.seed, reports)
    speed = max((r.max_speed for r in reports), default=0.0)
    print(f"simulated {args.frames} steps of {system.n_fluid} fluid particles -> {out / 'frames'}"
          f" (max speed {speed:.4g} m/s)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .network import NetworkConfig
    from .training import TrainConfig, TrainingDiverged, TrajectoryDataset, train

    data = TrajectoryDataset.load(_require(args.dataset, "dataset"))
    first = data.scenes[0].scene
    overrides = {"seed": args.seed,
                 "network": NetworkConfig(radius=first.radius,
                                          particle_spacing=first.particle_spacing,
                                          seed=args.seed)}
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    config = TrainConfig.profile(args.profile, **overrides)
    try:
        result = train(data, config, args.out, resume=args.resume)
    except TrainingDiverged as exc:
        raise NonFiniteRun(str(exc), exc.iteration) from exc
    last = np.mean(result.losses[-10:]) if result.losses else float("nan")
    print(f"trained {config.iterations} iterations on {len(data)} windows; "
          f"final loss (10-iter mean) {last:.6g}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _frames_of(directory: Path):
    from .geometry import read_frame

    files = sorted(directory.glob("frame_*.flf"))
    if not files:
        sub = directory / "frames"
        files = sorted(sub.glob("frame_*.flf")) if sub.is_dir() else []
    if not files:
        raise UsageError(f"no frame files in {directory}")
    return [read_frame(f) for f in files]


def cmd_eval(args) -> int:
    from .metrics import METRICS, evaluate_sequences, write_metrics_csv

    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise UsageError(f"unknown metric(s) {','.join(bad)}; choose from {','.join(METRICS)}")
    pred = _frames_of(_require(args.pred, "prediction directory"))
    true = _frames_of(_require(args.true, "ground-truth directory"))
    n = min(len(pred), len(true))
    if n != max(len(pred), len(true)):
        log.warning("sequences differ in length; comparing the first %d frames", n)
    rows = evaluate_sequences([f.fluid_positions for f in pred[:n]],
                              [f.fluid_positions for f in true[:n]], args.spacing, metrics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / "metrics.csv")
    for m in metrics:
        vals = [r[2] for r in rows if r[0].startswith(m)]
        unit = next(r[3] for r in rows if r[0].startswith(m))
        print(f"{m}: mean {np.mean(vals):.6g} max {np.max(vals):.6g} ({unit})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_gradchecks

    try:
        reports = run_gradchecks(args.filter, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    failed = 0
    for name, rep in reports.items():
        print(f"{name:8s} {rep}")
        failed += not rep.passed
    return EXIT_OK if not failed else EXIT_ERROR


def cmd_make_dataset(args) -> int:
    from .training import make_toy_dataset

    gravity = tuple(float(g) for g in args.gravity.split(","))
    if len(gravity) != 3:
        raise UsageError("--gravity needs three comma-separated numbers")
    data = make_toy_dataset(args.kind, args.seed, args.out, n_scenes=args.scenes,
                            n_frames=args.frames, gravity=gravity)
    n = data.scenes[0].positions.shape[1]
    print(f"wrote {len(data.scenes)} scenes x {args.frames} frames ({n} particles each) to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("usage", message)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fluidformer", description="Desk-scale neural particle fluid simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stdout")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="roll out a scene with a trained (or fresh) model")
    s.add_argument("--scene", required=True)
    s.add_argument("--ckpt", help="checkpoint; omitted means a freshly initialized network")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--profile", choices=("desk", "full"), default="desk")
    s.add_argument("--zero-output", action="store_true",
                   help="zero the output projection (pure integrator)")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train on a trajectory dataset directory")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--iters", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--profile", choices=("desk", "full"), default="desk")
    t.add_argument("--resume", action="store_true", help="continue from OUT/resume.npz")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compare predicted and ground-truth frame directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--true", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--metrics", default="cd,emd,nse,mde")
    e.add_argument("--spacing", type=float, default=0.05, help="particle spacing for MDE (m)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every block")
    g.add_argument("filter", nargs="?", default="all",
                   help="all, or a comma list of cconv,ascc,mha,fab,ifab,network")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("make-dataset", help="write a synthetic toy trajectory dataset")
    d.add_argument("--kind", choices=("ballistic", "damped-box"), default="damped-box")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--scenes", type=int, default=3)
    d.add_argument("--frames", type=int, default=120)
    d.add_argument("--gravity", default="0,-9.81,0")
    d.set_defaults(func=cmd_make_dataset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stdout)
    for attr in ("frames", "iters", "scenes"):
        val = getattr(args, attr, None)
        if val is not None and val < 1:
            _fail("usage", f"--{attr} must be >= 1")
            return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _fail("usage", str(exc))
        return EXIT_USAGE
    except NonFiniteRun as exc:
        _fail("nan", str(exc), last=exc.last_index)
        return EXIT_NAN
    except (OSError, ValueError) as exc:
        _fail(type(exc).__name__, str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
