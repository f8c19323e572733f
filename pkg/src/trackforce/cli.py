"""Command-line surface: calibrate, gen-demos, retarget, train, rollout, eval.

Every command is config + seed driven and writes machine-readable outputs
atomically; identical configs and seeds reproduce outputs bytewise.
Exit codes: 0 ok, 2 config error, 3 contract error, 4 degeneracy.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import control, demofile, geometry, handgen, plant, policy, retarget, tactile
from .errors import ConfigError, ContractError, DegeneracyError, DomainError, TrackforceError
from .fileio import atomic_write_text, dump_json
from .rngutil import STREAM_DEMOS, substream

log = logging.getLogger("trackforce")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONTRACT = 3
EXIT_DEGENERACY = 4


def _setup_logging():
    level = os.environ.get("TRACKFORCE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _require_file(path, what) -> str:
    if path is None:
        raise ConfigError(f"missing required {what}")
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_task(name_or_path: str) -> plant.TaskSpec:
    if os.path.exists(name_or_path):
        return plant.load_task_spec(name_or_path)
    if name_or_path in plant.TASK_NAMES:
        return plant.builtin_task(name_or_path)
    raise ConfigError(f"task {name_or_path!r} is neither a builtin nor a file")


def _load_layout(path) -> retarget.KeypointLayout:
    if path is None:
        return retarget.default_layout()
    return retarget.load_layout(_require_file(path, "layout file"))


def _apply_config_file(args: argparse.Namespace, argv) -> None:
    """Fill options from a JSON config file; explicit flags win."""
    if not getattr(args, "config", None):
        return
    path = _require_file(args.config, "config file")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path}: expected a JSON object")
    given = {tok.split("=", 1)[0] for tok in argv if tok.startswith("--")}
    for key, value in data.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"config file {path}: unknown key {key!r}")
        if f"--{key.replace('_', '-')}" not in given:
            setattr(args, attr, value)


# -- commands ----------------------------------------------------------------


def cmd_calibrate(args) -> int:
    samples, newtons = tactile.read_calibration_session(_require_file(args.session, "session file"))
    pairs = [(tactile.aggregate_norm(s), float(f)) for s, f in zip(samples, newtons)]
    curve = tactile.fit_calibration(pairs)
    tactile.save_curve(curve, args.out)

    norms, means, _ = tactile.group_pairs(pairs)
    fitted = np.atleast_1d(tactile.norm_to_newton(curve, norms))
    residuals = np.abs(np.array([tactile.norm_to_newton(curve, n) for n, _ in pairs]) - [f for _, f in pairs])
    report = {
        "kind": "calibration_report",
        "n_pairs": len(pairs),
        "n_knots": int(curve.norms.size),
        "max_residual_newton": float(residuals.max()),
        "pooled_knots": int(np.sum(np.abs(fitted - means) > 1e-9)),
    }
    if args.report:
        atomic_write_text(args.report, dump_json(report))
    print(f"calibrate: {report['n_knots']} knots, max residual {report['max_residual_newton']:.3g} N, "
          f"{report['pooled_knots']} pooled")
    return EXIT_OK


def cmd_gen_demos(args) -> int:
    task = _load_task(args.task)
    layout = _load_layout(args.layout)
    os.makedirs(args.out, exist_ok=True)
    if args.count == 0:
        log.warning("gen-demos: count is 0, writing an empty manifest")
    files, demo_seeds = [], []
    for i in range(args.count):
        demo_seed = int(substream(args.seed, STREAM_DEMOS, i).integers(2**62))
        demo = plant.scripted_expert(task, seed=demo_seed, layout=layout)
        name = f"demo_{i:04d}.txt"
        demofile.write_demo(demo, os.path.join(args.out, name))
        files.append(name)
        demo_seeds.append(demo_seed)
    manifest = {
        "kind": "demo_manifest",
        "task": task.name,
        "seed": args.seed,
        "count": args.count,
        "files": files,
        "demo_seeds": demo_seeds,
    }
    atomic_write_text(os.path.join(args.out, "manifest.json"), dump_json(manifest))
    print(f"gen-demos: wrote {args.count} demos to {args.out}")
    return EXIT_OK


def cmd_retarget(args) -> int:
    header, ts, data = handgen.read_hand_tracks(_require_file(args.hand, "hand-track file"))
    layout = _load_layout(args.layout)

    if header["mode"] == "pixels":
        rig = geometry.load_rig(_require_file(args.rig, "camera rig file"))
        px_a, px_b = data
        frames = []
        for t in range(px_a.shape[0]):
            pts = np.stack(
                [geometry.triangulate(rig.cam_a, px_a[t, j], rig.cam_b, px_b[t, j]) for j in range(px_a.shape[1])]
            )
            frames.append(retarget.HandFrame(keypoints=pts, timestamp=float(ts[t])))
    else:
        frames = [retarget.HandFrame(keypoints=data[t], timestamp=float(ts[t])) for t in range(data.shape[0])]

    if args.forces:
        stream = _read_force_stream(_require_file(args.forces, "force stream"))
        forces, gaps = tactile.resample_to_frames(stream, ts)
        if gaps.any():
            log.warning("retarget: %d frame windows had no force samples", int(gaps.sum()))
    else:
        forces = np.zeros(len(frames))

    states = retarget.retarget_trajectory(frames, forces, plant.RESET_POSE, layout)
    fps = float(header.get("fps", 30.0))
    demo = demofile.Demonstration(
        robot_keypoints=np.stack([s.keypoints for s in states]),
        object_keypoints=np.zeros((len(states), 0, 3)),
        gripper=np.array([float(s.gripper) for s in states]),
        force=np.array([s.force for s in states]),
        timestamps=ts,
        task=args.task or "retargeted",
        seed=args.seed,
        fps=fps,
    )
    demofile.write_demo(demo, args.out)
    print(f"retarget: wrote {demo.length} steps to {args.out}")
    return EXIT_OK


def _read_force_stream(path):
    """Raw glove stream CSV: timestamp plus 15 magnetometer values per row."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 16:
                raise ContractError(f"force stream line {lineno}: expected 16 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ContractError(f"force stream line {lineno}: {exc}") from exc
    if not rows:
        raise ContractError("force stream is empty")
    data = np.asarray(rows)
    baseline = data[0, 1:16].reshape(5, 3)
    return [
        tactile.RawForceSample(timestamp=r[0], magnetometers=r[1:16].reshape(5, 3), baseline=baseline)
        for r in data
    ]


def _load_demo_set(spec: str) -> list:
    if os.path.isdir(spec):
        paths = sorted(glob.glob(os.path.join(spec, "demo_*.txt")))
    else:
        paths = sorted(glob.glob(spec))
    if not paths:
        raise ConfigError(f"no demo files matched {spec!r}")
    return [demofile.read_demo(p) for p in paths]


def cmd_train(args) -> int:
    demos = _load_demo_set(args.demos)
    pcfg = policy.PolicyConfig(
        n_robot=demos[0].n_robot,
        m_object=demos[0].m_object,
        history=args.history,
        horizon=args.horizon,
        width=args.width,
        depth=args.depth,
        heads=args.heads,
        ffn_width=args.ffn_width,
        mask_force=args.mask_force,
    )
    tcfg = policy.TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        beta1=args.beta1,
        beta2=args.beta2,
        seed=args.seed,
    )
    net, losses = policy.train_policy(demos, pcfg, tcfg)
    policy.save_model(net, args.out)
    if args.report:
        atomic_write_text(
            args.report,
            dump_json(
                {
                    "kind": "train_report",
                    "n_demos": len(demos),
                    "steps": tcfg.steps,
                    "seed": tcfg.seed,
                    "mask_force": pcfg.mask_force,
                    "final_loss": losses[-1],
                    "loss_curve": losses,
                }
            ),
        )
    print(f"train: {len(demos)} demos, {tcfg.steps} steps, final loss {losses[-1]:.3e} -> {args.out}")
    return EXIT_OK


def _episode_setup(args):
    task = _load_task(args.task)
    layout = _load_layout(args.layout)
    net = policy.load_model(_require_file(args.model, "model file"))
    controller = control.ControllerConfig(
        k=args.k, epsilon=args.epsilon, derivative_gain=args.derivative_gain
    )
    rcfg = control.RolloutConfig(
        close_threshold=args.close_threshold,
        open_threshold=args.open_threshold,
        max_steps=args.max_steps,
        seed=args.seed,
    )
    return task, layout, net, controller, rcfg


def cmd_rollout(args) -> int:
    from .plant import Plant, sample_object
    from .rngutil import STREAM_EVAL, STREAM_PLANT

    task, layout, net, controller, rcfg = _episode_setup(args)
    obj = sample_object(task, substream(args.seed, STREAM_PLANT))
    world = Plant(
        obj, layout, sensor_noise_sigma=args.sensor_noise, rng=substream(args.seed, STREAM_EVAL)
    )
    record = control.rollout(
        net, world, layout, task,
        controller=controller, config=rcfg,
        binary_gripper=args.binary_gripper, seed=args.seed,
    )
    if args.out:
        atomic_write_text(args.out, dump_json(record.to_dict()))
    print(f"rollout: success={record.success} reason={record.reason!r} "
          f"steps={record.n_steps} peak_force={record.peak_force:.1f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    task, layout, net, controller, rcfg = _episode_setup(args)
    seeds = [args.seed + i for i in range(args.episodes)]
    report = control.evaluate(
        net, task, args.episodes, seeds,
        layout=layout, controller=controller, config=rcfg,
        binary_gripper=args.binary_gripper, sensor_noise_sigma=args.sensor_noise,
    )
    if args.out:
        atomic_write_text(args.out, dump_json(report.to_dict()))
    print(f"eval: {report.success_count}/{len(seeds)} success, "
          f"{report.crush_count} crushed, {report.drop_count} dropped, "
          f"mean peak force {report.mean_peak_force:.1f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trackforce", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit the sensor-norm to Newton curve from a scale session")
    p.add_argument("--session", required=True, help="calibration session CSV")
    p.add_argument("--out", required=True, help="output curve file")
    p.add_argument("--report", help="optional JSON fit report")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gen-demos", help="generate scripted expert demonstrations")
    p.add_argument("--task", required=True, help="builtin task name or task spec file")
    p.add_argument("--count", type=int, default=30)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layout", help="keypoint layout file (default: builtin)")
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("retarget", help="convert hand tracks into a robot demo file")
    p.add_argument("--hand", required=True, help="hand-track file (pixels or 3D)")
    p.add_argument("--rig", help="camera rig file (required for pixel tracks)")
    p.add_argument("--layout", help="keypoint layout file (default: builtin)")
    p.add_argument("--forces", help="raw glove force stream CSV (optional)")
    p.add_argument("--task", default="retargeted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output demo file")
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("train", help="train the chunked policy on demo files")
    p.add_argument("--demos", required=True, help="demo directory or glob")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--report", help="optional JSON training report")
    p.add_argument("--config", help="JSON config file with defaults for these flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--history", type=int, default=2)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-width", type=int, default=128)
    p.add_argument("--mask-force", action="store_true", help="zero the force input token (ablation)")
    p.set_defaults(func=cmd_train)

    for name, helptext in (("rollout", "run one closed-loop episode"), ("eval", "aggregate many rollouts")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--task", required=True)
        p.add_argument("--layout")
        p.add_argument("--config", help="JSON config file with defaults for these flags")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output JSON path")
        p.add_argument("--binary-gripper", action="store_true",
                       help="ablation: full closure instead of force control")
        p.add_argument("--sensor-noise", type=float, default=1.0)
        p.add_argument("--k", type=float, default=0.001)
        p.add_argument("--epsilon", type=float, default=5.0)
        p.add_argument("--derivative-gain", type=float, default=0.0)
        p.add_argument("--close-threshold", type=float, default=0.6)
        p.add_argument("--open-threshold", type=float, default=0.4)
        p.add_argument("--max-steps", type=int, default=240)
        if name == "eval":
            p.add_argument("--episodes", type=int, default=10)
            p.set_defaults(func=cmd_eval)
        else:
            p.set_defaults(func=cmd_rollout)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if hasattr(args, "config"):
            _apply_config_file(args, argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegeneracyError as exc:
        print(f"degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERACY
    except (ContractError, DomainError) as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrackforceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
