"""Command-line entry point.

Subcommands::

    sginit synth      --config PATH --out DIR [--seed N]   generate a dataset
    sginit run DATASET --config PATH --out DIR             run the pipeline
    sginit eval-traj EST GT [--mode M] [--threshold T]     trajectory metrics
    sginit eval-depth EST_DIR GT_DIR [--cap C]             depth metrics
    sginit ablate-init --config PATH --out DIR             initialization sweep

Exit codes are a stable contract: 0 success, 2 configuration or parse
error, 3 I/O error, 4 solver singularity, 5 empty overlap.  Machine-readable
metric records go to stdout as JSON lines (keys: metric, value, units);
human-readable summaries and diagnostics go to stderr.  The SGINIT_THREADS
environment variable caps internal worker counts.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .dba import optimize
from .errors import (
    ConfigError,
    NoOverlapError,
    ParseError,
    SingularSystemError,
)
from .evaluation import (
    Trajectory,
    associate,
    ate,
    classify_failure,
    depth_metrics,
)
from .geometry import Pose, compose, inverse, se3_exp, se3_log
from .initialization import (
    GEOMETRY_GUIDED,
    InitPolicy,
    PriorBundle,
    build_keyframe_graph,
    initialize_state,
    select_keyframes,
)
from .priors import load_stamped_poses, read_pfm, write_pfm, write_stamped_poses
from .synth import (
    ConstantVelocity,
    ProviderConfig,
    SceneConfig,
    convergence_scene,
    dynamic_scene,
    generate_scene,
    large_motion_scene,
    make_provider,
    run_ablation,
    sequence_from_ground_truth,
    static_scene,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SOLVER = 4
EXIT_NO_OVERLAP = 5

_SCENARIOS = {
    "large_motion": large_motion_scene,
    "static": static_scene,
    "dynamic": dynamic_scene,
    "convergence": convergence_scene,
}


def _emit_metric(metric: str, value, units: str) -> None:
    print(json.dumps({"metric": metric, "value": value, "units": units}))


def _say(message: str) -> None:
    print(message, file=sys.stderr)


def _emit_report(pairs: dict) -> None:
    """Flat key=value summary on the diagnostic stream."""
    for key, value in pairs.items():
        print(f"{key}={value}", file=sys.stderr)


def _scene_from_config(config: ds.RunConfig) -> SceneConfig:
    scenario = config["synth.scenario"]
    if scenario not in _SCENARIOS:
        raise ConfigError(f"unknown synth.scenario {scenario!r}")
    kwargs = {"seed": config["seed"]}
    if config["synth.num_frames"] > 0:
        kwargs["num_frames"] = config["synth.num_frames"]
    return _SCENARIOS[scenario](**kwargs)


def cmd_synth(args) -> int:
    config = ds.load_run_config(args.config)
    if args.seed is not None:
        values = dict(config.values)
        values["seed"] = args.seed
        config = ds.RunConfig(values)
    seq = generate_scene(_scene_from_config(config))
    ds.write_dataset(args.out, seq)
    _say(f"wrote dataset with {seq.num_frames} frames to {args.out}")
    return EXIT_OK


def _complete_trajectory(
    keyframes: list[int],
    kf_world_to_cam: list[Pose],
    num_frames: int,
    relatives: tuple[Pose, ...] | None,
) -> list[Pose]:
    """World-to-camera poses for every frame: keyframes keep the optimized
    pose; in-between frames chain the relative priors from the preceding
    keyframe when available, otherwise interpolate at constant motion."""
    poses: list[Pose | None] = [None] * num_frames
    for kf, pose in zip(keyframes, kf_world_to_cam):
        poses[kf] = pose
    for a, b in zip(keyframes, keyframes[1:]):
        for t in range(a + 1, b):
            if relatives is not None:
                pose = poses[a]
                for step in range(a, t):
                    pose = compose(relatives[step], pose)
                poses[t] = pose
            else:
                delta = compose(poses[b], inverse(poses[a]))
                fraction = (t - a) / (b - a)
                xi = se3_log(delta)
                scaled = type(xi)(xi.rotation * fraction, xi.translation * fraction)
                poses[t] = compose(se3_exp(scaled), poses[a])
    # frames outside the keyframe range (keyframe selection always includes
    # 0 and the last frame, so this is defensive)
    for t in range(num_frames):
        if poses[t] is None:
            poses[t] = poses[keyframes[-1]]
    return poses  # type: ignore[return-value]


def cmd_run(args) -> int:
    config = ds.load_run_config(args.config)
    layout = ds.DatasetLayout(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    policy = config.init_policy()
    relatives: tuple[Pose, ...] | None = None
    if policy.mode == GEOMETRY_GUIDED:
        bundle = layout.load_prior_bundle()
        relatives = bundle.relative_poses
        keyframes = select_keyframes(bundle, layout.intrinsics, config["keyframe.mean_flow_threshold"])
    else:
        depths = layout.load_prior_depths()
        bundle = PriorBundle(depths, tuple(Pose.identity() for _ in range(len(depths) - 1)))
        if layout.has_relative_poses():
            real = layout.load_prior_bundle()
            relatives = real.relative_poses
            keyframes = select_keyframes(real, layout.intrinsics, config["keyframe.mean_flow_threshold"])
        else:
            # no prior motion signal: keep every frame
            keyframes = list(range(layout.num_frames))

    if not layout.has_ground_truth():
        raise ConfigError(
            "dataset lacks gt_traj.txt / gt_depth: the oracle flow providers "
            "need ground truth (no learned matcher is bundled)"
        )
    stamps, gt_cam_to_world = layout.load_gt_trajectory()
    if len(gt_cam_to_world) != layout.num_frames:
        raise ConfigError("gt_traj.txt frame count differs from depth priors")
    gt_depths = layout.load_gt_depths()
    seq = sequence_from_ground_truth(
        layout.intrinsics,
        gt_cam_to_world,
        gt_depths,
        layout.load_images(),
        texture_seed=config["seed"],
    )

    state = initialize_state(bundle, keyframes, policy, layout.intrinsics)
    provider = make_provider(seq, config.provider_config(), keyframes)
    graph = build_keyframe_graph(len(keyframes), config["graph.window"])
    final, report = optimize(state, graph, provider, config.solver_config())

    all_poses = _complete_trajectory(keyframes, list(final.poses), layout.num_frames, relatives)
    write_stamped_poses(
        out / "est_traj.txt",
        np.arange(layout.num_frames, dtype=float),
        [inverse(g) for g in all_poses],
    )
    depth_dir = out / "est_depth"
    depth_dir.mkdir(exist_ok=True)
    for kf, inv_map in zip(keyframes, final.inv_depths):
        write_pfm(depth_dir / f"{kf:06d}.pfm", inv_map.to_depth().astype(np.float32).astype(float))

    records = [
        {
            "record": "iteration",
            "index": n,
            "residual_norm": it.residual_norm,
            "update_norm": it.update_norm,
            "clamped": it.clamped,
            "accepted": it.accepted,
        }
        for n, it in enumerate(report.iterations)
    ]
    records.append(
        {
            "record": "summary",
            "keyframes": keyframes,
            "iterations": report.num_iterations,
            "converged": report.converged,
            "stop_reason": report.stop_reason,
        }
    )
    est_traj = Trajectory(stamps, tuple(inverse(g) for g in all_poses))
    gt_traj = Trajectory(stamps, tuple(gt_cam_to_world))
    ate_value = ate(est_traj, gt_traj, config["eval.alignment"])
    failure = classify_failure(ate_value, gt_traj, config["eval.failure_threshold"])
    records.append({"record": "metric", "metric": "ate", "value": ate_value, "units": "m"})
    records.append(
        {
            "record": "metric",
            "metric": "is_failure",
            "value": failure.is_failure,
            "units": "",
        }
    )
    with open(out / "report.jsonl", "w", encoding="ascii") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    _say(
        f"run finished: {len(keyframes)} keyframes, {report.num_iterations} iterations, "
        f"ate[{config['eval.alignment']}] = {ate_value:.6f} m"
    )
    return EXIT_OK


def cmd_eval_traj(args) -> int:
    est_stamps, est_poses = load_stamped_poses(args.est)
    gt_stamps, gt_poses = load_stamped_poses(args.gt)
    est = Trajectory(est_stamps, tuple(est_poses))
    gt = Trajectory(gt_stamps, tuple(gt_poses))
    matches, dropped_est, dropped_gt = associate(est, gt)
    if not matches:
        raise NoOverlapError("no timestamp matches between the trajectories")
    value = ate(est, gt, args.mode)
    report = classify_failure(value, gt, args.threshold)
    _emit_metric("ate", value, "m")
    _emit_metric("matched_frames", len(matches), "count")
    _emit_metric("dropped_est", dropped_est, "count")
    _emit_metric("dropped_gt", dropped_gt, "count")
    _emit_metric("is_failure", report.is_failure, "")
    _emit_metric("path_length", report.path_length, "m")
    _emit_metric("max_step_translation", report.max_step_translation, "m")
    _emit_metric("total_forward_displacement", report.total_forward_displacement, "m")
    _emit_metric("large_motion_flag", report.large_motion_flag, "")
    _emit_report(
        {
            "ate": f"{value:.9g}",
            "alignment": args.mode,
            "matched_frames": len(matches),
            "is_failure": report.is_failure,
            "path_length": f"{report.path_length:.9g}",
            "large_motion_flag": report.large_motion_flag,
        }
    )
    return EXIT_OK


def cmd_eval_depth(args) -> int:
    est_dir = Path(args.est_dir)
    gt_dir = Path(args.gt_dir)
    if not est_dir.is_dir() or not gt_dir.is_dir():
        raise ConfigError("eval-depth needs two directories of %06d.pfm maps")
    est_ids = {p.name for p in est_dir.glob("*.pfm")}
    gt_ids = {p.name for p in gt_dir.glob("*.pfm")}
    shared = sorted(est_ids & gt_ids)
    if not shared:
        raise NoOverlapError("no frame indices shared between the depth directories")
    preds, gts = [], []
    for name in shared:
        preds.append(read_pfm(est_dir / name))
        gts.append(read_pfm(gt_dir / name))
    pred = np.stack(preds)
    gt = np.stack(gts)
    metrics = depth_metrics(pred, gt, np.isfinite(pred) & (pred > 0), cap=args.cap)
    _emit_metric("matched_frames", len(shared), "count")
    _emit_metric("abs_rel", metrics.abs_rel, "")
    _emit_metric("sq_rel", metrics.sq_rel, "m")
    _emit_metric("rmse", metrics.rmse, "m")
    _emit_metric("delta_1.25", metrics.delta_1_25, "")
    _emit_report(
        {
            "matched_frames": len(shared),
            "cap": f"{args.cap:.9g}",
            "abs_rel": f"{metrics.abs_rel:.9g}",
            "sq_rel": f"{metrics.sq_rel:.9g}",
            "rmse": f"{metrics.rmse:.9g}",
            "delta_1.25": f"{metrics.delta_1_25:.9g}",
        }
    )
    return EXIT_OK


def cmd_ablate_init(args) -> int:
    config = ds.load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = config["seed"]
    policies = []
    for name in str(config["ablate.policies"]).split(","):
        name = name.strip()
        if name:
            policies.append(InitPolicy(mode=name, chain_limit=config["init.chain_limit"]))
    if not policies:
        raise ConfigError("ablate.policies selects no policies")
    motions = [float(tok) for tok in str(config["ablate.motions"]).split(",") if tok.strip()]
    kinds = [tok.strip() for tok in str(config["ablate.providers"]).split(",") if tok.strip()]
    solver = config.solver_config()

    cells: list[tuple[str, SceneConfig, ProviderConfig]] = []
    cells.append(
        (
            "static",
            static_scene(seed=seed),
            ProviderConfig(kind="oracle", rng_seed=seed),
        )
    )
    for speed in motions:
        base = large_motion_scene(seed=seed)
        scene = SceneConfig(
            intrinsics=base.intrinsics,
            num_frames=base.num_frames,
            motion=ConstantVelocity(velocity=(0.0, 0.0, speed), angular=(0.0, 0.05, 0.0)),
            depth_model=base.depth_model,
            texture_seed=seed,
        )
        for kind in kinds:
            provider = ProviderConfig(
                kind=kind,
                noise_sigma=config["provider.noise_sigma"],
                search_radius=config["provider.search_radius"],
                weight_floor=config["provider.weight_floor"],
                rng_seed=seed,
            )
            cells.append((f"forward{speed:g}_{kind}", scene, provider))

    rows = []
    for scenario, scene, provider in cells:
        seq = generate_scene(scene)
        for result in run_ablation(seq, policies, provider, solver, window=config["graph.window"]):
            rows.append(
                {
                    "scenario": scenario,
                    "policy": result.policy,
                    "ate": result.ate,
                    "abs_rel": result.abs_rel,
                    "iterations": result.iterations,
                    "converged": result.converged,
                }
            )
        _say(f"scenario {scenario}: done")

    with open(out / "results.csv", "w", encoding="ascii", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["scenario", "policy", "ate", "abs_rel", "iterations", "converged"]
        )
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "plot.dat", "w", encoding="ascii") as fh:
        fh.write("# scenario policy ate abs_rel\n")
        for row in rows:
            fh.write(f"{row['scenario']} {row['policy']} {row['ate']:.9g} {row['abs_rel']:.9g}\n")
    _say(f"wrote {len(rows)} rows to {out / 'results.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sginit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p_synth.add_argument("--config", default=None)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run the odometry pipeline on a dataset")
    p_run.add_argument("dataset")
    p_run.add_argument("--config", default=None)
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=cmd_run)

    p_et = sub.add_parser("eval-traj", help="trajectory metrics for TUM files")
    p_et.add_argument("est")
    p_et.add_argument("gt")
    p_et.add_argument("--mode", default="similarity",
                      choices=["none", "scale_only", "rigid", "similarity"])
    p_et.add_argument("--threshold", type=float, default=1.0)
    p_et.set_defaults(func=cmd_eval_traj)

    p_ed = sub.add_parser("eval-depth", help="depth metrics over two PFM directories")
    p_ed.add_argument("est_dir")
    p_ed.add_argument("gt_dir")
    p_ed.add_argument("--cap", type=float, default=80.0)
    p_ed.set_defaults(func=cmd_eval_depth)

    p_ab = sub.add_parser("ablate-init", help="initialization ablation sweep")
    p_ab.add_argument("--config", default=None)
    p_ab.add_argument("--out", required=True)
    p_ab.set_defaults(func=cmd_ablate_init)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        _say(f"sginit: {exc}")
        return EXIT_CONFIG
    except NoOverlapError as exc:
        _say(f"sginit: {exc}")
        return EXIT_NO_OVERLAP
    except SingularSystemError as exc:
        _say(f"sginit: {exc}")
        return EXIT_SOLVER
    except OSError as exc:
        _say(f"sginit: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
