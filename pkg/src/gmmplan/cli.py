"""Command-line pipeline driver.

Subcommands cover the full workflow: ``gen-data`` synthesizes the point
cloud dataset, ``train`` fits one network per component count in the
sweep, ``bench`` times forward passes, ``plan`` builds a roadmap and
extracts a nominal trajectory, ``optimize`` refines it against the
collision bound, and ``validate`` audits the bound against Monte-Carlo
estimates. Every command reads one ``key = value`` run-config file and is
reproducible from its seed; reports are written as CSV plus a rendered
figure next to it.
"""

from __future__ import annotations

import argparse
import sys
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import collision, mdn, planner, report, robot
from .errors import ConfigurationError, GmmPlanError, TrainingDivergedError


def stage_seed(seed: int, stage: str) -> int:
    """Derive a per-stage stream so stages can rerun independently."""
    ss = np.random.SeedSequence([seed, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    dataset: str = ""                  # defaults to <out>/dataset
    scene: str = ""
    model: str = ""                    # defaults to <out>/models/model_n<first sweep>.txt
    trajectory: str = ""               # defaults to <out>/trajectory.csv

    robot_length: float = 0.2
    robot_offset_radius: float = 0.01
    robot_body_radius: float = 0.005
    robot_d_min: float = 0.0
    robot_d_max: float = 0.03
    robot_hysteresis: float = 0.0015
    robot_noise: float = 0.001

    grid: tuple = (7, 7, 7, 3)
    approaches: int = 8
    points_per_subcloud: int = 2000
    test_fraction: float = 0.1

    sweep: tuple = (5,)
    epochs: int = 200
    step_size: float = 1e-3
    batch_size: int = 16
    points_per_config: int = 512
    trunk: tuple = (128, 128)
    head_hidden: tuple = (64,)

    prm_nodes: int = 500
    prm_neighbors: int = 10
    prm_step: float = 0.002
    opt_iterations: int = 50
    opt_samples: int = 20
    opt_radius: float = 0.0            # 0 -> 10% of the displacement range
    opt_xi: float = 0.01
    states_per_edge: int = 10
    densify_edge: float = 0.01

    bench_count: int = 10000
    validate_configs: int = 20
    mc_samples: int = 100000

    def robot_spec(self) -> robot.RobotSpec:
        return robot.RobotSpec(
            length=self.robot_length,
            offset_radius=self.robot_offset_radius,
            body_radius=self.robot_body_radius,
            d_min=self.robot_d_min,
            d_max=self.robot_d_max,
            hysteresis_scale=self.robot_hysteresis,
            noise_scale=self.robot_noise,
        )

    def out_dir(self) -> Path:
        return Path(self.out)

    def dataset_dir(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out_dir() / "dataset"

    def model_path(self) -> Path:
        if self.model:
            return Path(self.model)
        return self.out_dir() / "models" / f"model_n{self.sweep[0]}.txt"

    def trajectory_path(self) -> Path:
        return Path(self.trajectory) if self.trajectory else self.out_dir() / "trajectory.csv"


_INT_TUPLES = {"grid", "sweep", "trunk", "head_hidden"}


def load_run_config(path: str | None) -> RunConfig:
    """Parse a ``key = value`` run config; unknown keys are rejected."""
    config = RunConfig()
    if path is None:
        return config
    known = {f.name: f.type for f in fields(RunConfig)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        current = getattr(config, key)
        try:
            if key in _INT_TUPLES:
                parsed = tuple(int(v) for v in value.split(",") if v.strip())
            elif isinstance(current, bool):
                parsed = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                parsed = int(value)
            elif isinstance(current, float):
                parsed = float(value)
            else:
                parsed = value
        except ValueError:
            raise ConfigurationError(f"{path}:{lineno}: malformed value for {key!r}") from None
        setattr(config, key, parsed)
    return config


def _load_model(path) -> mdn.MdnParams:
    return mdn.load_params(Path(path).read_bytes())


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return f"{v:.17g}"
    return str(v)


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_gen_data(config: RunConfig) -> int:
    spec = config.robot_spec()
    train_ds, test_ds = robot.build_dataset(
        spec, config.grid, config.approaches, config.points_per_subcloud,
        config.test_fraction, stage_seed(config.seed, "gen-data"))
    out = config.dataset_dir()
    robot.save_dataset(out, train_ds, test_ds)
    total = len(train_ds.entries) + len(test_ds.entries)
    print(f"wrote {total} configs to {out} "
          f"({len(train_ds.entries)} train / {len(test_ds.entries)} test)")
    return 0


def cmd_train(config: RunConfig) -> int:
    train_ds, test_ds = robot.load_dataset(config.dataset_dir())
    models_dir = config.out_dir() / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    centroid = np.mean([cloud.mean(axis=0) for _, cloud in train_ds.entries], axis=0)
    m = train_ds.entries[0][0].shape[0]
    seed = stage_seed(config.seed, "train")

    summary = []
    for n in config.sweep:
        init = mdn.init_params(m, n, config.trunk, config.head_hidden,
                               seed=seed + n, mean_center=centroid)
        settings = mdn.TrainSettings(
            epochs=config.epochs, step_size=config.step_size,
            batch_size=config.batch_size, points_per_config=config.points_per_config,
            seed=seed + n, heldout=test_ds)
        try:
            params, rep = mdn.train(init, train_ds, settings)
        except TrainingDivergedError as exc:
            print(f"n={n}: diverged at epoch {exc.epoch}", file=sys.stderr)
            summary.append((n, float("nan"), float("nan")))
            continue
        (models_dir / f"model_n{n}.txt").write_bytes(mdn.save_params(params))
        _write_csv(models_dir / f"train_report_n{n}.csv",
                   "epoch,train_nll,heldout_nll,seconds",
                   [(e + 1, tr, ho, sec) for e, (tr, ho, sec) in
                    enumerate(zip(rep.train_nll, rep.heldout_nll, rep.epoch_seconds))])
        report.save_training_figure(models_dir / f"train_report_n{n}.png",
                                    rep.train_nll, rep.heldout_nll)
        test_nll = rep.heldout_nll[-1] if rep.heldout_nll else float("nan")
        summary.append((n, test_nll, rep.collapse_fraction))
        print(f"n={n}: heldout NLL {test_nll:.4f}, collapse fraction {rep.collapse_fraction:.2f}")

    _write_csv(config.out_dir() / "sweep.csv", "components,test_nll,collapse_fraction", summary)
    ok = [(n, nll) for n, nll, _ in summary if np.isfinite(nll)]
    if ok:
        report.save_sweep_figure(config.out_dir() / "sweep.png",
                                 [n for n, _ in ok], [v for _, v in ok])
    return 0


def cmd_bench(config: RunConfig) -> int:
    params = _load_model(config.model_path())
    spec = config.robot_spec()
    rng = np.random.default_rng(stage_seed(config.seed, "bench"))
    configs = rng.uniform(spec.d_min, spec.d_max, size=(config.bench_count, params.n_inputs))
    out = config.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bench_configs.csv",
               ",".join(f"d{i + 1}" for i in range(params.n_inputs)), configs)

    mdn.mdn_forward(params, configs[0])      # warm caches before timing
    millis = np.empty(len(configs))
    for i, d in enumerate(configs):
        t0 = time.perf_counter()
        mdn.mdn_forward(params, d)
        millis[i] = (time.perf_counter() - t0) * 1e3
    stats = (float(np.mean(millis)), float(np.median(millis)),
             float(np.percentile(millis, 99)))
    with open(out / "latency.txt", "w") as fh:
        fh.write(f"count {len(configs)}\nmean_ms {stats[0]:.6f}\n"
                 f"median_ms {stats[1]:.6f}\np99_ms {stats[2]:.6f}\n")
    report.save_latency_figure(out / "latency.png", millis)
    print(f"forward latency over {len(configs)} configs: "
          f"mean {stats[0]:.4f} ms, median {stats[1]:.4f} ms, p99 {stats[2]:.4f} ms")
    return 0


def _require_scene(config: RunConfig) -> collision.Scene:
    if not config.scene:
        raise ConfigurationError("this command needs 'scene = <path>' in the run config")
    scene = collision.load_scene(config.scene, config.densify_edge)
    if scene.start is None or scene.goal is None:
        raise ConfigurationError("scene file must define start and goal configurations")
    return scene


def cmd_plan(config: RunConfig) -> int:
    scene = _require_scene(config)
    params = _load_model(config.model_path())
    spec = config.robot_spec()
    roadmap = planner.prm_build(scene.mesh, params, spec,
                                n_nodes=config.prm_nodes,
                                n_neighbors=config.prm_neighbors,
                                step=config.prm_step,
                                seed=stage_seed(config.seed, "plan"))
    traj = planner.prm_query(roadmap, scene.start, scene.goal, scene.mesh,
                             params, config.prm_step)
    out = config.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    planner.save_trajectory(config.trajectory_path(), traj)

    states = planner.trajectory_states(traj, config.states_per_edge)
    bounds = planner.state_collision_bounds(params, scene.mesh, states)
    total = collision.trajectory_collision_bound(bounds)
    with open(out / "trajectory_bound.txt", "w") as fh:
        fh.write(f"states {len(states)}\nbound {total:.17g}\n")
    report.save_state_bound_figure(out / "plan_states.png", bounds)
    print(f"nominal trajectory: {len(traj)} waypoints, "
          f"{len(roadmap.nodes)} roadmap nodes, collision bound {total:.5f}")
    return 0


def cmd_optimize(config: RunConfig) -> int:
    scene = _require_scene(config)
    params = _load_model(config.model_path())
    spec = config.robot_spec()
    traj = planner.load_trajectory(config.trajectory_path())
    settings = planner.OptimizeSettings(
        iterations=config.opt_iterations,
        samples_per_iteration=config.opt_samples,
        radius=config.opt_radius if config.opt_radius > 0 else None,
        xi=config.opt_xi,
        states_per_edge=config.states_per_edge,
        seed=stage_seed(config.seed, "optimize"))
    result = planner.optimize_trajectory(traj, scene.mesh, params, spec, settings)
    out = config.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    planner.save_trajectory(out / "optimized.csv", result.trajectory)
    _write_csv(out / "optimize_log.csv",
               "iteration,waypoint_index,candidate_bound,incumbent_bound,accepted",
               result.log)
    report.save_optimization_figure(out / "optimization.png", result.history)
    print(f"bound {result.history[0]:.5f} -> {result.history[-1]:.5f} "
          f"after {len(result.history) - 1} iterations")
    return 0


def cmd_validate(config: RunConfig) -> int:
    scene = collision.load_scene(config.scene, config.densify_edge) if config.scene else None
    if scene is None:
        raise ConfigurationError("validate needs 'scene = <path>' in the run config")
    params = _load_model(config.model_path())
    spec = config.robot_spec()
    rng = np.random.default_rng(stage_seed(config.seed, "validate"))
    rows = []
    conservative = 0
    for k in range(config.validate_configs):
        d = rng.uniform(spec.d_min, spec.d_max, size=params.n_inputs)
        g = mdn.mdn_forward(params, d)
        bound = collision.config_collision_bound(g, scene.mesh).probability
        estimate, stderr = collision.mc_collision_estimate(
            g, scene.mesh, config.mc_samples, int(rng.integers(0, 2 ** 62)))
        ok = bound >= estimate - 3.0 * stderr
        conservative += ok
        rows.append((k, bound, estimate, stderr, ok))
        print(f"config {k}: bound {bound:.5f}, mc {estimate:.5f} +/- {stderr:.5f}"
              f"{'' if ok else '  NOT CONSERVATIVE'}")
    out = config.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "validate.csv", "config,bound,mc_estimate,mc_stderr,conservative", rows)
    report.save_validation_figure(out / "validate.png",
                                  [r[1] for r in rows], [r[2] for r in rows],
                                  [r[3] for r in rows])
    fraction = conservative / max(1, config.validate_configs)
    print(f"conservative fraction: {fraction:.3f}")
    return 0 if fraction == 1.0 else 1


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "bench": cmd_bench,
    "plan": cmd_plan,
    "optimize": cmd_optimize,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmmplan",
        description="Learned Gaussian-mixture workspace models and "
                    "collision-bounded planning for tendon robots.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run-config file (key = value lines)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.out = args.out
        config.out_dir().mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](config)
    except GmmPlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
