"""Command-line driver: train, evaluate, plan, rollout, mesh-export.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from tissue_isp.config import RunConfig, defaults_text, load_config
from tissue_isp.env import EpisodeSpec, IspEnv, trace_row, validate_spec, write_trace_csv
from tissue_isp.errors import ConfigError, DegenerateEpisode, IspError, OutOfDomainError, ParameterError
from tissue_isp.expert import ExpertPolicy
from tissue_isp.mesh import build_square_mesh, candidate_at, export_mesh, nearest_node
from tissue_isp.mlp import load_checkpoint, save_checkpoint
from tissue_isp.planner import plan
from tissue_isp.sac import Policy, run_episode, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
VARIANT_K = {"augmented": 5, "plain": 1}


def _f(x: float) -> str:
    return repr(float(x))


def make_env_factory(rc: RunConfig, **env_overrides):
    mesh = build_square_mesh(rc.mesh.side_mm, rc.mesh.resolution)
    env_cfg = replace(rc.env, **env_overrides) if env_overrides else rc.env

    def factory(seed):
        return IspEnv(env_cfg, mesh, rc.material, rc.solver, seed=seed)

    factory.mesh = mesh
    factory.env_config = env_cfg
    return factory


def load_policy(arg: str, rc: RunConfig):
    """Returns ``(policy, K)``; ``K`` is None for the expert."""
    if arg == "expert":
        return ExpertPolicy(rc.expert), None
    try:
        nets, man = load_checkpoint(arg)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {arg}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{arg}: {exc}") from None
    if "actor" not in nets:
        raise ConfigError(f"{arg}: checkpoint has no actor network")
    pol = Policy(nets["actor"], man.get("action_scale", rc.env.max_action_per_axis))
    return pol, int(man.get("augmentation_K", 1))


def read_spec_file(path, rc: RunConfig, mesh) -> tuple[EpisodeSpec, tuple[float, float], dict]:
    """Spec JSON: controlled_points and desired_positions (mm), optional
    young_modulus (MPa) and grasp_parameters (u_L, u_R)."""
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    for key in ("controlled_points", "desired_positions"):
        if key not in d:
            raise ConfigError(f"{path}: missing required key {key!r}")
    try:
        nodes = tuple(nearest_node(mesh, p) for p in d["controlled_points"])
    except OutOfDomainError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    lo, hi = rc.env.young_range
    young = float(d.get("young_modulus", 0.5 * (lo + hi)))
    u = tuple(float(x) for x in d.get("grasp_parameters", (0.5, 0.5)))
    if len(u) != 2 or not all(0.0 <= x <= 1.0 for x in u):
        raise ConfigError(f"{path}: grasp_parameters must be two numbers in [0, 1]")
    grasps = (candidate_at(mesh, "left", u[0]), candidate_at(mesh, "right", u[1]))[: rc.env.n_grasped]
    spec = EpisodeSpec(nodes, np.asarray(d["desired_positions"], dtype=float), grasps, young)
    validate_spec(spec, rc.env, mesh)
    echo = {
        "controlled_points_mm": d["controlled_points"],
        "snapped_controlled_nodes": list(nodes),
        "snapped_controlled_positions_mm": mesh.node_positions[list(nodes)].tolist(),
    }
    return spec, u, echo


def _policy_setup(args, rc: RunConfig, **env_overrides):
    """Load the policy and align the resolved config with its history length."""
    policy, K = load_policy(args.policy, rc)
    if K is not None:
        rc = rc.override({"env.augmentation_K": K})
    factory = make_env_factory(rc, **env_overrides)
    _check_dims(policy, K, factory)
    return policy, K, rc, factory


def _check_dims(policy, K, factory):
    if isinstance(policy, Policy) and policy.obs_dim != factory.env_config.obs_dim:
        raise ConfigError(f"checkpoint expects observation width {policy.obs_dim}, environment gives {factory.env_config.obs_dim}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------


def cmd_train(args, rc: RunConfig, out: Path) -> None:
    K = VARIANT_K[args.variant]
    rc = rc.override({"env.augmentation_K": K})
    factory = make_env_factory(rc)
    result = train(factory, rc.sac, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    rc.write_snapshot(out / "resolved_config.txt")
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean_return", "std_return", "seed", "variant", "config_hash"])
        for step, mean, std in result.curve:
            w.writerow([step, _f(mean), _f(std), args.seed, args.variant, rc.hash])
    manifest = {
        "obs_dim": factory.env_config.obs_dim,
        "action_dim": factory.env_config.action_dim,
        "augmentation_K": K,
        "action_scale": rc.env.max_action_per_axis,
        "variant": args.variant,
        "seed": args.seed,
        "config_hash": rc.hash,
        "diverged_training_steps": result.episodes_diverged,
    }
    save_checkpoint(out / "policy.ckpt", result.agent.networks(), manifest)


def cmd_evaluate(args, rc: RunConfig, out: Path) -> None:
    policy, K, rc, factory = _policy_setup(args, rc)
    episodes = args.episodes or rc.run.eval_episodes
    env = factory(args.seed)
    rows = []
    for _ in range(episodes):
        ret, last = run_episode(policy, env)
        rows.append({"spec": env.spec.to_dict(), "return": ret, "final_error_mm": last.error_norm})
    rets = np.array([r["return"] for r in rows])
    report = {
        "policy": "expert" if K is None else "checkpoint",
        "episodes": rows,
        "mean_return": float(rets.mean()),
        "std_return": float(rets.std()),
        "seed": args.seed,
        "config_hash": rc.hash,
    }
    out.mkdir(parents=True, exist_ok=True)
    rc.write_snapshot(out / "resolved_config.txt")
    _write_json(out / "evaluate.json", report)


def cmd_plan(args, rc: RunConfig, out: Path) -> None:
    policy, K, rc, factory = _policy_setup(args, rc)
    if not args.spec:
        raise ConfigError("plan needs --spec")
    template, _, echo = read_spec_file(args.spec, rc, factory.mesh)
    result = plan(template, policy, factory, rc.plan, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    rc.write_snapshot(out / "resolved_config.txt")
    doc = {**result.to_dict(), **echo, "seed": args.seed, "config_hash": rc.hash}
    _write_json(out / "plan.json", doc)
    # wall time varies run to run, so it lives outside the result document
    _write_json(out / "plan_timing.json", {"wall_time_s": result.wall_time})


def cmd_rollout(args, rc: RunConfig, out: Path) -> None:
    steps = args.steps or rc.run.rollout_steps
    policy, K, rc, factory = _policy_setup(args, rc, episode_length=steps)
    if not args.spec:
        raise ConfigError("rollout needs --spec")
    spec, _, _ = read_spec_file(args.spec, rc, factory.mesh)
    env = factory(args.seed)
    env.reset(fixed_spec=spec)
    rows = []
    for t in range(1, steps + 1):
        res = env.step(policy.act_env(env))
        row = trace_row(t, res, env)
        row["seed"] = args.seed
        row["config_hash"] = rc.hash
        rows.append(row)
        if res.done:
            break
    out.mkdir(parents=True, exist_ok=True)
    rc.write_snapshot(out / "resolved_config.txt")
    write_trace_csv(out / "trace.csv", rows)


def cmd_mesh_export(args, rc: RunConfig, out: Path) -> None:
    mesh = build_square_mesh(rc.mesh.side_mm, rc.mesh.resolution)
    out.mkdir(parents=True, exist_ok=True)
    rc.write_snapshot(out / "resolved_config.txt")
    export_mesh(mesh, out / "mesh.txt")


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "plan": cmd_plan,
    "rollout": cmd_rollout,
    "mesh-export": cmd_mesh_export,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tissue-isp", description=__doc__.splitlines()[0])
    p.add_argument("--print-defaults", action="store_true", help="print every config key with its default")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value overrides file")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", default="runs", help="output directory")
        if name == "train":
            s.add_argument("--variant", choices=sorted(VARIANT_K), default="augmented")
            s.add_argument("--seeds", help="comma-separated seeds; outputs go to OUT/seed_<n>")
            s.add_argument("--jobs", type=int, default=1, help="processes for --seeds")
        if name in ("evaluate", "plan", "rollout"):
            s.add_argument("--policy", required=True, help="checkpoint path or 'expert'")
        if name in ("plan", "rollout"):
            s.add_argument("--spec", help="JSON file with controlled_points and desired_positions (mm)")
        if name == "evaluate":
            s.add_argument("--episodes", type=int)
        if name == "rollout":
            s.add_argument("--steps", type=int)
    return p


def _train_seed(payload):
    args, rc, out = payload
    cmd_train(args, rc, out)
    return str(out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        sys.stdout.write(defaults_text())
        return EXIT_OK
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        rc = load_config(args.config)
        out = Path(args.out)
        if args.command == "train" and args.seeds:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            payloads = [(argparse.Namespace(**{**vars(args), "seed": s}), rc, out / f"seed_{s}") for s in seeds]
            if args.jobs > 1:
                from concurrent.futures import ProcessPoolExecutor

                with ProcessPoolExecutor(args.jobs) as ex:
                    list(ex.map(_train_seed, payloads))
            else:
                for pl in payloads:
                    _train_seed(pl)
        else:
            COMMANDS[args.command](args, rc, out)
    except (ConfigError, ParameterError, OutOfDomainError, DegenerateEpisode) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IspError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
