"""Episodic positioning environment on top of the FEM simulator.

The agent observes the stacked error of the controlled points with respect to
their desired positions, optionally followed by the ``K - 1`` most recent
(clamped) actions, and commands per-step displacements of the grasped nodes.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from tissue_isp.errors import ConfigError, DegenerateEpisode, ResetFailure, SimulationDiverged
from tissue_isp.fem import MaterialParams, SimState, SolverConfig, rest_state, set_grasp_targets, step
from tissue_isp.mesh import TissueMesh

MAX_RESAMPLE_ATTEMPTS = 100


@dataclass(frozen=True)
class EnvConfig:
    n_controlled: int = 2
    n_grasped: int = 2
    dimension: int = 2
    episode_length: int = 100
    max_action_per_axis: float = 0.2  # mm
    reward_scale_lambda: float = 12.0
    young_range: tuple[float, float] = (0.6, 1.2)  # MPa
    poisson_fixed: float = 0.49
    desired_distance: float = 4.0  # mm
    min_desired_separation: float = 2.0  # mm
    augmentation_K: int = 1
    # planning mode only: end the episode once a step reward exceeds this
    early_stop_reward: float | None = None

    def __post_init__(self):
        if self.n_controlled < 1 or self.n_grasped < 1 or self.dimension < 1:
            raise ConfigError("n_controlled, n_grasped and dimension must be >= 1")
        if self.dimension != 2:
            raise ConfigError("only planar (dimension = 2) tissue is simulated")
        if self.n_grasped > 2:
            raise ConfigError("at most two grasp points (one per clamped-free side)")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be >= 1")
        if not self.max_action_per_axis > 0:
            raise ConfigError("max_action_per_axis must be positive")
        if self.augmentation_K < 1:
            raise ConfigError("augmentation_K must be >= 1")
        lo, hi = self.young_range
        if not 0 < lo <= hi:
            raise ConfigError("young_range must be a non-empty positive interval")
        if not self.desired_distance > 0:
            raise ConfigError("desired_distance must be positive")

    @property
    def action_dim(self) -> int:
        return self.n_grasped * self.dimension

    @property
    def error_dim(self) -> int:
        return self.n_controlled * self.dimension

    @property
    def obs_dim(self) -> int:
        return self.error_dim + (self.augmentation_K - 1) * self.action_dim


@dataclass(frozen=True)
class EpisodeSpec:
    controlled_nodes: tuple[int, ...]
    desired_positions: np.ndarray  # (N, 2)
    grasp_nodes: tuple[int, ...]
    young_modulus_drawn: float

    def to_dict(self) -> dict:
        return {
            "controlled_nodes": [int(k) for k in self.controlled_nodes],
            "desired_positions": np.asarray(self.desired_positions).tolist(),
            "grasp_nodes": [int(k) for k in self.grasp_nodes],
            "young_modulus_drawn": float(self.young_modulus_drawn),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSpec":
        return cls(
            controlled_nodes=tuple(int(k) for k in d["controlled_nodes"]),
            desired_positions=np.asarray(d["desired_positions"], dtype=float),
            grasp_nodes=tuple(int(k) for k in d["grasp_nodes"]),
            young_modulus_drawn=float(d["young_modulus_drawn"]),
        )


@dataclass(frozen=True)
class Observation:
    error_vector: np.ndarray
    action_history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.error_vector, self.action_history])

    def __len__(self):
        return self.error_vector.size + self.action_history.size


@dataclass(frozen=True)
class SolverSummary:
    substeps: int
    non_converged: int
    max_iterations: int

    @property
    def converged(self) -> bool:
        return self.non_converged == 0


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    solver_report: SolverSummary
    diverged: bool = False
    early_stopped: bool = False
    error_norm: float = float("nan")


def reward(p_t, p_0, p_des, lam: float) -> float:
    """``lam * (1 - sqrt(|p_t - p_des| / |p_0 - p_des|))`` on stacked vectors."""
    p_des = np.asarray(p_des, dtype=float)
    e0 = float(np.linalg.norm(np.asarray(p_0, dtype=float) - p_des))
    if e0 == 0.0:
        raise DegenerateEpisode("initial error is zero; reward undefined")
    et = float(np.linalg.norm(np.asarray(p_t, dtype=float) - p_des))
    return lam * (1.0 - np.sqrt(et / e0))


def augment(error_vector, history) -> Observation:
    """Attach the action history (most recent first) to the error vector."""
    error_vector = np.asarray(error_vector, dtype=float).ravel()
    if history is None or len(history) == 0:
        return Observation(error_vector, np.zeros(0))
    hist = np.concatenate([np.asarray(a, dtype=float).ravel() for a in history])
    return Observation(error_vector, hist)


def validate_spec(spec: EpisodeSpec, config: EnvConfig, mesh: TissueMesh) -> None:
    if len(spec.controlled_nodes) != config.n_controlled:
        raise ConfigError("number of controlled nodes does not match n_controlled")
    if len(set(spec.controlled_nodes)) != len(spec.controlled_nodes):
        raise ConfigError("controlled nodes must be distinct")
    if not set(spec.controlled_nodes) <= mesh.interior_nodes:
        raise ConfigError("controlled nodes must lie in the central region")
    if len(spec.grasp_nodes) != config.n_grasped:
        raise ConfigError("number of grasp nodes does not match n_grasped")
    sides = (mesh.left_candidates, mesh.right_candidates)
    for k, cands in zip(spec.grasp_nodes, sides):
        if k not in cands:
            raise ConfigError(f"grasp node {k} is not a valid candidate for its side")
    des = np.asarray(spec.desired_positions, dtype=float)
    if des.shape != (config.n_controlled, 2):
        raise ConfigError("desired_positions must have shape (N, 2)")
    L = mesh.side_length
    if np.any(des <= 0.0) or np.any(des >= L):
        raise ConfigError("desired positions must lie strictly inside the tissue")
    p0 = mesh.node_positions[list(spec.controlled_nodes)]
    if np.linalg.norm(p0 - des) == 0.0:
        raise DegenerateEpisode("desired positions coincide with the initial positions")


class IspEnv:
    """Single-threaded environment; owns its simulator state and random stream."""

    def __init__(
        self,
        config: EnvConfig,
        mesh: TissueMesh,
        material: MaterialParams | None = None,
        solver: SolverConfig | None = None,
        seed: int | None = None,
    ):
        self.config = config
        self.mesh = mesh
        self.base_material = material or MaterialParams(poisson_ratio=config.poisson_fixed)
        self.solver = solver or SolverConfig()
        self.rng = np.random.default_rng(seed)
        self.spec: EpisodeSpec | None = None
        self.state: SimState | None = None
        self.material = self.base_material
        self.t = 0
        self.done = True
        self._history: deque = deque(maxlen=max(config.augmentation_K - 1, 0))
        self._targets: dict[int, np.ndarray] = {}
        self.p0 = None
        self.q0 = None

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    # -- sampling ------------------------------------------------------------

    def sample_spec(self, rng: np.random.Generator | None = None) -> EpisodeSpec:
        rng = self.rng if rng is None else rng
        cfg, mesh = self.config, self.mesh
        lo, hi = cfg.young_range
        young = float(rng.uniform(lo, hi))
        interior = mesh.interior_sorted
        if cfg.n_controlled > interior.size:
            raise ConfigError("more controlled points than central-region nodes")
        ctrl = rng.choice(interior, size=cfg.n_controlled, replace=False)
        p0 = mesh.node_positions[ctrl]
        L = mesh.side_length
        for _ in range(MAX_RESAMPLE_ATTEMPTS):
            ang = rng.uniform(0.0, 2.0 * np.pi, size=cfg.n_controlled)
            des = p0 + cfg.desired_distance * np.column_stack([np.cos(ang), np.sin(ang)])
            if np.any(des <= 0.0) or np.any(des >= L):
                continue
            if cfg.n_controlled > 1:
                diff = des[:, None, :] - des[None, :, :]
                dist = np.linalg.norm(diff, axis=-1)[np.triu_indices(cfg.n_controlled, 1)]
                if dist.min() < cfg.min_desired_separation:
                    continue
            break
        else:
            raise ResetFailure("could not draw well-separated desired positions")
        sides = (mesh.left_candidates, mesh.right_candidates)
        grasps = tuple(int(rng.choice(sides[i])) for i in range(cfg.n_grasped))
        return EpisodeSpec(
            controlled_nodes=tuple(int(k) for k in ctrl),
            desired_positions=des,
            grasp_nodes=grasps,
            young_modulus_drawn=young,
        )

    # -- episode -------------------------------------------------------------

    def reset(self, fixed_spec: EpisodeSpec | None = None, rng: np.random.Generator | None = None):
        """Start an episode. Returns ``(observation, spec)``."""
        if fixed_spec is None:
            spec = self.sample_spec(rng)
        else:
            validate_spec(fixed_spec, self.config, self.mesh)
            spec = fixed_spec
        self.spec = spec
        self.material = replace(
            self.base_material, young_modulus=spec.young_modulus_drawn, poisson_ratio=self.config.poisson_fixed
        )
        self.state = rest_state(self.mesh)
        self._targets = {k: self.mesh.node_positions[k].copy() for k in spec.grasp_nodes}
        set_grasp_targets(self.state, self.mesh, self._targets)
        self._history.clear()
        for _ in range(self._history.maxlen or 0):
            self._history.append(np.zeros(self.config.action_dim))
        self.p0 = self.mesh.node_positions[list(spec.controlled_nodes)].copy()
        self.q0 = self.mesh.node_positions[list(spec.grasp_nodes)].copy()
        self.t = 0
        self.done = False
        return self.observation(), spec

    def controlled_positions(self) -> np.ndarray:
        return self.state.positions[list(self.spec.controlled_nodes)]

    def grasp_positions(self) -> np.ndarray:
        return self.state.positions[list(self.spec.grasp_nodes)]

    def error_vector(self) -> np.ndarray:
        return (self.controlled_positions() - self.spec.desired_positions).ravel()

    def observation(self) -> Observation:
        return augment(self.error_vector(), list(self._history))

    def clamp(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=float).ravel()
        if a.size != self.config.action_dim:
            raise ConfigError(f"action must have {self.config.action_dim} components, got {a.size}")
        m = self.config.max_action_per_axis
        return np.clip(a, -m, m)

    def step(self, action) -> StepResult:
        if self.done:
            raise RuntimeError("episode is not active; call reset() first")
        cfg = self.config
        a = self.clamp(action)
        for i, k in enumerate(self.spec.grasp_nodes):
            self._targets[k] = self._targets[k] + a[2 * i : 2 * i + 2]
        set_grasp_targets(self.state, self.mesh, self._targets)

        non_conv, max_it, n = 0, 0, 0
        try:
            for _ in range(self.solver.substeps_per_control):
                self.state, rep = step(self.state, self.mesh, self.material, self.solver)
                n += 1
                non_conv += not rep.converged
                max_it = max(max_it, rep.cg_iterations_used)
        except SimulationDiverged as exc:
            if exc.last_state is not None:
                self.state = exc.last_state
            self.t += 1
            self.done = True
            if self._history.maxlen:
                self._history.appendleft(a)
            summary = SolverSummary(n + 1, non_conv + 1, max_it)
            return StepResult(self.observation(), -cfg.reward_scale_lambda, True, summary, diverged=True)

        self.t += 1
        if self._history.maxlen:
            self._history.appendleft(a)
        p_t = self.controlled_positions()
        r = reward(p_t, self.p0, self.spec.desired_positions, cfg.reward_scale_lambda)
        early = cfg.early_stop_reward is not None and r > cfg.early_stop_reward
        self.done = self.t >= cfg.episode_length or early
        summary = SolverSummary(n, non_conv, max_it)
        err = float(np.linalg.norm(p_t - self.spec.desired_positions))
        return StepResult(self.observation(), float(r), self.done, summary, early_stopped=early, error_norm=err)


TRACE_FIELDS = ("step", "reward", "error_norm_mm")


def write_trace_csv(path, rows: list[dict]) -> None:
    """Write per-step episode rows; columns follow the first row's keys."""
    if not rows:
        Path(path).write_text(",".join(TRACE_FIELDS) + "\n")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def trace_row(t: int, result: StepResult, env: IspEnv) -> dict:
    row = {"step": t, "reward": result.reward, "error_norm_mm": result.error_norm}
    err = env.controlled_positions() - env.spec.desired_positions
    for i, (ex, ey) in enumerate(err):
        row[f"err{i}_x"] = ex
        row[f"err{i}_y"] = ey
    for i, (qx, qy) in enumerate(env.grasp_positions()):
        row[f"grasp{i}_x"] = qx
        row[f"grasp{i}_y"] = qy
    row["cg_converged"] = result.solver_report.converged
    return row
